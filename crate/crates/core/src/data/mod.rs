//! Corpora, vocabularies, the synthetic pronoun task and contrastive sets.

pub mod contrastive;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use contrastive::{load_contrastive, parse_contrastive, save_contrastive, ContrastiveExample};
pub use corpus::{load_documents, parse_documents, save_documents, Document};
pub use synthetic::{gen_synthetic, SyntheticCorpus, SyntheticSpec};
pub use vocab::Vocabulary;

use crate::model::Example;

/// An example together with where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub example: Example,
    pub document: usize,
    pub sentence: usize,
}

/// Source and target vocabularies over all sentences of `docs`.
pub fn build_vocabs(docs: &[Document], max_size: Option<usize>) -> (Vocabulary, Vocabulary) {
    let src = Vocabulary::build(docs.iter().flat_map(Document::sources), max_size);
    let tgt = Vocabulary::build(docs.iter().flat_map(Document::targets), max_size);
    (src, tgt)
}

/// One example per sentence, carrying up to `context_size` immediately
/// preceding source sentences of the same document, newest first.
pub fn examples_from_documents(
    docs: &[Document],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    context_size: usize,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let src: Vec<Vec<u32>> = doc.sources().map(|s| src_vocab.encode(s)).collect();
        for (i, (_, tgt)) in doc.sentences.iter().enumerate() {
            let context = (1..=context_size.min(i)).map(|j| src[i - j].clone()).collect();
            out.push(TrainExample {
                example: Example {
                    src: src[i].clone(),
                    tgt: tgt_vocab.encode(tgt),
                    context,
                },
                document: d,
                sentence: i,
            });
        }
    }
    out
}
