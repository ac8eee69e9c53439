//! Synthetic pronoun-disambiguation corpus.
//!
//! Source words map through a fixed bijective lexicon (`s<i>` to `t<i>`,
//! nouns `n<i>` to `m<i>`). Every noun has a fixed gender. A noun sentence
//! contains exactly one noun; a pronoun sentence contains the ambiguous
//! source token `IT`, translated as `PRON_A` or `PRON_B` according to the
//! gender of the most recent noun. Optional neutral sentences between a
//! noun and its pronoun push the antecedent further back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::contrastive::ContrastiveExample;
use super::corpus::Document;
use crate::{Error, Result};

pub const IT: &str = "IT";
pub const PRON_A: &str = "PRON_A";
pub const PRON_B: &str = "PRON_B";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    A,
    B,
}

impl Gender {
    pub fn pronoun(self) -> &'static str {
        match self {
            Gender::A => PRON_A,
            Gender::B => PRON_B,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of neutral (non-noun) source words.
    pub vocab_size: usize,
    pub nouns: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a noun sentence is eventually followed by a pronoun
    /// sentence referring to it.
    pub pronoun_rate: f64,
    /// Probability of each additional neutral sentence between a noun and
    /// its pronoun.
    pub neutral_rate: f64,
    /// Probability that a sampled noun has gender A.
    pub gender_balance: f64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub train_docs: usize,
    pub valid_docs: usize,
    pub test_docs: usize,
    /// Previous sentences stored with each contrastive example (at least
    /// the antecedent distance).
    pub context_window: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            nouns: 20,
            min_len: 4,
            max_len: 8,
            pronoun_rate: 1.0,
            neutral_rate: 0.0,
            gender_balance: 0.5,
            min_doc_len: 4,
            max_doc_len: 4,
            train_docs: 2000,
            valid_docs: 100,
            test_docs: 200,
            context_window: 3,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.nouns < 2 {
            return fail("need at least one neutral word and two nouns");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return fail("sentence length range must satisfy 1 <= min <= max");
        }
        if self.min_doc_len < 1 || self.min_doc_len > self.max_doc_len {
            return fail("document length range must satisfy 1 <= min <= max");
        }
        if !(self.gender_balance > 0.0 && self.gender_balance < 1.0) {
            return fail("gender balance must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.pronoun_rate) || !(0.0..1.0).contains(&self.neutral_rate) {
            return fail("pronoun rate must lie in [0, 1] and neutral rate in [0, 1)");
        }
        Ok(())
    }

    /// Gender of noun `i`: the first half of the nouns are A, the rest B.
    pub fn gender(&self, noun: usize) -> Gender {
        if noun < self.nouns / 2 {
            Gender::A
        } else {
            Gender::B
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
    /// One example per pronoun sentence of the test documents.
    pub contrastive: Vec<ContrastiveExample>,
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn filler(&mut self, len: usize) -> (Vec<String>, Vec<String>) {
        (0..len)
            .map(|_| {
                let w = self.rng.random_range(0..self.spec.vocab_size);
                (format!("s{w}"), format!("t{w}"))
            })
            .unzip()
    }

    fn sentence(&mut self, special: Option<(String, String)>) -> (String, String) {
        let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let (mut src, mut tgt) = self.filler(len - usize::from(special.is_some()));
        if let Some((s, t)) = special {
            let at = self.rng.random_range(0..=src.len());
            src.insert(at, s);
            tgt.insert(at, t);
        }
        (src.join(" "), tgt.join(" "))
    }

    fn noun(&mut self) -> (usize, Gender) {
        let gender = if self.rng.random::<f64>() < self.spec.gender_balance {
            Gender::A
        } else {
            Gender::B
        };
        let half = self.spec.nouns / 2;
        let n = match gender {
            Gender::A => self.rng.random_range(0..half),
            Gender::B => self.rng.random_range(half..self.spec.nouns),
        };
        (n, gender)
    }

    fn document(&mut self) -> Document {
        let len = self
            .rng
            .random_range(self.spec.min_doc_len..=self.spec.max_doc_len);
        let mut doc = Document::default();
        while doc.len() < len {
            let (n, gender) = self.noun();
            doc.sentences
                .push(self.sentence(Some((format!("n{n}"), format!("m{n}")))));
            if self.rng.random::<f64>() >= self.spec.pronoun_rate {
                continue;
            }
            while doc.len() + 1 < len && self.rng.random::<f64>() < self.spec.neutral_rate {
                doc.sentences.push(self.sentence(None));
            }
            if doc.len() < len {
                doc.sentences
                    .push(self.sentence(Some((IT.to_string(), gender.pronoun().to_string()))));
            }
        }
        doc
    }
}

/// Distance back to the most recent sentence with a noun, if any.
pub fn antecedent_distance(sources: &[&str], index: usize) -> Option<usize> {
    (0..index)
        .rev()
        .find(|&j| sources[j].split(' ').any(is_noun))
        .map(|j| index - j)
}

pub fn is_noun(token: &str) -> bool {
    token.len() > 1 && token.starts_with('n') && token[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Contrastive examples for every pronoun sentence in `docs`.
pub fn contrastive_set(docs: &[Document], window: usize) -> Vec<ContrastiveExample> {
    let mut out = Vec::new();
    for doc in docs {
        let sources: Vec<&str> = doc.sources().collect();
        for (i, (src, tgt)) in doc.sentences.iter().enumerate() {
            if !src.split(' ').any(|t| t == IT) {
                continue;
            }
            let Some(distance) = antecedent_distance(&sources, i) else {
                continue;
            };
            let keep = window.max(distance).min(i);
            let swapped: Vec<&str> = tgt
                .split(' ')
                .map(|t| match t {
                    PRON_A => PRON_B,
                    PRON_B => PRON_A,
                    other => other,
                })
                .collect();
            out.push(ContrastiveExample {
                src_context: sources[i - keep..i].iter().map(|s| s.to_string()).collect(),
                src: src.clone(),
                correct: tgt.clone(),
                contrastive: vec![swapped.join(" ")],
                antecedent_distance: distance,
            });
        }
    }
    out
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut docs = |n: usize| (0..n).map(|_| g.document()).collect::<Vec<_>>();
    let train = docs(spec.train_docs);
    let valid = docs(spec.valid_docs);
    let test = docs(spec.test_docs);
    let contrastive = contrastive_set(&test, spec.context_window);
    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        contrastive,
    })
}

/// Counts of `(PRON_A, PRON_B)` in the targets of `docs`.
pub fn pronoun_census(docs: &[Document]) -> (usize, usize) {
    let mut counts = (0, 0);
    for tok in docs.iter().flat_map(|d| d.targets()).flat_map(|t| t.split(' ')) {
        match tok {
            PRON_A => counts.0 += 1,
            PRON_B => counts.1 += 1,
            _ => {}
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_docs: 50,
            valid_docs: 5,
            test_docs: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SyntheticSpec { seed: 7, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn alternating_structure() {
        let corpus = gen_synthetic(&small()).unwrap();
        for doc in &corpus.train {
            assert_eq!(doc.len(), 4);
            for (i, (src, tgt)) in doc.sentences.iter().enumerate() {
                let nouns = src.split(' ').filter(|t| is_noun(t)).count();
                let its = src.split(' ').filter(|&t| t == IT).count();
                assert_eq!((nouns, its), if i % 2 == 0 { (1, 0) } else { (0, 1) });
                assert_eq!(src.split(' ').count(), tgt.split(' ').count());
            }
        }
    }

    #[test]
    fn contrastive_pairs_differ_in_one_token() {
        let corpus = gen_synthetic(&small()).unwrap();
        assert!(!corpus.contrastive.is_empty());
        for ex in &corpus.contrastive {
            let a: Vec<&str> = ex.correct.split(' ').collect();
            let b: Vec<&str> = ex.contrastive[0].split(' ').collect();
            assert_eq!(a.len(), b.len());
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
            assert_eq!(ex.antecedent_distance, 1);
            ex.validate().unwrap();
        }
    }

    #[test]
    fn neutral_sentences_increase_distance() {
        let spec = SyntheticSpec {
            neutral_rate: 0.6,
            min_doc_len: 6,
            max_doc_len: 8,
            ..small()
        };
        let corpus = gen_synthetic(&spec).unwrap();
        assert!(corpus.contrastive.iter().any(|e| e.antecedent_distance > 1));
        for ex in &corpus.contrastive {
            ex.validate().unwrap();
        }
    }

    #[test]
    fn invalid_balance_rejected() {
        assert!(gen_synthetic(&SyntheticSpec { gender_balance: 1.0, ..small() }).is_err());
    }
}
