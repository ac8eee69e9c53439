use candle_core::{DType, D};
use serde::{Deserialize, Serialize};

use crate::data::{ContrastiveExample, Vocabulary};
use crate::model::{Batch, Example, Model};
use crate::nn::{self, Fwd};
use crate::{Error, Result};

/// Natural-log probabilities of each example's target (end symbol
/// included), computed in one padded batch.
pub fn score_examples(model: &Model, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.iter().any(|e| e.tgt.is_empty() || e.src.is_empty()) {
        return Err(Error::InvalidInput("source and target must be non-empty".into()));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::new(&refs, model.config().context_size, model.dtype())?;
    let logits = model.forward(&batch, &mut Fwd::eval())?;
    let lp = nn::log_softmax(&logits)?;
    let picked = lp
        .gather(&batch.tgt_out.ids.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?
        .squeeze(D::Minus1)?
        .mul(&batch.tgt_out.mask)?
        .to_dtype(DType::F64)?;
    Ok(picked.sum(1)?.to_vec1::<f64>()?)
}

/// `sum_t log P(y_t | y_<t, x, ctx)` including the end symbol.
/// `context` lists previous source sentences, newest first.
pub fn score_sequence(model: &Model, src: &[u32], context: &[Vec<u32>], tgt: &[u32]) -> Result<f64> {
    let ex = Example {
        src: src.to_vec(),
        tgt: tgt.to_vec(),
        context: context.to_vec(),
    };
    Ok(score_examples(model, &[ex])?[0])
}

/// Anything that can rank candidate translations.
pub trait Scorer {
    /// Scores of `candidates` as translations of `src`, given previous
    /// source sentences `context` (oldest first).
    fn score_candidates(&self, context: &[String], src: &str, candidates: &[&str]) -> Result<Vec<f64>>;
}

pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

impl Scorer for ModelScorer<'_> {
    fn score_candidates(&self, context: &[String], src: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let c = self.model.config().context_size;
        let ctx: Vec<Vec<u32>> = context.iter().rev().take(c).map(|s| self.src_vocab.encode(s)).collect();
        let src = self.src_vocab.encode(src);
        let examples: Vec<Example> = candidates
            .iter()
            .map(|t| Example {
                src: src.clone(),
                tgt: self.tgt_vocab.encode(t),
                context: ctx.clone(),
            })
            .collect();
        score_examples(self.model, &examples)
    }
}

pub const BUCKETS: [&str; 5] = ["0", "1", "2", "3", ">3"];

pub fn bucket_of(distance: usize) -> usize {
    distance.min(4)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub bucket: String,
    pub total: usize,
    pub correct: usize,
}

impl BucketStats {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub by_distance: Vec<BucketStats>,
    /// Per-example outcome, in input order.
    pub outcomes: Vec<bool>,
}

/// An example counts as correct only when the reference scores strictly
/// higher than every contrastive candidate.
pub fn contrastive_eval(scorer: &dyn Scorer, examples: &[ContrastiveExample]) -> Result<ContrastiveReport> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("contrastive set is empty".into()));
    }
    let mut by_distance: Vec<BucketStats> = BUCKETS
        .iter()
        .map(|b| BucketStats {
            bucket: b.to_string(),
            ..Default::default()
        })
        .collect();
    let mut outcomes = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut candidates = vec![ex.correct.as_str()];
        candidates.extend(ex.contrastive.iter().map(String::as_str));
        let scores = scorer.score_candidates(&ex.src_context, &ex.src, &candidates)?;
        let ok = scores[1..].iter().all(|&s| scores[0] > s);
        let b = &mut by_distance[bucket_of(ex.antecedent_distance)];
        b.total += 1;
        b.correct += usize::from(ok);
        outcomes.push(ok);
    }
    let correct = outcomes.iter().filter(|&&o| o).count();
    Ok(ContrastiveReport {
        accuracy: correct as f64 / examples.len() as f64,
        total: examples.len(),
        correct,
        by_distance,
        outcomes,
    })
}
