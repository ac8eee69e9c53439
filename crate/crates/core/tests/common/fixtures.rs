//! Hand-built evaluation fixtures shared by the eval tests and the
//! acceptance run.

use cachemt::data::synthetic::{is_noun, PRON_A, PRON_B};
use cachemt::data::ContrastiveExample;
use cachemt::eval::translate::translate_document_traced;
use cachemt::eval::{ContextMode, DecodeConfig, Scorer};
use cachemt::model::Model;
use cachemt::Result;

/// Scores a candidate as the sum of per-token log-probabilities of a fixed
/// table: the pronoun agreeing with the latest noun's gender gets 0.9, the
/// other 0.1, and every other token 0.5.
pub struct HandSetScorer {
    pub nouns: usize,
}

impl Scorer for HandSetScorer {
    fn score_candidates(&self, context: &[String], _src: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let agreeing = context.iter().rev().find_map(|s| {
            s.split(' ').find(|t| is_noun(t)).map(|t| {
                let i: usize = t[1..].parse().unwrap();
                if i < self.nouns / 2 { PRON_A } else { PRON_B }
            })
        });
        Ok(candidates
            .iter()
            .map(|c| {
                c.split(' ')
                    .map(|t| match t {
                        PRON_A | PRON_B if Some(t) == agreeing => 0.9f64.ln(),
                        PRON_A | PRON_B => 0.1f64.ln(),
                        _ => 0.5f64.ln(),
                    })
                    .sum()
            })
            .collect())
    }
}

/// Every candidate gets the same score.
pub struct TieScorer;

impl Scorer for TieScorer {
    fn score_candidates(&self, _: &[String], _: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        Ok(vec![-2.5; candidates.len()])
    }
}

/// Prefers the reference exactly when the source contains `hit`.
pub struct MarkerScorer;

impl Scorer for MarkerScorer {
    fn score_candidates(&self, _: &[String], src: &str, candidates: &[&str]) -> Result<Vec<f64>> {
        let hit = src.split(' ').any(|t| t == "hit");
        Ok((0..candidates.len())
            .map(|i| match (i, hit) {
                (0, true) => 0.0,
                (0, false) => -3.0,
                _ => -1.0,
            })
            .collect())
    }
}

/// Ten examples as `(antecedent distance, scorer prefers the reference)`.
pub const BUCKET_FIXTURE: [(usize, bool); 10] = [
    (0, true),
    (1, true),
    (1, false),
    (1, true),
    (2, false),
    (3, true),
    (3, true),
    (4, false),
    (6, true),
    (9, false),
];

/// Expected `(bucket, total, correct)` counted by hand from the fixture.
pub const BUCKET_EXPECTED: [(&str, usize, usize); 5] =
    [("0", 1, 1), ("1", 3, 2), ("2", 1, 0), ("3", 2, 2), (">3", 3, 1)];

pub fn bucket_examples() -> Vec<ContrastiveExample> {
    BUCKET_FIXTURE
        .iter()
        .map(|&(d, hit)| ContrastiveExample {
            src_context: vec!["s1".to_string(); d],
            src: if hit { "IT hit".into() } else { "IT miss".into() },
            correct: "PRON_A".into(),
            contrastive: vec!["PRON_B".into()],
            antecedent_distance: d,
        })
        .collect()
}

/// Translates `docs` with cached and with re-encoded context. Returns
/// whether all outputs agree and the largest logit difference along the
/// decoded paths.
pub fn cache_vs_fresh(model: &Model, docs: &[Vec<Vec<u32>>], beam: usize) -> Result<(bool, f64)> {
    let cfg = |context| DecodeConfig {
        beam,
        max_len_a: 1.0,
        max_len_b: 4,
        context,
    };
    let mut same = true;
    let mut worst = 0.0f64;
    for doc in docs {
        let cached = translate_document_traced(model, doc, &cfg(ContextMode::Cached))?;
        let fresh = translate_document_traced(model, doc, &cfg(ContextMode::Fresh))?;
        for (a, b) in cached.iter().zip(&fresh) {
            same &= a.tokens == b.tokens;
            let mut prefix = vec![cachemt::data::vocab::BOS];
            prefix.extend(&a.tokens);
            let la = model.decode_logits(&a.prepared.memory, std::slice::from_ref(&prefix))?;
            let lb = model.decode_logits(&b.prepared.memory, std::slice::from_ref(&prefix))?;
            let diff = (la - lb)?.abs()?.flatten_all()?.max(0)?;
            worst = worst.max(diff.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
        }
    }
    Ok((same, worst))
}
