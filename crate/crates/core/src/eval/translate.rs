use candle_core::{DType, Tensor};

use crate::data::vocab::{BOS, BRK, EOS, PAD};
use crate::model::{Memory, Model, Prepared};
use crate::nn;
use crate::{Error, Result};

/// How previous sentences reach the model during document translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// Reuse stored states of earlier sentences.
    Cached,
    /// Re-encode earlier sentences from their tokens for every sentence.
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output length limit `a * source_len + b`, capped by the model.
    pub max_len_a: f64,
    pub max_len_b: usize,
    pub context: ContextMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len_a: 1.5,
            max_len_b: 10,
            context: ContextMode::Cached,
        }
    }
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// A model bound to one encoded sentence.
pub struct BoundModel<'a> {
    pub model: &'a Model,
    pub memory: &'a Memory,
}

impl StepScorer for BoundModel<'_> {
    /// Padding, start and break symbols never occur in targets and are
    /// excluded from the search.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut lps = last_log_probs(&self.model.decode_logits(self.memory, prefixes)?)?;
        for lp in &mut lps {
            for id in [PAD, BOS, BRK] {
                lp[id as usize] = f64::NEG_INFINITY;
            }
        }
        Ok(lps)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Returns the tokens (without markers) and their total
/// log-probability, end symbol included when produced.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize) -> Result<(Vec<u32>, f64)> {
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&prefix))?;
        let tok = argmax(&lp[0]);
        score += lp[0][tok];
        if tok as u32 == EOS {
            break;
        }
        prefix.push(tok as u32);
    }
    prefix.remove(0);
    Ok((prefix, score))
}

/// Beam search ranking finished hypotheses by log-probability divided by
/// their length (end symbol included).
pub fn beam_search(scorer: &dyn StepScorer, beam: usize, max_len: usize) -> Result<(Vec<u32>, f64)> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam size must be positive".into()));
    }
    if beam == 1 {
        return greedy(scorer, max_len);
    }
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<u32>, f64, f64)> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, lp) in lps.iter().enumerate() {
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(2 * beam) {
                candidates.push((alive[h].1 + lp[tok], h, tok as u32));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, (score, h, tok)) in candidates.into_iter().enumerate() {
            // An end symbol only finishes a hypothesis when it ranks among
            // the top `beam` candidates of this step.
            if tok == EOS {
                if rank >= beam {
                    continue;
                }
                let tokens = alive[h].0[1..].to_vec();
                let len = (tokens.len() + 1) as f64;
                finished.push((tokens, score, score / len));
            } else if next.len() < beam {
                let mut p = alive[h].0.clone();
                p.push(tok);
                next.push((p, score));
            }
            if next.len() == beam && finished.len() >= beam {
                break;
            }
        }
        if finished.len() >= beam || next.is_empty() {
            break;
        }
        alive = next;
        if step + 1 == max_len {
            for (p, score) in &alive {
                let tokens = p[1..].to_vec();
                let len = tokens.len().max(1) as f64;
                finished.push((tokens, *score, score / len));
            }
        }
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.2.total_cmp(&b.2).then(j.cmp(i)))
        .map(|(_, f)| (f.0, f.1))
        .unwrap_or_default();
    Ok(best)
}

pub fn max_len(model: &Model, src_len: usize, cfg: &DecodeConfig) -> usize {
    let wanted = (cfg.max_len_a * src_len as f64).ceil() as usize + cfg.max_len_b;
    wanted.min(model.config().max_positions.saturating_sub(1)).max(1)
}

/// One translated sentence with the encoding it was decoded against.
pub struct TranslatedSentence {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub prepared: Prepared,
}

/// Translates the sentences of one document in order, carrying context
/// from sentence to sentence; context starts empty.
pub fn translate_document_traced(
    model: &Model,
    sources: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<TranslatedSentence>> {
    let mut doc = model.new_document();
    let mut out = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let prepared = match cfg.context {
            ContextMode::Cached => model.prepare(src, &doc)?,
            ContextMode::Fresh => {
                let previous: Vec<Vec<u32>> = sources[..i].iter().rev().cloned().collect();
                model.prepare_fresh(src, &previous)?
            }
        };
        let bound = BoundModel {
            model,
            memory: &prepared.memory,
        };
        let (tokens, score) = beam_search(&bound, cfg.beam, max_len(model, src.len(), cfg))?;
        if cfg.context == ContextMode::Cached {
            model.commit(&mut doc, src, &prepared)?;
        }
        out.push(TranslatedSentence {
            tokens,
            score,
            prepared,
        });
    }
    Ok(out)
}

pub fn translate_document(model: &Model, sources: &[Vec<u32>], cfg: &DecodeConfig) -> Result<Vec<Vec<u32>>> {
    Ok(translate_document_traced(model, sources, cfg)?
        .into_iter()
        .map(|t| t.tokens)
        .collect())
}

/// Greedy-path log-probabilities under a fixed table, for tests and toy
/// models: row `t` of `table` is the distribution after `t` tokens.
pub struct TableScorer {
    pub table: Vec<Vec<f64>>,
}

impl StepScorer for TableScorer {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let row = &self.table[(p.len() - 1).min(self.table.len() - 1)];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

/// Log-softmax of the last position of `(n, T, V)` logits.
pub fn last_log_probs(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = logits.dim(1)?;
    let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
    Ok(nn::log_softmax(&last)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
