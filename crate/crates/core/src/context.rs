//! Per-document cache of shortened sentence states and assembly of the
//! context that the decoder attends to.
//!
//! Entries are stored oldest first. The entry pushed last sits at distance
//! 1, the one before at distance 2, and so on. The current sentence, when it
//! is part of the context, has distance 0. Assembled context lists blocks
//! newest first, each tagged with its distance as segment id and with
//! positions restarting at 0 inside every block.

use std::collections::VecDeque;

use candle_core::{DType, Tensor};

use crate::model::config::PositionEncoding;
use crate::nn::{self, Embedding, ParamStore};
use crate::shortening::ShortenedStates;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ContextEntry {
    pub states: ShortenedStates,
    /// Index of the sentence within its document.
    pub sentence_index: usize,
    /// Whether gradient flow into the producing encoder pass was cut.
    pub detached: bool,
}

impl ContextEntry {
    pub fn new(states: ShortenedStates, sentence_index: usize) -> Self {
        Self {
            states,
            sentence_index,
            detached: false,
        }
    }
}

/// Bounded FIFO of the `capacity` most recent sentences of a document.
#[derive(Clone, Debug)]
pub struct ContextCache {
    capacity: usize,
    entries: VecDeque<ContextEntry>,
}

impl ContextCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the newest entry, evicting the oldest beyond capacity.
    /// Sentence indices must increase and model dimensions must agree.
    pub fn push(&mut self, entry: ContextEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.sentence_index <= last.sentence_index {
                return Err(Error::InvalidState(format!(
                    "sentence {} pushed after sentence {}",
                    entry.sentence_index, last.sentence_index
                )));
            }
            if entry.states.model_dim() != last.states.model_dim() {
                return Err(Error::InvalidState("cached states differ in model dim".into()));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Clears the cache at a document boundary.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &ContextEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    /// `(distance, entry)` pairs, newest first.
    pub fn by_distance(&self) -> impl Iterator<Item = (usize, &ContextEntry)> {
        self.entries.iter().rev().enumerate().map(|(i, e)| (i + 1, e))
    }

    /// Number of context vectors stored over all entries.
    pub fn stored_vectors(&self) -> usize {
        self.entries.iter().map(|e| e.states.len()).sum()
    }
}

/// Whether the encoder pass of the context sentence at `distance` receives
/// gradient when `grad_flow` newest sentences are trained through.
pub fn gradient_flows(distance: usize, grad_flow: usize) -> bool {
    distance <= grad_flow
}

/// Detaches every entry farther than `grad_flow` sentences.
pub fn apply_grad_policy(cache: &mut ContextCache, grad_flow: usize) {
    let n = cache.entries.len();
    for (i, entry) in cache.entries.iter_mut().enumerate() {
        let distance = n - i;
        if !gradient_flows(distance, grad_flow) && !entry.detached {
            entry.states = entry.states.detached();
            entry.detached = true;
        }
    }
}

/// Segment and position embeddings added to context blocks.
#[derive(Clone)]
pub struct ContextEmbeddings {
    segments: Embedding,
    positions: Positions,
}

#[derive(Clone)]
enum Positions {
    Learned(Embedding),
    Fixed(Tensor),
}

impl ContextEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        context_size: usize,
        max_positions: usize,
        dim: usize,
        encoding: PositionEncoding,
    ) -> Result<Self> {
        let segments = Embedding::new(store, &format!("{prefix}.segment"), context_size + 1, dim)?;
        let positions = match encoding {
            PositionEncoding::Learned => Positions::Learned(Embedding::new(
                store,
                &format!("{prefix}.position"),
                max_positions,
                dim,
            )?),
            PositionEncoding::Sinusoidal => {
                Positions::Fixed(nn::sinusoidal_table(max_positions, dim, store.dtype())?)
            }
        };
        Ok(Self {
            segments,
            positions,
        })
    }

    pub fn max_segment(&self) -> usize {
        self.segments.rows() - 1
    }

    fn position_prefix(&self, len: usize) -> Result<Tensor> {
        match &self.positions {
            Positions::Learned(e) => e.prefix(len),
            Positions::Fixed(t) => {
                let max = t.dim(0)?;
                if len > max {
                    return Err(Error::Truncation { len, max });
                }
                Ok(t.narrow(0, 0, len)?)
            }
        }
    }

    /// Adds segment `segment` and positions `0..L` to `(B, L, d)` states.
    pub fn embed_block(&self, states: &Tensor, segment: usize) -> Result<Tensor> {
        if segment > self.max_segment() {
            return Err(Error::InvalidInput(format!(
                "segment {segment} exceeds context size {}",
                self.max_segment()
            )));
        }
        let len = states.dim(1)?;
        let seg = self.segments.row(segment)?.unsqueeze(0)?;
        let pos = self.position_prefix(len)?.unsqueeze(0)?;
        Ok(states.broadcast_add(&seg)?.broadcast_add(&pos)?)
    }
}

/// Context vectors of one sentence with their bookkeeping ids.
#[derive(Clone, Debug)]
pub struct ContextAssembly {
    /// `(N, d)` embedded context vectors, `None` when there is no context.
    pub tokens: Option<Tensor>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
}

impl ContextAssembly {
    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }
}

/// Concatenates the optional current block (segment 0) and the cached
/// entries, newest first, adding segment and position embeddings.
pub fn build_context(
    cache: &ContextCache,
    current: Option<&ShortenedStates>,
    embeddings: &ContextEmbeddings,
) -> Result<ContextAssembly> {
    let mut blocks = Vec::new();
    let mut segment_ids = Vec::new();
    let mut position_ids = Vec::new();
    let mut add = |states: &ShortenedStates, segment: usize| -> Result<()> {
        let t = states.tensor().unsqueeze(0)?;
        blocks.push(embeddings.embed_block(&t, segment)?.squeeze(0)?);
        segment_ids.extend(std::iter::repeat_n(segment, states.len()));
        position_ids.extend(0..states.len());
        Ok(())
    };
    if let Some(cur) = current {
        add(cur, 0)?;
    }
    for (distance, entry) in cache.by_distance() {
        add(&entry.states, distance)?;
    }
    let tokens = if blocks.is_empty() {
        None
    } else {
        Some(Tensor::cat(&blocks, 0)?)
    };
    Ok(ContextAssembly {
        tokens,
        segment_ids,
        position_ids,
    })
}

/// A `(1, N)` all-ones mask for an assembled context.
pub fn full_mask(n: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::ones((1, n), dtype, &candle_core::Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shortening::ShorteningMode;
    use candle_core::Device;

    fn states(value: f64, rows: usize) -> ShortenedStates {
        let t = Tensor::full(value, (rows, 2), &Device::Cpu).unwrap();
        ShortenedStates::new(t, rows, ShorteningMode::Tokens).unwrap()
    }

    #[test]
    fn evicts_oldest_and_orders_by_distance() {
        let mut cache = ContextCache::new(2);
        for i in 0..3 {
            cache.push(ContextEntry::new(states(i as f64, 1), i)).unwrap();
        }
        let seen: Vec<(usize, usize)> = cache
            .by_distance()
            .map(|(d, e)| (d, e.sentence_index))
            .collect();
        assert_eq!(seen, vec![(1, 2), (2, 1)]);
        assert!(cache.push(ContextEntry::new(states(0.0, 1), 1)).is_err());
        cache.reset();
        assert!(cache.is_empty());
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut cache = ContextCache::new(0);
        cache.push(ContextEntry::new(states(1.0, 3), 0)).unwrap();
        assert!(cache.is_empty());
    }

    #[test]
    fn assembly_segments_and_positions() {
        let mut store = ParamStore::new(DType::F64, 1);
        let emb =
            ContextEmbeddings::new(&mut store, "context", 2, 8, 2, PositionEncoding::Learned)
                .unwrap();
        let mut cache = ContextCache::new(2);
        cache.push(ContextEntry::new(states(1.0, 2), 0)).unwrap();
        cache.push(ContextEntry::new(states(2.0, 3), 1)).unwrap();
        let cur = states(0.0, 1);
        let a = build_context(&cache, Some(&cur), &emb).unwrap();
        assert_eq!(a.segment_ids, vec![0, 1, 1, 1, 2, 2]);
        assert_eq!(a.position_ids, vec![0, 0, 1, 2, 0, 1]);
        assert_eq!(a.tokens.unwrap().dims(), &[6, 2]);
        let empty = build_context(&ContextCache::new(2), None, &emb).unwrap();
        assert!(empty.tokens.is_none());
    }

    #[test]
    fn grad_policy_detaches_far_entries() {
        let mut cache = ContextCache::new(3);
        for i in 0..3 {
            cache.push(ContextEntry::new(states(1.0, 1), i)).unwrap();
        }
        apply_grad_policy(&mut cache, 1);
        let flags: Vec<(usize, bool)> = cache.by_distance().map(|(d, e)| (d, e.detached)).collect();
        assert_eq!(flags, vec![(1, false), (2, true), (3, true)]);
    }
}
