//! Encoder-decoder model covering the sentence-level, single-encoder and
//! multi-encoder baselines and the caching variants.

pub mod batch;
pub mod checkpoint;
pub mod config;
mod layers;

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};

pub use batch::{Batch, Example, Padded};
pub use config::{count_parameters, Integration, ModelConfig, PositionEncoding, Preset, Variant};
pub use layers::context_gate;

use crate::context::{self, ContextCache, ContextEmbeddings, ContextEntry};
use crate::data::vocab::{BRK, EOS};
use crate::nn::{self, Embedding, Fwd, ParamStore};
use crate::shortening::{HiddenStates, ShortenedStates, Shortener};
use crate::{Error, Result};
use layers::{ContextMemory, Decoder, Encoder};

#[derive(Clone)]
enum Positions {
    Learned(Embedding),
    Fixed(Tensor),
}

impl Positions {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.positions {
            PositionEncoding::Learned => {
                Positions::Learned(Embedding::new(store, name, cfg.max_positions, cfg.model_dim)?)
            }
            PositionEncoding::Sinusoidal => Positions::Fixed(nn::sinusoidal_table(
                cfg.max_positions,
                cfg.model_dim,
                store.dtype(),
            )?),
        })
    }

    fn prefix(&self, len: usize) -> Result<Tensor> {
        match self {
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
}

/// Encoder-side inputs to the decoder.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `(B, M, d)` source encoding.
    pub src: Tensor,
    /// `(B, M)`.
    pub src_mask: Tensor,
    /// `(B, N, d)` context vectors and their `(B, N)` mask.
    pub ctx: Option<(Tensor, Tensor)>,
}

impl Memory {
    /// Repeats a single-example memory `n` times along the batch.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let idx = Tensor::from_vec(vec![0u32; n], n, &Device::Cpu)?;
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&idx, 0)?) };
        Ok(Self {
            src: pick(&self.src)?,
            src_mask: pick(&self.src_mask)?,
            ctx: match &self.ctx {
                Some((c, m)) => Some((pick(c)?, pick(m)?)),
                None => None,
            },
        })
    }

    /// Number of context vectors per example.
    pub fn context_len(&self) -> usize {
        self.ctx.as_ref().map_or(0, |(c, _)| c.dims()[1])
    }
}

/// Document state carried across sentences at inference time.
#[derive(Clone, Debug)]
pub struct DocumentState {
    cache: ContextCache,
    history: VecDeque<Vec<u32>>,
    next_index: usize,
}

impl DocumentState {
    pub fn cache(&self) -> &ContextCache {
        &self.cache
    }

    /// Previous raw source sentences, oldest first (baselines only).
    pub fn history(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.history.iter()
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    pub fn reset(&mut self) {
        self.cache.reset();
        self.history.clear();
        self.next_index = 0;
    }
}

/// A sentence encoded for decoding, plus what it contributes to the cache.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub memory: Memory,
    pub current: Option<ShortenedStates>,
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    src_embed: Embedding,
    tgt_embed: Embedding,
    src_pos: Positions,
    tgt_pos: Positions,
    encoder: Encoder,
    ctx_encoder: Option<Encoder>,
    decoder: Decoder,
    shortener: Option<Shortener>,
    ctx_embed: Option<ContextEmbeddings>,
}

impl Model {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut store = ParamStore::new(dtype, cfg.seed);
        let (d, h, f, l) = (cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.layers);
        let src_embed = Embedding::new(&mut store, "encoder.embed", cfg.src_vocab, d)?;
        let src_pos = Positions::new(&mut store, "encoder.position", cfg)?;
        let encoder = Encoder::new(&mut store, "encoder", l, d, h, f)?;
        let ctx_encoder = if cfg.variant == Variant::MultiEncoder {
            Some(Encoder::new(&mut store, "context_encoder", l, d, h, f)?)
        } else {
            None
        };
        let tgt_embed = Embedding::new(&mut store, "decoder.embed", cfg.tgt_vocab, d)?;
        let tgt_pos = Positions::new(&mut store, "decoder.position", cfg)?;
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            l,
            d,
            h,
            f,
            cfg.integration,
            cfg.has_context_attention(),
        )?;
        let (shortener, ctx_embed) = if cfg.variant.is_caching() {
            let s = Shortener::new(&mut store, "shortening", cfg.shortening.clone(), d, h)?;
            let e = ContextEmbeddings::new(
                &mut store,
                "context",
                cfg.context_size,
                cfg.max_positions,
                d,
                cfg.positions,
            )?;
            (Some(s), Some(e))
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store,
            src_embed,
            tgt_embed,
            src_pos,
            tgt_pos,
            encoder,
            ctx_encoder,
            decoder,
            shortener,
            ctx_embed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn shortener(&self) -> Option<&Shortener> {
        self.shortener.as_ref()
    }

    pub fn context_embeddings(&self) -> Option<&ContextEmbeddings> {
        self.ctx_embed.as_ref()
    }

    fn embed(&self, table: &Embedding, pos: &Positions, ids: &Tensor, fwd: &mut Fwd) -> Result<Tensor> {
        let t = ids.dim(1)?;
        let scale = (self.config.model_dim as f64).sqrt();
        let x = (table.forward(ids)? * scale)?.broadcast_add(&pos.prefix(t)?.unsqueeze(0)?)?;
        fwd.dropout(&x)
    }

    fn encode_padded(&self, encoder: &Encoder, seqs: &[Vec<u32>], fwd: &mut Fwd) -> Result<(Tensor, Tensor)> {
        let p = Padded::new(seqs, self.dtype())?;
        let x = self.embed(&self.src_embed, &self.src_pos, &p.ids, fwd)?;
        Ok((encoder.forward(&x, &p.mask, fwd)?, p.mask))
    }

    /// Source encoding of `(B, M)` ids.
    pub fn encode_batch(&self, ids: &Tensor, mask: &Tensor, fwd: &mut Fwd) -> Result<Tensor> {
        let x = self.embed(&self.src_embed, &self.src_pos, ids, fwd)?;
        self.encoder.forward(&x, mask, fwd)
    }

    /// Encoder states of one source sentence.
    pub fn encode(&self, src: &[u32]) -> Result<HiddenStates> {
        self.check_source(src.len())?;
        let (h, _) = self.encode_padded(&self.encoder, &[src.to_vec()], &mut Fwd::eval())?;
        HiddenStates::new(h.squeeze(0)?)
    }

    /// Input of the single-encoder baseline: context sentences oldest first,
    /// each followed by the break symbol, then the current sentence.
    fn concatenated(context_newest_first: &[&[u32]], src: &[u32]) -> Vec<u32> {
        let mut ids = Vec::new();
        for c in context_newest_first.iter().rev() {
            ids.extend_from_slice(c);
            ids.push(BRK);
        }
        ids.extend_from_slice(src);
        ids
    }

    /// Joint input of the multi-encoder context encoder: context sentences
    /// oldest first, separated by the break symbol.
    fn joined_context(context_newest_first: &[&[u32]]) -> Vec<u32> {
        let mut ids = Vec::new();
        for (i, c) in context_newest_first.iter().rev().enumerate() {
            if i > 0 {
                ids.push(BRK);
            }
            ids.extend_from_slice(c);
        }
        ids
    }

    /// Encoder-side memory for a training or scoring batch.
    pub fn prepare_batch(&self, batch: &Batch, fwd: &mut Fwd) -> Result<Memory> {
        let b = batch.size();
        let context_of = |i: usize| -> Vec<&[u32]> {
            batch
                .context
                .iter()
                .map_while(|col| col[i].as_deref())
                .collect()
        };
        match self.config.variant {
            Variant::SentenceLevel => Ok(Memory {
                src: self.encode_batch(&batch.src.ids, &batch.src.mask, fwd)?,
                src_mask: batch.src.mask.clone(),
                ctx: None,
            }),
            Variant::SingleEncoder => {
                let seqs: Vec<Vec<u32>> = (0..b)
                    .map(|i| {
                        let len = batch.src.lengths[i];
                        let raw = batch.src.ids.get(i)?.narrow(0, 0, len)?.to_vec1::<u32>()?;
                        Ok(Self::concatenated(&context_of(i), &raw))
                    })
                    .collect::<Result<_>>()?;
                let (src, src_mask) = self.encode_padded(&self.encoder, &seqs, fwd)?;
                Ok(Memory { src, src_mask, ctx: None })
            }
            Variant::MultiEncoder => {
                let src = self.encode_batch(&batch.src.ids, &batch.src.mask, fwd)?;
                let joined: Vec<Vec<u32>> = (0..b).map(|i| Self::joined_context(&context_of(i))).collect();
                let ctx = if joined.iter().all(Vec::is_empty) {
                    None
                } else {
                    let present: Vec<bool> = joined.iter().map(|j| !j.is_empty()).collect();
                    let seqs: Vec<Vec<u32>> = joined
                        .into_iter()
                        .map(|j| if j.is_empty() { vec![EOS] } else { j })
                        .collect();
                    let encoder = self.ctx_encoder.as_ref().expect("multi-encoder");
                    let (h, mask) = self.encode_padded(encoder, &seqs, fwd)?;
                    Some((h, self.mask_rows(&mask, &present)?))
                };
                Ok(Memory {
                    src,
                    src_mask: batch.src.mask.clone(),
                    ctx,
                })
            }
            _ => self.prepare_caching_batch(batch, fwd),
        }
    }

    fn mask_rows(&self, mask: &Tensor, present: &[bool]) -> Result<Tensor> {
        let keep: Vec<f64> = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let keep = Tensor::from_vec(keep, (present.len(), 1), &Device::Cpu)?.to_dtype(mask.dtype())?;
        Ok(mask.broadcast_mul(&keep)?)
    }

    fn prepare_caching_batch(&self, batch: &Batch, fwd: &mut Fwd) -> Result<Memory> {
        let shortener = self.shortener.as_ref().expect("caching variant");
        let embed = self.ctx_embed.as_ref().expect("caching variant");
        let src = self.encode_batch(&batch.src.ids, &batch.src.mask, fwd)?;
        let mut blocks = Vec::new();
        let mut masks = Vec::new();
        if self.config.includes_current() {
            let (g, gm) = shortener.forward_batch(&src, &batch.src.mask, fwd)?;
            blocks.push(embed.embed_block(&g, 0)?);
            masks.push(gm);
        }
        for (j, column) in batch.context.iter().enumerate().take(self.config.context_size) {
            let distance = j + 1;
            // A context sentence counts only if all nearer ones exist too.
            let present: Vec<bool> = (0..batch.size())
                .map(|i| batch.context[..=j].iter().all(|c| c[i].is_some()))
                .collect();
            if !present.iter().any(|&p| p) {
                break;
            }
            let seqs: Vec<Vec<u32>> = column
                .iter()
                .zip(&present)
                .map(|(c, &p)| match c {
                    Some(ids) if p => ids.clone(),
                    _ => vec![EOS],
                })
                .collect();
            let (mut h, mask) = self.encode_padded(&self.encoder, &seqs, fwd)?;
            if !context::gradient_flows(distance, self.config.grad_flow) {
                h = h.detach();
            }
            let (g, gm) = shortener.forward_batch(&h, &mask, fwd)?;
            blocks.push(embed.embed_block(&g, distance)?);
            masks.push(self.mask_rows(&gm, &present)?);
        }
        let ctx = if blocks.is_empty() {
            None
        } else {
            Some((Tensor::cat(&blocks, 1)?, Tensor::cat(&masks, 1)?))
        };
        Ok(Memory {
            src,
            src_mask: batch.src.mask.clone(),
            ctx,
        })
    }

    /// `(B, T, V)` next-token logits for `(B, T)` decoder inputs.
    pub fn decode(&self, tgt_in: &Tensor, memory: &Memory, fwd: &mut Fwd) -> Result<Tensor> {
        let x = self.embed(&self.tgt_embed, &self.tgt_pos, tgt_in, fwd)?;
        let x = match (&memory.ctx, self.config.has_context_attention()) {
            (Some((c, m)), true) => {
                let ctx = ContextMemory::new(c.clone(), m)?;
                self.decoder.forward(&x, &memory.src, &memory.src_mask, Some(&ctx), fwd)?
            }
            (Some((c, m)), false) => {
                let keys = Tensor::cat(&[c, &memory.src], 1)?;
                let mask = Tensor::cat(&[m, &memory.src_mask], 1)?;
                self.decoder.forward(&x, &keys, &mask, None, fwd)?
            }
            (None, _) => self.decoder.forward(&x, &memory.src, &memory.src_mask, None, fwd)?,
        };
        let (b, t, d) = x.dims3()?;
        let table = self.tgt_embed.table().as_tensor();
        let logits = x.reshape((b * t, d))?.matmul(&table.t()?)?;
        Ok(logits.reshape((b, t, table.dim(0)?))?)
    }

    /// Full teacher-forced forward pass: `(B, T, V)` logits.
    pub fn forward(&self, batch: &Batch, fwd: &mut Fwd) -> Result<Tensor> {
        let memory = self.prepare_batch(batch, fwd)?;
        self.decode(&batch.tgt_in.ids, &memory, fwd)
    }

    pub fn new_document(&self) -> DocumentState {
        DocumentState {
            cache: ContextCache::new(self.config.context_size),
            history: VecDeque::new(),
            next_index: 0,
        }
    }

    fn check_source(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Truncation {
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Encodes one sentence and, for caching variants, its shortened states.
    fn encode_current(&self, src: &[u32]) -> Result<(Tensor, Tensor, Option<ShortenedStates>)> {
        self.check_source(src.len())?;
        let mut fwd = Fwd::eval();
        let (h, mask) = self.encode_padded(&self.encoder, &[src.to_vec()], &mut fwd)?;
        let current = match &self.shortener {
            Some(s) => {
                let (g, _) = s.forward_batch(&h, &mask, &mut fwd)?;
                Some(ShortenedStates::new(g.squeeze(0)?, src.len(), s.mode())?)
            }
            None => None,
        };
        Ok((h, mask, current))
    }

    /// Encodes sentence `src` of a document whose earlier sentences have
    /// been committed to `doc`.
    pub fn prepare(&self, src: &[u32], doc: &DocumentState) -> Result<Prepared> {
        let dtype = self.dtype();
        let history: Vec<&[u32]> = doc.history.iter().rev().map(Vec::as_slice).collect();
        match self.config.variant {
            Variant::SentenceLevel => {
                let (h, mask, _) = self.encode_current(src)?;
                Ok(Prepared {
                    memory: Memory { src: h, src_mask: mask, ctx: None },
                    current: None,
                })
            }
            Variant::SingleEncoder => {
                let ids = Self::concatenated(&history, src);
                self.check_source(ids.len())?;
                let (h, mask) = self.encode_padded(&self.encoder, &[ids], &mut Fwd::eval())?;
                Ok(Prepared {
                    memory: Memory { src: h, src_mask: mask, ctx: None },
                    current: None,
                })
            }
            Variant::MultiEncoder => {
                let (h, mask, _) = self.encode_current(src)?;
                let joined = Self::joined_context(&history);
                let ctx = if joined.is_empty() {
                    None
                } else {
                    self.check_source(joined.len())?;
                    let encoder = self.ctx_encoder.as_ref().expect("multi-encoder");
                    Some(self.encode_padded(encoder, &[joined], &mut Fwd::eval())?)
                };
                Ok(Prepared {
                    memory: Memory { src: h, src_mask: mask, ctx },
                    current: None,
                })
            }
            _ => {
                let (h, mask, current) = self.encode_current(src)?;
                let embed = self.ctx_embed.as_ref().expect("caching variant");
                let own = if self.config.includes_current() { current.as_ref() } else { None };
                let assembly = context::build_context(&doc.cache, own, embed)?;
                let ctx = match assembly.tokens {
                    Some(t) => {
                        let n = t.dim(0)?;
                        Some((t.unsqueeze(0)?, context::full_mask(n, dtype)?))
                    }
                    None => None,
                };
                Ok(Prepared {
                    memory: Memory { src: h, src_mask: mask, ctx },
                    current,
                })
            }
        }
    }

    /// Records a translated sentence as context for the following ones.
    pub fn commit(&self, doc: &mut DocumentState, src: &[u32], prepared: &Prepared) -> Result<()> {
        if let Some(states) = &prepared.current {
            let mut entry = ContextEntry::new(states.detached(), doc.next_index);
            entry.detached = true;
            doc.cache.push(entry)?;
        } else if self.config.context_size > 0 {
            doc.history.push_back(src.to_vec());
            while doc.history.len() > self.config.context_size {
                doc.history.pop_front();
            }
        }
        doc.next_index += 1;
        Ok(())
    }

    /// Prepares `src` by re-encoding its previous sentences (newest first)
    /// from scratch instead of reading them from a cache.
    pub fn prepare_fresh(&self, src: &[u32], previous: &[Vec<u32>]) -> Result<Prepared> {
        let mut doc = self.new_document();
        let keep = previous.len().min(self.config.context_size);
        for sentence in previous[..keep].iter().rev() {
            let current = match &self.shortener {
                Some(_) => self.encode_current(sentence)?.2,
                None => None,
            };
            let p = Prepared {
                memory: Memory {
                    src: Tensor::zeros((1, 1, 1), self.dtype(), &Device::Cpu)?,
                    src_mask: Tensor::zeros((1, 1), self.dtype(), &Device::Cpu)?,
                    ctx: None,
                },
                current,
            };
            self.commit(&mut doc, sentence, &p)?;
        }
        self.prepare(src, &doc)
    }

    /// Logits for `n` equal-length decoder prefixes (each starting with
    /// BOS) against a single prepared sentence: `(n, T, V)`.
    pub fn decode_logits(&self, memory: &Memory, prefixes: &[Vec<u32>]) -> Result<Tensor> {
        let n = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if n == 0 || t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::InvalidInput("prefixes must be non-empty and of equal length".into()));
        }
        if t > self.config.max_positions {
            return Err(Error::Truncation {
                len: t,
                max: self.config.max_positions,
            });
        }
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (n, t), &Device::Cpu)?;
        let mem = if n == 1 { memory.clone() } else { memory.repeat(n)? };
        self.decode(&ids, &mem, &mut Fwd::eval())
    }

    /// Parameter values keyed by name.
    pub fn parameters(&self) -> Result<Vec<(String, Tensor)>> {
        self.store.snapshot()
    }

    pub fn load_parameters(&self, values: &[(String, Tensor)]) -> Result<()> {
        let expected = self.store.len();
        let known = values
            .iter()
            .filter(|(n, _)| self.store.get(n).is_some())
            .count();
        if known != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {known} of {expected} model parameters"
            )));
        }
        for (name, t) in values {
            if self.store.get(name).is_some() {
                self.store.assign(name, t)?;
            }
        }
        Ok(())
    }
}
