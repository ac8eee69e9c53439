use candle_core::{DType, Device, Tensor};

use crate::data::vocab::{BOS, EOS, PAD};
use crate::{Error, Result};

/// One training or scoring example: raw token ids without sentence markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    /// Previous source sentences of the same document, newest first.
    pub context: Vec<Vec<u32>>,
}

/// Right-padded id matrix with its 1/0 mask.
#[derive(Clone, Debug)]
pub struct Padded {
    /// `(B, L)` u32 ids.
    pub ids: Tensor,
    /// `(B, L)` mask in the model dtype.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new(seqs: &[Vec<u32>], dtype: DType) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::InvalidInput("batch of empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
            mask.extend(std::iter::repeat_n(1f64, s.len()));
            mask.extend(std::iter::repeat_n(0f64, width - s.len()));
        }
        let shape = (seqs.len(), width);
        Ok(Self {
            ids: Tensor::from_vec(ids, shape, &Device::Cpu)?,
            mask: Tensor::from_vec(mask, shape, &Device::Cpu)?.to_dtype(dtype)?,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.ids.dims()[1]
    }
}

pub fn with_eos(ids: &[u32]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.push(EOS);
    v
}

pub fn with_bos(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(BOS);
    v.extend_from_slice(ids);
    v
}

/// Tensors for a batch of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Source ids.
    pub src: Padded,
    /// `BOS y`.
    pub tgt_in: Padded,
    /// `y EOS`.
    pub tgt_out: Padded,
    /// `context[j - 1][b]`: raw ids of the context sentence at distance `j`
    /// for example `b`, if the document has one.
    pub context: Vec<Vec<Option<Vec<u32>>>>,
    pub target_tokens: usize,
}

impl Batch {
    pub fn new(examples: &[&Example], context_size: usize, dtype: DType) -> Result<Self> {
        let src: Vec<Vec<u32>> = examples.iter().map(|e| e.src.clone()).collect();
        let tgt_in: Vec<Vec<u32>> = examples.iter().map(|e| with_bos(&e.tgt)).collect();
        let tgt_out: Vec<Vec<u32>> = examples.iter().map(|e| with_eos(&e.tgt)).collect();
        let context = (0..context_size)
            .map(|j| examples.iter().map(|e| e.context.get(j).cloned()).collect())
            .collect();
        let target_tokens = tgt_out.iter().map(Vec::len).sum();
        Ok(Self {
            src: Padded::new(&src, dtype)?,
            tgt_in: Padded::new(&tgt_in, dtype)?,
            tgt_out: Padded::new(&tgt_out, dtype)?,
            context,
            target_tokens,
        })
    }

    pub fn size(&self) -> usize {
        self.src.lengths.len()
    }
}
