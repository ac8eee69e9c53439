//! Parameter storage and the transformer building blocks shared by every
//! model variant.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Additive bias used for masked attention scores; `exp` of it underflows to
/// exactly zero in both f32 and f64.
pub const MASK_BIAS: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named, ordered trainable parameters.
///
/// Every parameter draws its initial values from a generator seeded by the
/// store seed and the parameter name, so two models built from the same seed
/// share identical values for every parameter name they have in common.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    seed: u64,
    params: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Uniform values in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let mut rng = self.rng_for(name);
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter value.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite the value of a parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::InvalidInput(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in snapshot {
            self.assign(name, t)?;
        }
        Ok(())
    }
}

/// Per-call forward state: training flag, dropout randomness and optional
/// attention-map recording.
pub struct Fwd {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
    record: bool,
    maps: Vec<(String, Tensor)>,
}

impl Fwd {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            record: false,
            maps: Vec::new(),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            record: false,
            maps: Vec::new(),
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_maps(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.maps)
    }

    fn record_map(&mut self, tag: &str, probs: &Tensor) {
        if self.record {
            self.maps.push((tag.to_string(), probs.detach()));
        }
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `(B, Tk)` 1/0 key mask to an additive `(B, 1, 1, Tk)` attention bias.
pub fn key_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, tk) = mask.dims2()?;
    Ok(mask.affine(-MASK_BIAS, MASK_BIAS)?.reshape((b, 1, 1, tk))?)
}

/// Additive `(1, 1, T, T)` bias hiding future positions.
pub fn causal_bias(t: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { MASK_BIAS } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, t, t), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[input, output], bound)?;
        let bias = store.constant(&format!("{name}.bias"), &[output], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[input, output], bound)?;
        Ok(Self { weight, bias: None })
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / input;
        let flat = x.reshape((rows, input))?;
        let mut y = flat.matmul(self.weight.as_tensor())?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dims()[1];
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize(x)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Zero-mean, unit-variance normalization over the last dimension.
pub fn normalize(x: &Tensor) -> Result<Tensor> {
    let dim = *x.dims().last().expect("non-scalar input") as f64;
    let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
    Ok(centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?)
}

#[derive(Clone)]
pub struct Embedding {
    table: Var,
    dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        let bound = 3f64.sqrt() / (dim as f64).sqrt();
        let table = store.uniform(&format!("{name}.table"), &[rows, dim], bound)?;
        Ok(Self { table, dim })
    }

    pub fn table(&self) -> &Var {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    /// Looks up `(B, T)` ids, returning `(B, T, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let rows = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(rows.reshape((b, t, self.dim))?)
    }

    /// Rows `0..len` as a `(len, dim)` matrix.
    pub fn prefix(&self, len: usize) -> Result<Tensor> {
        if len > self.rows() {
            return Err(Error::Truncation {
                len,
                max: self.rows(),
            });
        }
        Ok(self.table.narrow(0, 0, len)?)
    }

    pub fn row(&self, index: usize) -> Result<Tensor> {
        Ok(self.table.narrow(0, index, 1)?)
    }
}

/// Fixed sinusoidal position table.
pub fn sinusoidal_table(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            values[pos * dim + i] = (pos as f64 * freq).sin();
            values[pos * dim + half + i] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(values, (len, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    pub fn output_projection(&self) -> &Linear {
        &self.o
    }

    /// Scaled dot-product attention of `query (B, Tq, d)` over
    /// `memory (B, Tk, d)`. `bias` is added to the `(B, H, Tq, Tk)` scores.
    pub fn forward(
        &self,
        query: &Tensor,
        memory: &Tensor,
        bias: Option<&Tensor>,
        fwd: &mut Fwd,
        tag: &str,
    ) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = memory.dim(1)?;
        let hd = d / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, tq)?;
        let k = split(self.k.forward(memory)?, tk)?;
        let v = split(self.v.forward(memory)?, tk)?;
        let mut scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = softmax(&scores)?;
        fwd.record_map(tag, &probs);
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.o.forward(&ctx)
    }
}

#[derive(Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Values of a tensor as `f64`, flattened.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
