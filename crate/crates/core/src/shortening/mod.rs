//! Sequence shortening of encoder outputs.
//!
//! A shortener maps the `M x d` hidden states of one sentence to a shorter
//! `K' x d` representation that is cached and attended to as context:
//!
//! | mode          | output tokens | pipeline                                   |
//! |---------------|---------------|--------------------------------------------|
//! | `tokens`      | `M`           | identity                                   |
//! | `sentence`    | `1`           | mean over tokens                           |
//! | `*_pool`      | `ceil(M / K)` | pool windows of `K` tokens, then refine    |
//! | `group`       | `K`           | categorize over groups, aggregate, refine  |
//! | `select`      | `K`           | categorize over tokens, aggregate, refine  |
//!
//! Refinement lets the shortened tokens attend back to the full sequence:
//! `G = LayerNorm(G~ + Attn(G~, H, H))`.
//!
//! The batched functions take `(B, M, d)` states with a `(B, M)` 1/0 mask;
//! padded tokens never contribute to pooled values, normalizations or
//! refinement keys.

mod sparsemax;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{self, Fwd, LayerNorm, Linear, MultiHeadAttention, ParamStore, MASK_BIAS};
use crate::{Error, Result};

pub use sparsemax::{sparsemax, sparsemax_last_dim};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShorteningMode {
    MeanPool,
    MaxPool,
    LinearPool,
    Group,
    Select,
    Sentence,
    Tokens,
}

impl ShorteningMode {
    pub const ALL: [ShorteningMode; 7] = [
        ShorteningMode::MeanPool,
        ShorteningMode::MaxPool,
        ShorteningMode::LinearPool,
        ShorteningMode::Group,
        ShorteningMode::Select,
        ShorteningMode::Sentence,
        ShorteningMode::Tokens,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShorteningMode::MeanPool => "mean_pool",
            ShorteningMode::MaxPool => "max_pool",
            ShorteningMode::LinearPool => "linear_pool",
            ShorteningMode::Group => "group",
            ShorteningMode::Select => "select",
            ShorteningMode::Sentence => "sentence",
            ShorteningMode::Tokens => "tokens",
        }
    }

    pub fn is_pooling(self) -> bool {
        matches!(
            self,
            ShorteningMode::MeanPool | ShorteningMode::MaxPool | ShorteningMode::LinearPool
        )
    }

    pub fn is_latent(self) -> bool {
        matches!(self, ShorteningMode::Group | ShorteningMode::Select)
    }

    pub fn uses_k(self) -> bool {
        self.is_pooling() || self.is_latent()
    }

    /// Number of output tokens for an input of `m` tokens.
    pub fn output_len(self, m: usize, k: usize) -> usize {
        match self {
            ShorteningMode::Tokens => m,
            ShorteningMode::Sentence => 1,
            ShorteningMode::Group | ShorteningMode::Select => k,
            _ => m.div_ceil(k),
        }
    }
}

impl fmt::Display for ShorteningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShorteningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shortening mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softmax,
    Sparsemax,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Activation::Softmax),
            "sparsemax" => Ok(Activation::Sparsemax),
            _ => Err(Error::InvalidConfig(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softmax => "softmax",
            Activation::Sparsemax => "sparsemax",
        })
    }
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Softmax => nn::softmax(x),
            Activation::Sparsemax => sparsemax_last_dim(x),
        }
    }
}

/// Which dimension of the categorization is normalized: each token over the
/// groups (grouping) or each group over the tokens (selecting).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationAxis {
    Groups,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShorteningConfig {
    pub mode: ShorteningMode,
    /// Pooling window or number of groups.
    pub k: usize,
    pub activation: Activation,
    pub categorizer_hidden: usize,
}

impl ShorteningConfig {
    pub fn new(mode: ShorteningMode, k: usize) -> Self {
        Self {
            mode,
            k,
            activation: Activation::Sparsemax,
            categorizer_hidden: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_k() && self.k < 1 {
            return Err(Error::InvalidConfig(format!(
                "{} shortening needs k >= 1, got {}",
                self.mode, self.k
            )));
        }
        if self.mode.is_latent() && self.categorizer_hidden < 1 {
            return Err(Error::InvalidConfig(
                "categorizer needs at least one hidden unit".into(),
            ));
        }
        Ok(())
    }

    pub fn output_len(&self, m: usize) -> usize {
        self.mode.output_len(m, self.k)
    }

    /// Number of trainable parameters of a shortener for model dim `d`.
    pub fn param_count(&self, d: usize) -> usize {
        let refine = MultiHeadAttention::param_count(d) + LayerNorm::param_count(d);
        match self.mode {
            ShorteningMode::Tokens | ShorteningMode::Sentence => 0,
            ShorteningMode::MeanPool | ShorteningMode::MaxPool => refine,
            ShorteningMode::LinearPool => refine + Linear::param_count(self.k * d, d),
            ShorteningMode::Group | ShorteningMode::Select => {
                refine
                    + Linear::param_count(d, self.categorizer_hidden)
                    + Linear::param_count(self.categorizer_hidden, self.k)
            }
        }
    }
}

/// Encoder output of one sentence, `M x d`.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    tokens: Tensor,
}

impl HiddenStates {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (m, _) = tokens
            .dims2()
            .map_err(|_| Error::InvalidInput(format!("hidden states must be M x d, got {:?}", tokens.dims())))?;
        if m == 0 {
            return Err(Error::InvalidInput("hidden states need at least one token".into()));
        }
        if nn::to_f64_vec(&tokens)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("hidden states contain non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn from_rows(rows: &[Vec<f64>], dtype: DType) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged hidden-state rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.tokens.to_dtype(DType::F64)?.to_vec2()?)
    }

    fn batched(&self) -> Result<(Tensor, Tensor)> {
        let mask = Tensor::ones((1, self.len()), self.tokens.dtype(), &Device::Cpu)?;
        Ok((self.tokens.unsqueeze(0)?, mask))
    }
}

/// Shortened representation of one sentence, `K' x d`.
#[derive(Clone, Debug)]
pub struct ShortenedStates {
    tokens: Tensor,
    origin_length: usize,
    mode: ShorteningMode,
}

impl ShortenedStates {
    pub fn new(tokens: Tensor, origin_length: usize, mode: ShorteningMode) -> Result<Self> {
        tokens.dims2()?;
        Ok(Self {
            tokens,
            origin_length,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn mode(&self) -> ShorteningMode {
        self.mode
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.tokens.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// The same states with gradient flow cut.
    pub fn detached(&self) -> Self {
        Self {
            tokens: self.tokens.detach(),
            ..self.clone()
        }
    }
}

/// Token-to-group weights, `M x K`.
#[derive(Clone, Debug)]
pub struct CategorizationMatrix {
    weights: Tensor,
    axis: NormalizationAxis,
}

impl CategorizationMatrix {
    pub fn new(weights: Tensor, axis: NormalizationAxis) -> Result<Self> {
        weights.dims2()?;
        Ok(Self { weights, axis })
    }

    pub fn from_rows(rows: &[Vec<f64>], axis: NormalizationAxis, dtype: DType) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            Tensor::from_vec(flat, (rows.len(), k), &Device::Cpu)?.to_dtype(dtype)?,
            axis,
        )
    }

    pub fn axis(&self) -> NormalizationAxis {
        self.axis
    }

    pub fn tokens(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn groups(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.weights.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Largest deviation of the normalized sums from one, and whether every
    /// entry lies in `[0, 1]`.
    pub fn check(&self) -> Result<(f64, bool)> {
        let rows = self.to_rows()?;
        let in_range = rows.iter().flatten().all(|&w| (0.0..=1.0).contains(&w));
        let sums: Vec<f64> = match self.axis {
            NormalizationAxis::Groups => rows.iter().map(|r| r.iter().sum()).collect(),
            NormalizationAxis::Sequence => (0..self.groups())
                .map(|k| rows.iter().map(|r| r[k]).sum())
                .collect(),
        };
        let dev = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        Ok((dev, in_range))
    }
}

/// Pools non-overlapping windows of `k` tokens of `(B, M, d)` states.
///
/// Returns `(B, ceil(M / k), d)` pooled states and their `(B, ceil(M / k))`
/// mask. Mean and max pooling use only the valid tokens of the (possibly
/// shorter) final window; linear pooling zero-pads it to `k * d` inputs.
pub fn pool_batch(
    h: &Tensor,
    mask: &Tensor,
    k: usize,
    mode: ShorteningMode,
    linear: Option<&Linear>,
) -> Result<(Tensor, Tensor)> {
    if k < 1 {
        return Err(Error::InvalidConfig("pooling window must be >= 1".into()));
    }
    let (b, m, d) = h.dims3()?;
    let groups = m.div_ceil(k);
    let pad = groups * k - m;
    let (mut h, mut mask) = (h.clone(), mask.clone());
    if pad > 0 {
        h = Tensor::cat(&[&h, &Tensor::zeros((b, pad, d), h.dtype(), h.device())?], 1)?;
        mask = Tensor::cat(&[&mask, &Tensor::zeros((b, pad), mask.dtype(), mask.device())?], 1)?;
    }
    let tok_mask = mask.reshape((b, groups, k, 1))?;
    let windows = h.reshape((b, groups, k, d))?.broadcast_mul(&tok_mask)?;
    let count = tok_mask.sum(2)?; // (B, G, 1)
    let group_mask = count.gt(0.0)?.to_dtype(h.dtype())?;
    let pooled = match mode {
        ShorteningMode::MeanPool => windows.sum(2)?.broadcast_div(&count.maximum(1.0)?)?,
        ShorteningMode::MaxPool => {
            let hidden = tok_mask.affine(-MASK_BIAS, MASK_BIAS)?;
            windows
                .broadcast_add(&hidden)?
                .max(2)?
                .broadcast_mul(&group_mask)?
        }
        ShorteningMode::LinearPool => {
            let linear = linear.ok_or_else(|| {
                Error::InvalidConfig("linear pooling requires pooling weights".into())
            })?;
            linear.forward(&windows.reshape((b, groups, k * d))?)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "{other} is not a pooling mode"
            )))
        }
    };
    Ok((pooled, group_mask.squeeze(2)?))
}

/// Mean over the valid tokens: `(B, M, d)` to `(B, 1, d)`.
pub fn masked_mean(h: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m3 = mask.unsqueeze(2)?;
    let sum = h.broadcast_mul(&m3)?.sum_keepdim(1)?;
    Ok(sum.broadcast_div(&m3.sum_keepdim(1)?.maximum(1.0)?)?)
}

/// `G~ = C^T H` for `(B, M, K)` categorizations and `(B, M, d)` states.
pub fn group_aggregate_batch(c: &Tensor, h: &Tensor) -> Result<Tensor> {
    Ok(c.transpose(1, 2)?.contiguous()?.matmul(&h.contiguous()?)?)
}

/// `g~_k = sum_i c_{i,k} h_i` for one sentence.
pub fn group_aggregate(h: &HiddenStates, c: &CategorizationMatrix) -> Result<ShortenedStates> {
    if c.tokens() != h.len() {
        return Err(Error::InvalidInput(format!(
            "categorization covers {} tokens but the sentence has {}",
            c.tokens(),
            h.len()
        )));
    }
    let g = c.tensor().t()?.contiguous()?.matmul(h.tensor())?;
    let mode = match c.axis() {
        NormalizationAxis::Groups => ShorteningMode::Group,
        NormalizationAxis::Sequence => ShorteningMode::Select,
    };
    ShortenedStates::new(g, h.len(), mode)
}

/// Averages all tokens of a sentence into a single vector.
pub fn aggregate_sentence(h: &HiddenStates) -> Result<ShortenedStates> {
    let (hb, mask) = h.batched()?;
    ShortenedStates::new(masked_mean(&hb, &mask)?.squeeze(0)?, h.len(), ShorteningMode::Sentence)
}

/// Pooling-based shortening of one sentence without refinement.
pub fn pool_shorten(
    h: &HiddenStates,
    k: usize,
    mode: ShorteningMode,
    linear: Option<&Linear>,
) -> Result<ShortenedStates> {
    let (hb, mask) = h.batched()?;
    let (g, _) = pool_batch(&hb, &mask, k, mode, linear)?;
    ShortenedStates::new(g.squeeze(0)?, h.len(), mode)
}

#[derive(Clone)]
struct Categorizer {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone)]
struct Refiner {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

/// Shortening module with its learned parameters (pooling map, categorizer,
/// refinement attention), as needed by its mode.
#[derive(Clone)]
pub struct Shortener {
    config: ShorteningConfig,
    linear_pool: Option<Linear>,
    categorizer: Option<Categorizer>,
    refiner: Option<Refiner>,
}

impl Shortener {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: ShorteningConfig,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mode = config.mode;
        let linear_pool = if mode == ShorteningMode::LinearPool {
            Some(Linear::new(store, &format!("{prefix}.linear_pool"), config.k * dim, dim)?)
        } else {
            None
        };
        let categorizer = if mode.is_latent() {
            Some(Categorizer {
                hidden: Linear::new(
                    store,
                    &format!("{prefix}.categorizer.hidden"),
                    dim,
                    config.categorizer_hidden,
                )?,
                out: Linear::new(
                    store,
                    &format!("{prefix}.categorizer.out"),
                    config.categorizer_hidden,
                    config.k,
                )?,
            })
        } else {
            None
        };
        let refiner = if mode.is_pooling() || mode.is_latent() {
            Some(Refiner {
                attn: MultiHeadAttention::new(store, &format!("{prefix}.refine.attn"), dim, heads)?,
                norm: LayerNorm::new(store, &format!("{prefix}.refine.norm"), dim)?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            linear_pool,
            categorizer,
            refiner,
        })
    }

    pub fn config(&self) -> &ShorteningConfig {
        &self.config
    }

    pub fn mode(&self) -> ShorteningMode {
        self.config.mode
    }

    pub fn linear_pool(&self) -> Option<&Linear> {
        self.linear_pool.as_ref()
    }

    pub fn refine_attention(&self) -> Option<&MultiHeadAttention> {
        self.refiner.as_ref().map(|r| &r.attn)
    }

    pub fn axis(&self) -> Option<NormalizationAxis> {
        match self.config.mode {
            ShorteningMode::Group => Some(NormalizationAxis::Groups),
            ShorteningMode::Select => Some(NormalizationAxis::Sequence),
            _ => None,
        }
    }

    /// `(B, M, K)` categorizations of `(B, M, d)` states. Padded tokens get
    /// zero weight under both axes.
    pub fn categorize_batch(
        &self,
        h: &Tensor,
        mask: &Tensor,
        axis: NormalizationAxis,
    ) -> Result<Tensor> {
        let cat = self.categorizer.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} shortening has no categorizer", self.mode()))
        })?;
        let logits = cat.out.forward(&cat.hidden.forward(h)?.relu()?)?;
        match axis {
            NormalizationAxis::Groups => Ok(self
                .config
                .activation
                .apply(&logits)?
                .broadcast_mul(&mask.unsqueeze(2)?)?),
            NormalizationAxis::Sequence => {
                let (b, m) = mask.dims2()?;
                let hidden = mask.affine(-MASK_BIAS, MASK_BIAS)?.reshape((b, 1, m))?;
                let per_group = logits.transpose(1, 2)?.contiguous()?.broadcast_add(&hidden)?;
                let weights = self.config.activation.apply(&per_group)?;
                Ok(weights.transpose(1, 2)?.contiguous()?)
            }
        }
    }

    pub fn categorize(
        &self,
        h: &HiddenStates,
        axis: NormalizationAxis,
    ) -> Result<CategorizationMatrix> {
        let (hb, mask) = h.batched()?;
        CategorizationMatrix::new(self.categorize_batch(&hb, &mask, axis)?.squeeze(0)?, axis)
    }

    /// `LayerNorm(G~ + Attn(G~, H, H))` with padded tokens of `H` masked out.
    pub fn refine_batch(
        &self,
        g: &Tensor,
        h: &Tensor,
        mask: &Tensor,
        fwd: &mut Fwd,
    ) -> Result<Tensor> {
        let refiner = self.refiner.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} shortening has no refinement", self.mode()))
        })?;
        let bias = nn::key_bias(mask)?;
        let attended = refiner.attn.forward(g, h, Some(&bias), fwd, "refine")?;
        let attended = fwd.dropout(&attended)?;
        refiner.norm.forward(&(g + attended)?)
    }

    pub fn refine(&self, g: &ShortenedStates, h: &HiddenStates) -> Result<ShortenedStates> {
        if g.model_dim() != h.model_dim() {
            return Err(Error::InvalidInput("refine: model dimensions differ".into()));
        }
        let (hb, mask) = h.batched()?;
        let out = self.refine_batch(&g.tensor().unsqueeze(0)?, &hb, &mask, &mut Fwd::eval())?;
        ShortenedStates::new(out.squeeze(0)?, g.origin_length(), g.mode())
    }

    /// Shortens `(B, M, d)` states; returns the shortened states and their
    /// `(B, K')` mask.
    pub fn forward_batch(&self, h: &Tensor, mask: &Tensor, fwd: &mut Fwd) -> Result<(Tensor, Tensor)> {
        let mode = self.config.mode;
        match mode {
            ShorteningMode::Tokens => Ok((h.clone(), mask.clone())),
            ShorteningMode::Sentence => {
                let b = h.dim(0)?;
                let valid = mask.sum_keepdim(1)?.gt(0.0)?.to_dtype(mask.dtype())?;
                Ok((masked_mean(h, mask)?, valid.reshape((b, 1))?))
            }
            ShorteningMode::MeanPool | ShorteningMode::MaxPool | ShorteningMode::LinearPool => {
                let (g, gmask) = pool_batch(h, mask, self.config.k, mode, self.linear_pool.as_ref())?;
                Ok((self.refine_batch(&g, h, mask, fwd)?, gmask))
            }
            ShorteningMode::Group | ShorteningMode::Select => {
                let axis = self.axis().expect("latent mode");
                let c = self.categorize_batch(h, mask, axis)?;
                let g = group_aggregate_batch(&c, h)?;
                let (b, _) = mask.dims2()?;
                let valid = mask.sum_keepdim(1)?.gt(0.0)?.to_dtype(mask.dtype())?;
                let gmask = valid.broadcast_as((b, self.config.k))?.contiguous()?;
                Ok((self.refine_batch(&g, h, mask, fwd)?, gmask))
            }
        }
    }

    /// Shortens one sentence in evaluation mode.
    pub fn shorten(&self, h: &HiddenStates) -> Result<ShortenedStates> {
        let (hb, mask) = h.batched()?;
        let (g, _) = self.forward_batch(&hb, &mask, &mut Fwd::eval())?;
        ShortenedStates::new(g.squeeze(0)?, h.len(), self.mode())
    }

    pub fn pool_shorten(&self, h: &HiddenStates) -> Result<ShortenedStates> {
        pool_shorten(h, self.config.k, self.mode(), self.linear_pool.as_ref())
    }
}
