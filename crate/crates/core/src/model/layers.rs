use candle_core::{Tensor, D};

use super::config::Integration;
use crate::nn::{self, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::Result;

#[derive(Clone)]
struct EncoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Post-norm transformer encoder stack.
#[derive(Clone)]
pub struct Encoder {
    name: String,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                Ok(EncoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), dim, heads)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dim, ffn)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    /// Encodes embedded `(B, M, d)` inputs; `mask` is `(B, M)`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, fwd: &mut Fwd) -> Result<Tensor> {
        let bias = nn::key_bias(mask)?;
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = format!("{}.{i}.self", self.name);
            let a = layer.self_attn.forward(&x, &x, Some(&bias), fwd, &tag)?;
            x = layer.norm1.forward(&(x + fwd.dropout(&a)?)?)?;
            let f = layer.ffn.forward(&x)?;
            x = layer.norm2.forward(&(x + fwd.dropout(&f)?)?)?;
        }
        Ok(x)
    }
}

/// Scales the context-attention output by `sigmoid(w . h + b)` per
/// position.
pub fn context_gate(h_hat: &Tensor, gate: &Linear) -> Result<Tensor> {
    let lambda = nn::sigmoid(&gate.forward(h_hat)?)?;
    Ok(h_hat.broadcast_mul(&lambda)?)
}

#[derive(Clone)]
struct ContextBranch {
    attn: MultiHeadAttention,
    norm: Option<LayerNorm>,
    gate: Option<Linear>,
}

#[derive(Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    ctx: Option<ContextBranch>,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
}

/// Context seen by the decoder's context-attention.
pub struct ContextMemory {
    pub states: Tensor,
    pub bias: Tensor,
    /// `(B, 1, 1)`: 1 where the example has any context.
    pub has: Tensor,
}

impl ContextMemory {
    pub fn new(states: Tensor, mask: &Tensor) -> Result<Self> {
        let b = mask.dim(0)?;
        let has = mask
            .sum_keepdim(D::Minus1)?
            .gt(0.0)?
            .to_dtype(mask.dtype())?
            .reshape((b, 1, 1))?;
        Ok(Self {
            states,
            bias: nn::key_bias(mask)?,
            has,
        })
    }
}

#[derive(Clone)]
pub struct Decoder {
    integration: Integration,
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        integration: Integration,
        context_attention: bool,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                let self_attn = MultiHeadAttention::new(store, &format!("{p}.self_attn"), dim, heads)?;
                let norm_self = LayerNorm::new(store, &format!("{p}.norm_self"), dim)?;
                let cross_attn = MultiHeadAttention::new(store, &format!("{p}.cross_attn"), dim, heads)?;
                let norm_cross = LayerNorm::new(store, &format!("{p}.norm_cross"), dim)?;
                let ctx = if context_attention {
                    let attn = MultiHeadAttention::new(store, &format!("{p}.ctx_attn"), dim, heads)?;
                    let norm = match integration {
                        Integration::Serial => {
                            Some(LayerNorm::new(store, &format!("{p}.norm_ctx"), dim)?)
                        }
                        _ => None,
                    };
                    let gate = match integration {
                        Integration::ParallelGated => {
                            Some(Linear::new(store, &format!("{p}.ctx_gate"), dim, 1)?)
                        }
                        _ => None,
                    };
                    Some(ContextBranch { attn, norm, gate })
                } else {
                    None
                };
                Ok(DecoderLayer {
                    self_attn,
                    norm_self,
                    cross_attn,
                    norm_cross,
                    ctx,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), dim, ffn)?,
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            integration,
            layers,
        })
    }

    /// Runs the stack over embedded `(B, T, d)` target prefixes.
    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        memory_mask: &Tensor,
        ctx: Option<&ContextMemory>,
        fwd: &mut Fwd,
    ) -> Result<Tensor> {
        let t = x.dim(1)?;
        let causal = nn::causal_bias(t, x.dtype())?;
        let mem_bias = nn::key_bias(memory_mask)?;
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = |kind: &str| format!("decoder.{i}.{kind}");
            let a = layer.self_attn.forward(&x, &x, Some(&causal), fwd, &tag("self"))?;
            x = layer.norm_self.forward(&(x + fwd.dropout(&a)?)?)?;
            let branch = layer.ctx.as_ref().zip(ctx);
            match (self.integration, branch) {
                (Integration::Parallel | Integration::ParallelGated, Some((br, c))) => {
                    let cross = layer.cross_attn.forward(&x, memory, Some(&mem_bias), fwd, &tag("cross"))?;
                    let mut h = br.attn.forward(&x, &c.states, Some(&c.bias), fwd, &tag("ctx"))?;
                    if let Some(gate) = &br.gate {
                        h = context_gate(&h, gate)?;
                    }
                    let sum = (cross + h.broadcast_mul(&c.has)?)?;
                    x = layer.norm_cross.forward(&(x + fwd.dropout(&sum)?)?)?;
                }
                (_, branch) => {
                    let cross = layer.cross_attn.forward(&x, memory, Some(&mem_bias), fwd, &tag("cross"))?;
                    x = layer.norm_cross.forward(&(x + fwd.dropout(&cross)?)?)?;
                    if let Some((br, c)) = branch {
                        let h = br.attn.forward(&x, &c.states, Some(&c.bias), fwd, &tag("ctx"))?;
                        let y = match &br.norm {
                            Some(norm) => norm.forward(&(&x + fwd.dropout(&h)?)?)?,
                            None => (&x + fwd.dropout(&h)?)?,
                        };
                        let keep = c.has.affine(-1.0, 1.0)?;
                        x = (y.broadcast_mul(&c.has)? + x.broadcast_mul(&keep)?)?;
                    }
                }
            }
            let f = layer.ffn.forward(&x)?;
            x = layer.norm_ffn.forward(&(x + fwd.dropout(&f)?)?)?;
        }
        Ok(x)
    }
}
