use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::vocab::RESERVED;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::shortening::{Activation, ShorteningConfig, ShorteningMode};
use crate::{Error, Result};

/// Architecture variant: the three baselines and the caching family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SentenceLevel,
    SingleEncoder,
    MultiEncoder,
    CachingTokens,
    CachingSentence,
    ShortMax,
    ShortAvg,
    ShortLinear,
    ShortGroup,
    ShortSelect,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::SentenceLevel,
        Variant::SingleEncoder,
        Variant::MultiEncoder,
        Variant::CachingTokens,
        Variant::CachingSentence,
        Variant::ShortMax,
        Variant::ShortAvg,
        Variant::ShortLinear,
        Variant::ShortGroup,
        Variant::ShortSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SentenceLevel => "sentence_level",
            Variant::SingleEncoder => "single_encoder",
            Variant::MultiEncoder => "multi_encoder",
            Variant::CachingTokens => "caching_tokens",
            Variant::CachingSentence => "caching_sentence",
            Variant::ShortMax => "short_max",
            Variant::ShortAvg => "short_avg",
            Variant::ShortLinear => "short_linear",
            Variant::ShortGroup => "short_group",
            Variant::ShortSelect => "short_select",
        }
    }

    /// Variants that cache per-sentence encoder states.
    pub fn is_caching(self) -> bool {
        self.shortening_mode().is_some()
    }

    pub fn shortening_mode(self) -> Option<ShorteningMode> {
        match self {
            Variant::CachingTokens => Some(ShorteningMode::Tokens),
            Variant::CachingSentence => Some(ShorteningMode::Sentence),
            Variant::ShortMax => Some(ShorteningMode::MaxPool),
            Variant::ShortAvg => Some(ShorteningMode::MeanPool),
            Variant::ShortLinear => Some(ShorteningMode::LinearPool),
            Variant::ShortGroup => Some(ShorteningMode::Group),
            Variant::ShortSelect => Some(ShorteningMode::Select),
            _ => None,
        }
    }

    /// Aggregating and shortening variants also attend to their own
    /// shortened current sentence.
    pub fn includes_current(self) -> bool {
        self.is_caching() && self != Variant::CachingTokens
    }

    pub fn default_integration(self) -> Integration {
        match self {
            Variant::SentenceLevel | Variant::SingleEncoder | Variant::MultiEncoder => {
                Integration::Concat
            }
            Variant::CachingSentence => Integration::ParallelGated,
            _ => Integration::Serial,
        }
    }

    pub fn default_k(self) -> usize {
        match self {
            Variant::ShortMax | Variant::ShortAvg | Variant::ShortLinear => 2,
            Variant::ShortGroup => 9,
            Variant::ShortSelect => 10,
            _ => 1,
        }
    }

    /// Number of newest context sentences whose encoder pass receives
    /// gradient.
    pub fn default_grad_flow(self) -> usize {
        match self {
            Variant::ShortGroup => 2,
            Variant::ShortSelect => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

/// How the decoder consumes context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Context keys/values are prepended to the encoder output in
    /// cross-attention.
    Concat,
    /// Self-attention, cross-attention, then a separate context-attention.
    Serial,
    /// Cross- and context-attention on the same input, summed.
    Parallel,
    /// As `Parallel`, with a sigmoid gate on the context branch.
    ParallelGated,
}

impl Integration {
    pub const ALL: [Integration; 4] = [
        Integration::Concat,
        Integration::Serial,
        Integration::Parallel,
        Integration::ParallelGated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Integration::Concat => "concat",
            Integration::Serial => "serial",
            Integration::Parallel => "parallel",
            Integration::ParallelGated => "parallel_gated",
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown integration `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PaperBase,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_base" => Ok(Preset::PaperBase),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::InvalidConfig(format!("unknown preset `{s}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::PaperBase => "paper_base",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub integration: Integration,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_positions: usize,
    /// Number of previous sentences used as context.
    pub context_size: usize,
    /// Number of newest context sentences whose encoder pass gets gradient.
    pub grad_flow: usize,
    pub shortening: ShorteningConfig,
    pub positions: PositionEncoding,
    pub preset: Preset,
    pub seed: u64,
}

impl ModelConfig {
    /// Configuration for `variant` with the dimensions of `preset` and the
    /// per-variant defaults for integration, `k` and gradient flow.
    pub fn new(preset: Preset, variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (layers, heads, model_dim, ffn_dim, dropout, max_positions) = match preset {
            Preset::PaperBase => (6, 8, 512, 2048, 0.3, 1024),
            Preset::Desk => (2, 4, 64, 128, 0.1, 128),
        };
        let mode = variant.shortening_mode().unwrap_or(ShorteningMode::Tokens);
        let shortening = ShorteningConfig {
            mode,
            k: variant.default_k(),
            activation: Activation::Sparsemax,
            categorizer_hidden: 512,
        };
        Self {
            variant,
            integration: variant.default_integration(),
            layers,
            heads,
            model_dim,
            ffn_dim,
            dropout,
            src_vocab,
            tgt_vocab,
            max_positions,
            context_size: 1,
            grad_flow: variant.default_grad_flow().min(1),
            shortening,
            positions: PositionEncoding::Learned,
            preset,
            seed: 42,
        }
    }

    /// Sets the context size, capping the gradient-flow depth to it.
    pub fn with_context(mut self, context_size: usize) -> Self {
        self.context_size = context_size;
        self.grad_flow = self.variant.default_grad_flow().min(context_size);
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.shortening.k = k;
        self
    }

    /// Whether the current sentence's shortened states join the context.
    /// Without any context sentences the model is a sentence-level model.
    pub fn includes_current(&self) -> bool {
        self.variant.includes_current() && self.context_size > 0
    }

    /// Whether decoder layers carry a separate context-attention module.
    pub fn has_context_attention(&self) -> bool {
        let uses_context = self.variant.is_caching() || self.variant == Variant::MultiEncoder;
        uses_context && self.integration != Integration::Concat
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return fail("ffn dim and max positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.src_vocab <= RESERVED || self.tgt_vocab <= RESERVED {
            return fail("vocabularies must be larger than the reserved symbols".into());
        }
        if self.grad_flow > self.context_size {
            return fail(format!(
                "gradient flow depth {} exceeds context size {}",
                self.grad_flow, self.context_size
            ));
        }
        if self.variant == Variant::SingleEncoder && self.integration != Integration::Concat {
            return fail("the single-encoder baseline only supports concat integration".into());
        }
        if let Some(mode) = self.variant.shortening_mode() {
            if mode != self.shortening.mode {
                return fail(format!(
                    "variant {} implies {} shortening, found {}",
                    self.variant, mode, self.shortening.mode
                ));
            }
            self.shortening.validate()?;
        }
        Ok(())
    }

    /// Exact number of trainable scalars of a model built from this config.
    pub fn count_parameters(&self) -> usize {
        let d = self.model_dim;
        let learned = self.positions == PositionEncoding::Learned;
        let pos = if learned { self.max_positions * d } else { 0 };
        let embeddings = self.src_vocab * d + self.tgt_vocab * d + 2 * pos;
        let attn = MultiHeadAttention::param_count(d);
        let ffn = FeedForward::param_count(d, self.ffn_dim);
        let ln = LayerNorm::param_count(d);
        let encoder_layer = attn + ffn + 2 * ln;
        let mut decoder_layer = 2 * attn + ffn + 3 * ln;
        if self.has_context_attention() {
            decoder_layer += attn;
            match self.integration {
                Integration::Serial => decoder_layer += ln,
                Integration::ParallelGated => decoder_layer += Linear::param_count(d, 1),
                _ => {}
            }
        }
        let encoders = if self.variant == Variant::MultiEncoder { 2 } else { 1 };
        let mut total = embeddings + self.layers * (encoders * encoder_layer + decoder_layer);
        if self.variant.is_caching() {
            total += (self.context_size + 1) * d + pos + self.shortening.param_count(d);
        }
        total
    }
}

/// Exact parameter count for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    cfg.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(variant: Variant) -> ModelConfig {
        ModelConfig::new(Preset::Desk, variant, 100, 120)
    }

    #[test]
    fn defaults_follow_selected_architectures() {
        assert_eq!(desk(Variant::CachingSentence).integration, Integration::ParallelGated);
        assert_eq!(desk(Variant::ShortGroup).integration, Integration::Serial);
        assert_eq!(desk(Variant::ShortGroup).shortening.k, 9);
        assert_eq!(desk(Variant::ShortSelect).shortening.k, 10);
        assert_eq!(desk(Variant::ShortAvg).shortening.k, 2);
        let group = desk(Variant::ShortGroup).with_context(3);
        assert_eq!(group.grad_flow, 2);
        assert_eq!(desk(Variant::ShortSelect).with_context(3).grad_flow, 1);
        assert_eq!(desk(Variant::CachingTokens).with_context(3).grad_flow, 0);
    }

    #[test]
    fn validation_errors() {
        assert!(desk(Variant::ShortGroup).with_k(0).validate().is_err());
        let mut c = desk(Variant::SingleEncoder);
        c.integration = Integration::Serial;
        assert!(c.validate().is_err());
        let mut c = desk(Variant::CachingTokens);
        c.grad_flow = 2;
        assert!(c.validate().is_err());
        for v in Variant::ALL {
            desk(v).validate().unwrap();
        }
    }

    #[test]
    fn parameter_count_relations() {
        let count = |v: Variant| desk(v).count_parameters();
        assert_eq!(count(Variant::SentenceLevel), count(Variant::SingleEncoder));
        assert!(count(Variant::MultiEncoder) > count(Variant::CachingTokens));
        assert!(count(Variant::CachingTokens) > count(Variant::SentenceLevel));
        let d = 64;
        let k = 2;
        assert_eq!(count(Variant::ShortLinear) - count(Variant::ShortAvg), k * d * d + d);
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        for i in Integration::ALL {
            assert_eq!(i.as_str().parse::<Integration>().unwrap(), i);
        }
        assert!("short_median".parse::<Variant>().is_err());
    }
}
