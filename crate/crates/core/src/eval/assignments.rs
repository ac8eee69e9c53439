//! Export of token-to-group weights for plotting.
//!
//! Text format: a first line `#mode<TAB>group` or `#mode<TAB>select`, a
//! header `token<TAB>g0<TAB>g1...`, then one line per source token holding
//! the token and its `K` weights. Weights are written in shortest
//! round-trip decimal form, so parsing recovers them exactly.

use std::fmt::Write as _;

use crate::data::Vocabulary;
use crate::model::{Model, Variant};
use crate::shortening::{CategorizationMatrix, NormalizationAxis};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentExport {
    pub tokens: Vec<String>,
    /// `tokens.len() x K`.
    pub weights: Vec<Vec<f64>>,
    pub axis: NormalizationAxis,
}

impl AssignmentExport {
    pub fn mode_name(&self) -> &'static str {
        match self.axis {
            NormalizationAxis::Groups => "group",
            NormalizationAxis::Sequence => "select",
        }
    }

    pub fn to_tsv(&self) -> String {
        let k = self.weights.first().map_or(0, Vec::len);
        let mut out = format!("#mode\t{}\ntoken", self.mode_name());
        for g in 0..k {
            let _ = write!(out, "\tg{g}");
        }
        out.push('\n');
        for (tok, row) in self.tokens.iter().zip(&self.weights) {
            out.push_str(tok);
            for w in row {
                let _ = write!(out, "\t{w}");
            }
            out.push('\n');
        }
        out
    }

    /// Largest deviation of the normalized sums from 1 and whether all
    /// weights lie in `[0, 1]`.
    pub fn check(&self) -> Result<(f64, bool)> {
        let dtype = candle_core::DType::F64;
        CategorizationMatrix::from_rows(&self.weights, self.axis, dtype)?.check()
    }

    /// Number of exactly-zero weights.
    pub fn zeros(&self) -> usize {
        self.weights.iter().flatten().filter(|&&w| w == 0.0).count()
    }
}

pub fn parse_assignments(text: &str) -> Result<AssignmentExport> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    let axis = match lines.next() {
        Some((_, "#mode\tgroup")) => NormalizationAxis::Groups,
        Some((_, "#mode\tselect")) => NormalizationAxis::Sequence,
        _ => return Err(bad(0, "expected `#mode<TAB>group|select`")),
    };
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let k = header.split('\t').count().saturating_sub(1);
    if !header.starts_with("token") || k == 0 {
        return Err(bad(1, "header must be `token` followed by group columns"));
    }
    let mut tokens = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        tokens.push(fields.next().unwrap_or_default().to_string());
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(i, "weight is not a number")))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != k {
            return Err(bad(i, "wrong number of weights"));
        }
        weights.push(row);
    }
    Ok(AssignmentExport { tokens, weights, axis })
}

/// Categorization of a source sentence by a latent grouping or selecting
/// model. The matrix depends only on the sentence itself.
pub fn export_assignments(model: &Model, src_vocab: &Vocabulary, src: &str) -> Result<AssignmentExport> {
    let variant = model.config().variant;
    if !matches!(variant, Variant::ShortGroup | Variant::ShortSelect) {
        return Err(Error::InvalidConfig(format!(
            "assignment export needs short_group or short_select, not {variant}"
        )));
    }
    let shortener = model.shortener().expect("shortening variant");
    let axis = shortener.axis().expect("latent mode");
    let tokens: Vec<String> = src.split_whitespace().map(str::to_string).collect();
    let h = model.encode(&src_vocab.encode(src))?;
    let c = shortener.categorize(&h, axis)?;
    Ok(AssignmentExport {
        tokens,
        weights: c.to_rows()?,
        axis,
    })
}
