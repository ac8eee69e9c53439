//! Contrastive test sets as JSON lines.
//!
//! Each non-empty line is an object with the keys `src_context` (previous
//! source sentences, oldest first), `src`, `correct`, `contrastive` (one or
//! more alternative targets) and `antecedent_distance` (0 for
//! intra-sentential, otherwise how many sentences back the antecedent is).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveExample {
    pub src_context: Vec<String>,
    pub src: String,
    pub correct: String,
    pub contrastive: Vec<String>,
    pub antecedent_distance: usize,
}

impl ContrastiveExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.contrastive.is_empty() {
            return Err("`contrastive` must list at least one target".into());
        }
        if self.antecedent_distance > self.src_context.len() {
            return Err(format!(
                "antecedent distance {} exceeds the {} context sentences",
                self.antecedent_distance,
                self.src_context.len()
            ));
        }
        if self.src.trim().is_empty() || self.correct.trim().is_empty() {
            return Err("empty source or target".into());
        }
        Ok(())
    }
}

pub fn parse_contrastive(text: &str) -> Result<Vec<ContrastiveExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = i + 1;
        let ex: ContrastiveExample = serde_json::from_str(line).map_err(|e| Error::Schema {
            record,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|msg| Error::Schema { record, msg })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_contrastive(path: &Path) -> Result<Vec<ContrastiveExample>> {
    parse_contrastive(&fs::read_to_string(path)?)
}

pub fn save_contrastive(path: &Path, examples: &[ContrastiveExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}
