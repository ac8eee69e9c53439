use std::ffi::OsString;
use std::path::{Path, PathBuf};

use cachemt::model::{Integration, Preset, Variant};
use cachemt::shortening::Activation;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "cachemt", version, about = "Context-aware translation with cached, shortened sentence states")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic pronoun corpus and its contrastive set.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, metrics and a run manifest.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Translate documents sentence by sentence with document context.
    #[command(args_override_self = true)]
    Translate(TranslateArgs),
    /// Rank contrastive translations and report accuracy.
    #[command(args_override_self = true)]
    ScoreContrastive(ScoreArgs),
    /// Report attention cells and stored context vectors per variant.
    #[command(args_override_self = true)]
    ProfileMemory(ProfileArgs),
    /// Write the token-to-group weights of a grouping or selecting model.
    #[command(args_override_self = true)]
    ExportAssignments(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Translate(_) => "translate",
            Command::ScoreContrastive(_) => "score-contrastive",
            Command::ProfileMemory(_) => "profile-memory",
            Command::ExportAssignments(_) => "export-assignments",
        }
    }

    fn config(&self) -> Option<&Path> {
        match self {
            Command::GenData(a) => a.config.as_deref(),
            Command::Train(a) => a.config.as_deref(),
            Command::Translate(a) => a.config.as_deref(),
            Command::ScoreContrastive(a) => a.config.as_deref(),
            Command::ProfileMemory(a) => a.config.as_deref(),
            Command::ExportAssignments(a) => a.config.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "CACHEMT_OUT_DIR", default_value = "data")]
    pub out_dir: PathBuf,
    /// Neutral source words.
    #[arg(long, default_value_t = 60)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    pub nouns: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub pronoun_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub neutral_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gender_balance: f64,
    #[arg(long, default_value_t = 4)]
    pub min_doc_len: usize,
    #[arg(long, default_value_t = 4)]
    pub max_doc_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub train_docs: usize,
    #[arg(long, default_value_t = 100)]
    pub valid_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub test_docs: usize,
    /// Minimum number of context sentences kept in contrastive examples.
    #[arg(long, default_value_t = 3)]
    pub context_window: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory with train.tsv and valid.tsv; without it the default
    /// synthetic corpus for --seed is generated in memory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "CACHEMT_OUT_DIR", default_value = "run")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "caching_tokens")]
    pub variant: Variant,
    /// Context integration [default: per variant]
    #[arg(long)]
    pub integration: Option<Integration>,
    #[arg(long, default_value_t = 1)]
    pub context_size: usize,
    /// Newest context sentences that receive gradient [default: per variant, at most the context size]
    #[arg(long)]
    pub grad_flow: Option<usize>,
    /// Pooling window or number of groups [default: per variant]
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "sparsemax")]
    pub activation: Activation,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Vocabulary size cap including special symbols [default: no cap]
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// [default: from preset]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Peak learning rate [default: from preset]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: from preset]
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Target tokens per batch [default: from preset]
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// [default: from preset]
    #[arg(long)]
    pub update_freq: Option<usize>,
    /// [default: from preset]
    #[arg(long)]
    pub patience: Option<usize>,
    /// [default: from preset]
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TranslateArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Documents: one source sentence per line, blank lines between
    /// documents; an optional tab-separated reference enables BLEU.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Re-encode previous sentences instead of reusing cached states.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long, default_value_t = 1.5)]
    pub max_len_a: f64,
    #[arg(long, default_value_t = 10)]
    pub max_len_b: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Contrastive set in JSONL form.
    #[arg(long)]
    pub data: PathBuf,
    /// Also report accuracy per antecedent distance.
    #[arg(long)]
    pub by_distance: bool,
    /// Per-example records as JSONL [default: not written]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Largest number of context sentences; rows cover 0 to this value.
    #[arg(long, default_value_t = 10)]
    pub max_context: usize,
    /// Tokens per source sentence.
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    /// Target tokens.
    #[arg(long, default_value_t = 20)]
    pub t: usize,
    /// Pooling window or number of groups [default: per variant]
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sentence_level,single_encoder,multi_encoder,caching_tokens,caching_sentence,short_max,short_avg,short_linear,short_group,short_select")]
    pub variants: Vec<Variant>,
    /// Also measure peak heap usage of inference with random desk models.
    #[arg(long)]
    pub measure: bool,
    /// Output file [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    /// TOML or JSON file with flag values; command-line flags win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentence, tokens separated by spaces.
    #[arg(long)]
    pub sentence: String,
    /// Output file [default: standard output]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Flag values from a config file, as command-line tokens. Keys name flags
/// with `-` or `_`; a `[<subcommand>]` table overrides top-level keys. A
/// JSON file may be a run manifest, whose `flags` object is used.
fn config_tokens(path: &Path, subcommand: &str) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: String| CliError::Usage(format!("invalid config {}: {e}", path.display()));
    let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    } else {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        serde_json::to_value(table).map_err(|e| bad(e.to_string()))?
    };
    let root = value.get("flags").unwrap_or(&value);
    let serde_json::Value::Object(root) = root else {
        return Err(bad("expected a table of flags".into()));
    };
    let mut flags: Vec<(String, serde_json::Value)> = Vec::new();
    for (k, v) in root {
        if !v.is_object() {
            flags.push((k.clone(), v.clone()));
        }
    }
    if let Some(serde_json::Value::Object(section)) = root.get(subcommand) {
        flags.extend(section.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    let mut out = Vec::new();
    for (key, value) in flags {
        let flag = format!("--{}", key.replace('_', "-"));
        let text = match value {
            serde_json::Value::Null => continue,
            serde_json::Value::Bool(true) => {
                out.push(flag.into());
                continue;
            }
            serde_json::Value::Bool(false) => continue,
            serde_json::Value::String(s) => s,
            serde_json::Value::Array(items) => items
                .iter()
                .map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string))
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        out.push(flag.into());
        out.push(text.into());
    }
    Ok(out)
}

/// Parses the command line, merging a `--config` file underneath it.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, ParseFailure> {
    let cli = Cli::try_parse_from(&argv).map_err(ParseFailure::Clap)?;
    let Some(config) = cli.command.config().map(Path::to_path_buf) else {
        return Ok(cli);
    };
    let name = cli.command.name();
    let extra = config_tokens(&config, name).map_err(ParseFailure::Other)?;
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(name))
        .expect("subcommand present in argv");
    let mut merged: Vec<OsString> = argv[..=at].to_vec();
    merged.extend(extra);
    merged.extend(argv[at + 1..].iter().cloned());
    Cli::try_parse_from(merged).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Other(CliError),
}
