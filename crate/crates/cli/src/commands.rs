use std::fs;
use std::io::Write;
use std::path::Path;

use cachemt::data::{self, contrastive, Document, SyntheticSpec};
use cachemt::eval::scoring::{bucket_of, BUCKETS};
use cachemt::eval::{self, measure_peak, memory_row, report_tsv, ContextMode, DecodeConfig, ModelScorer, Scenario};
use cachemt::model::checkpoint::Checkpoint;
use cachemt::model::{Model, ModelConfig};
use cachemt::training::{self, Corpus, TrainConfig};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::args::{ExportArgs, GenDataArgs, ProfileArgs, ScoreArgs, TrainArgs, TranslateArgs};
use crate::{CliError, ALLOC};

type Result<T> = std::result::Result<T, CliError>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_error(path, e))?))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value");
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

/// Writes to the file if given, else to standard output.
fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model)> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn synthetic_spec(a: &GenDataArgs) -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: a.vocab_size,
        nouns: a.nouns,
        min_len: a.min_len,
        max_len: a.max_len,
        pronoun_rate: a.pronoun_rate,
        neutral_rate: a.neutral_rate,
        gender_balance: a.gender_balance,
        min_doc_len: a.min_doc_len,
        max_doc_len: a.max_doc_len,
        train_docs: a.train_docs,
        valid_docs: a.valid_docs,
        test_docs: a.test_docs,
        context_window: a.context_window,
        seed: a.seed,
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = synthetic_spec(a);
    spec.validate()?;
    let corpus = data::gen_synthetic(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let files = [
        ("train", "train.tsv"),
        ("valid", "valid.tsv"),
        ("test", "test.tsv"),
        ("contrastive", "contrastive.jsonl"),
    ];
    data::save_documents(&dir.join("train.tsv"), &corpus.train)?;
    data::save_documents(&dir.join("valid.tsv"), &corpus.valid)?;
    data::save_documents(&dir.join("test.tsv"), &corpus.test)?;
    contrastive::save_contrastive(&dir.join("contrastive.jsonl"), &corpus.contrastive)?;
    let mut hashes = serde_json::Map::new();
    for (key, file) in files {
        let path = dir.join(file);
        hashes.insert(key.into(), json!({ "path": path, "sha256": file_hash(&path)? }));
    }
    let (a_count, b_count) = data::synthetic::pronoun_census(&corpus.train);
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": "gen-data",
            "version": env!("CARGO_PKG_VERSION"),
            "flags": a,
            "spec": spec,
            "seed": a.seed,
            "artifacts": hashes,
            "pronoun_census": { "a": a_count, "b": b_count },
        }),
    )?;
    println!(
        "wrote {} train, {} valid, {} test documents and {} contrastive examples to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.contrastive.len(),
        dir.display()
    );
    Ok(())
}

fn model_config(a: &TrainArgs, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(a.preset, a.variant, src_vocab, tgt_vocab).with_context(a.context_size);
    if let Some(i) = a.integration {
        cfg.integration = i;
    }
    if let Some(g) = a.grad_flow {
        cfg.grad_flow = g;
    }
    if let Some(k) = a.k {
        cfg = cfg.with_k(k);
    }
    cfg.shortening.activation = a.activation;
    cfg.seed = a.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(a.preset);
    cfg.seed = a.seed;
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    apply!(max_epochs, lr, warmup, max_tokens, update_freq, patience, label_smoothing);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    // Validate flags before touching any data.
    model_config(a, 16, 16)?;
    let tcfg = train_config(a)?;
    let (train_docs, valid_docs, corpus_info) = match &a.data_dir {
        Some(dir) => {
            let (train, valid) = (dir.join("train.tsv"), dir.join("valid.tsv"));
            require_file(&train, "training corpus")?;
            require_file(&valid, "validation corpus")?;
            let info = json!({
                "train": { "path": train, "sha256": file_hash(&train)? },
                "valid": { "path": valid, "sha256": file_hash(&valid)? },
            });
            (data::load_documents(&train)?, data::load_documents(&valid)?, info)
        }
        None => {
            let spec = SyntheticSpec {
                seed: a.seed,
                ..SyntheticSpec::default()
            };
            let corpus = data::gen_synthetic(&spec)?;
            let hash = |docs: &[Document]| sha256_hex(data::corpus::format_documents(docs).as_bytes());
            let info = json!({
                "synthetic": spec,
                "train": { "sha256": hash(&corpus.train) },
                "valid": { "sha256": hash(&corpus.valid) },
            });
            (corpus.train, corpus.valid, info)
        }
    };
    let (src_vocab, tgt_vocab) = data::build_vocabs(&train_docs, a.max_vocab);
    let mcfg = model_config(a, src_vocab.len(), tgt_vocab.len())?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let artifacts = json!({
        "best": dir.join("best.ckpt"),
        "last": dir.join("last.ckpt"),
        "metrics": dir.join("metrics.jsonl"),
    });
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "command": "train",
            "version": env!("CARGO_PKG_VERSION"),
            "flags": a,
            "model": mcfg,
            "training": tcfg,
            "parameters": mcfg.count_parameters(),
            "seed": a.seed,
            "corpus": corpus_info,
            "artifacts": artifacts,
        }),
    )?;
    let corpus = Corpus {
        train: train_docs,
        valid: valid_docs,
        src_vocab,
        tgt_vocab,
    };
    let outcome = training::train(&mcfg, &tcfg, &corpus, Some(dir))?;
    println!(
        "best epoch {} of {} ({} steps), validation loss {:.4}; checkpoints in {}",
        outcome.best_epoch,
        outcome.epochs,
        outcome.steps,
        outcome.best_valid_loss,
        dir.display()
    );
    Ok(())
}

/// Documents of source sentences with optional references.
fn parse_input(text: &str) -> Vec<Vec<(String, Option<String>)>> {
    let mut docs = vec![Vec::new()];
    for line in text.lines() {
        if line.trim().is_empty() {
            if !docs.last().expect("non-empty").is_empty() {
                docs.push(Vec::new());
            }
            continue;
        }
        let mut fields = line.splitn(2, '\t');
        let src = fields.next().unwrap_or_default().trim().to_string();
        let reference = fields.next().map(|r| r.trim().to_string());
        docs.last_mut().expect("non-empty").push((src, reference));
    }
    docs.retain(|d| !d.is_empty());
    docs
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be positive".into()));
    }
    require_file(&a.input, "input")?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let text = fs::read_to_string(&a.input).map_err(|e| io_error(&a.input, e))?;
    let cfg = DecodeConfig {
        beam: a.beam,
        max_len_a: a.max_len_a,
        max_len_b: a.max_len_b,
        context: if a.fresh {
            ContextMode::Fresh
        } else {
            ContextMode::Cached
        },
    };
    let (mut out, mut hyps, mut refs) = (String::new(), Vec::new(), Vec::new());
    let mut all_refs = true;
    for (i, doc) in parse_input(&text).iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let sources: Vec<Vec<u32>> = doc.iter().map(|(s, _)| ckpt.src_vocab.encode(s)).collect();
        for (tokens, (_, reference)) in eval::translate_document(&model, &sources, &cfg)?.iter().zip(doc) {
            let hyp = ckpt.tgt_vocab.decode(tokens);
            out.push_str(&hyp);
            out.push('\n');
            match reference {
                Some(r) => refs.push(r.clone()),
                None => all_refs = false,
            }
            hyps.push(hyp);
        }
    }
    emit(a.output.as_deref(), &out)?;
    if all_refs && !hyps.is_empty() {
        eprintln!("BLEU = {:.2}", eval::bleu(&hyps, &refs)?);
    }
    Ok(())
}

pub fn score_contrastive(a: &ScoreArgs) -> Result<()> {
    require_file(&a.data, "contrastive set")?;
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    let examples = contrastive::load_contrastive(&a.data)?;
    let scorer = ModelScorer {
        model: &model,
        src_vocab: &ckpt.src_vocab,
        tgt_vocab: &ckpt.tgt_vocab,
    };
    let report = eval::contrastive_eval(&scorer, &examples)?;
    println!("accuracy\t{:.4}\t{}/{}", report.accuracy, report.correct, report.total);
    if a.by_distance {
        println!("distance\ttotal\tcorrect\taccuracy");
        for b in &report.by_distance {
            let acc = b.accuracy().map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            println!("{}\t{}\t{}\t{}", b.bucket, b.total, b.correct, acc);
        }
    }
    if let Some(path) = &a.output {
        let mut text = String::new();
        for (i, (ex, ok)) in examples.iter().zip(&report.outcomes).enumerate() {
            let record = json!({
                "index": i,
                "antecedent_distance": ex.antecedent_distance,
                "bucket": BUCKETS[bucket_of(ex.antecedent_distance)],
                "correct": ok,
            });
            text.push_str(&record.to_string());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

pub fn profile_memory(a: &ProfileArgs) -> Result<()> {
    let mut rows = Vec::new();
    for c in 0..=a.max_context {
        for &v in &a.variants {
            let k = a.k.unwrap_or_else(|| v.default_k());
            let s = Scenario { m: a.m, t: a.t, c, k };
            let mut row = memory_row(v, s)?;
            if a.measure {
                row.peak_bytes = Some(measure_peak(&ALLOC, v, s)?);
            }
            rows.push(row);
        }
    }
    emit(a.output.as_deref(), &report_tsv(&rows))
}

pub fn export_assignments(a: &ExportArgs) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&a.checkpoint)?;
    if a.sentence.split_whitespace().next().is_none() {
        return Err(CliError::Usage("--sentence is empty".into()));
    }
    let export = eval::export_assignments(&model, &ckpt.src_vocab, &a.sentence)?;
    emit(a.output.as_deref(), &export.to_tsv())
}
