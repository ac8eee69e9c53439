//! Teacher-forced training: label-smoothed loss, inverse square-root
//! schedule, Adam, gradient accumulation and clipping, early stopping.

mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::Adam;

use crate::data::{examples_from_documents, Document, Vocabulary};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Batch, Example, Model, ModelConfig, Preset};
use crate::nn::{self, Fwd};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Padded token budget of one micro-batch.
    pub max_tokens: usize,
    /// Micro-batches accumulated per optimizer step.
    pub update_freq: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::PaperBase => Self {
                lr: 5e-4,
                warmup: 2500,
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8,
                weight_decay: 1e-4,
                label_smoothing: 0.1,
                clip_norm: 0.1,
                max_tokens: 4096,
                update_freq: 8,
                patience: 5,
                max_epochs: 100,
                seed: 42,
            },
            Preset::Desk => Self {
                lr: 1e-3,
                warmup: 200,
                max_tokens: 1024,
                update_freq: 1,
                clip_norm: 1.0,
                max_epochs: 30,
                ..Self::preset(Preset::PaperBase)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) || self.warmup == 0 {
            return fail("learning rate and warmup must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label smoothing must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return fail("weight decay and clip norm must be non-negative");
        }
        if self.max_tokens == 0 || self.update_freq == 0 || self.patience == 0 || self.max_epochs == 0 {
            return fail("max tokens, update frequency, patience and epochs must be positive");
        }
        Ok(())
    }
}

/// `base * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup as f64;
    cfg.lr * (step / warmup).min((warmup / step).sqrt())
}

/// Summed label-smoothed negative log-likelihood over non-pad positions of
/// `(B, T, V)` logits, and the summed plain NLL (detached).
///
/// Per position: `(1 - eps) * -log p[target] + eps / V * sum_v -log p[v]`.
pub fn label_smoothed_nll(
    logits: &Tensor,
    targets: &Tensor,
    mask: &Tensor,
    eps: f64,
) -> Result<(Tensor, f64)> {
    let v = logits.dim(D::Minus1)? as f64;
    let lp = nn::log_softmax(logits)?;
    let nll = lp.gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?.neg()?;
    let nll = nll.mul(mask)?;
    let plain = nll.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if eps == 0.0 {
        return Ok((nll.sum_all()?, plain));
    }
    let smooth = (lp.sum(D::Minus1)?.neg()? / v)?.mul(mask)?;
    let loss = ((nll * (1.0 - eps))? + (smooth * eps)?)?.sum_all()?;
    Ok((loss, plain))
}

/// Mean label-smoothed loss of `(T, V)` logits against `T` targets.
pub fn label_smoothed_nll_mean(logits: &Tensor, targets: &[u32], eps: f64) -> Result<f64> {
    let (t, _) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::InvalidInput("one target per logit row is required".into()));
    }
    let ids = Tensor::from_vec(targets.to_vec(), (1, t), logits.device())?;
    let mask = Tensor::ones((1, t), logits.dtype(), logits.device())?;
    let (loss, _) = label_smoothed_nll(&logits.unsqueeze(0)?, &ids, &mask, eps)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()? / t as f64)
}

/// Groups examples, in order, into micro-batches whose padded size
/// `count * max(source, target, context lengths + 1)` stays within
/// `max_tokens`. An example larger than the budget forms its own batch.
pub fn make_batches(examples: &[Example], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for (i, ex) in examples.iter().enumerate() {
        let len = ex
            .context
            .iter()
            .map(Vec::len)
            .chain([ex.src.len(), ex.tgt.len()])
            .max()
            .unwrap_or(0)
            + 1;
        let new_width = width.max(len);
        if !current.is_empty() && new_width * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            width = len;
        } else {
            width = new_width;
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Patience-based stopping on a loss to be minimized.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad: 0,
            seen: 0,
        }
    }

    /// Records an evaluation; returns whether it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        let index = self.seen;
        self.seen += 1;
        match self.best {
            Some((_, b)) if loss >= b => {
                self.bad += 1;
                false
            }
            _ => {
                self.best = Some((index, loss));
                self.bad = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience
    }

    /// `(evaluation index, loss)` of the best evaluation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// Label-smoothed loss per target token.
    pub loss: f64,
    pub nll: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Owns a model and its optimizer.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.store(), &cfg)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { model, cfg, adam, rng })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// Summed gradients and loss over micro-batches, without updating.
    pub fn accumulate(&mut self, batches: &[Batch]) -> Result<(BTreeMap<String, Tensor>, f64, f64, usize)> {
        let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut loss_sum, mut nll_sum, mut tokens) = (0.0, 0.0, 0);
        let dropout = self.model.config().dropout;
        for batch in batches {
            let mut fwd = Fwd::train(dropout, self.rng.random());
            let logits = self.model.forward(batch, &mut fwd)?;
            let (loss, nll) =
                label_smoothed_nll(&logits, &batch.tgt_out.ids, &batch.tgt_out.mask, self.cfg.label_smoothing)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: self.adam.step_count() + 1,
                    loss: value,
                });
            }
            let grads = loss.backward()?;
            for (name, var) in self.model.store().iter() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    let entry = match sums.remove(name) {
                        Some(acc) => (acc + g)?,
                        None => g.clone(),
                    };
                    sums.insert(name.to_string(), entry);
                }
            }
            loss_sum += value;
            nll_sum += nll;
            tokens += batch.target_tokens;
        }
        Ok((sums, loss_sum, nll_sum, tokens))
    }

    /// One optimizer update from `batches` accumulated together; gradients
    /// are normalized by the total number of target tokens.
    pub fn step(&mut self, batches: &[Batch]) -> Result<StepStats> {
        let (mut grads, loss, nll, tokens) = self.accumulate(batches)?;
        let scale = 1.0 / tokens.max(1) as f64;
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
        let norm = global_norm(grads.values())?;
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.adam.step_count() + 1,
                loss: norm,
            });
        }
        let mut clipped = norm;
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let factor = self.cfg.clip_norm / norm;
            for g in grads.values_mut() {
                *g = (&*g * factor)?;
            }
            clipped = global_norm(grads.values())?;
        }
        let step = self.adam.step_count() + 1;
        let lr = lr_at(step, &self.cfg);
        self.adam.update(self.model.store(), &grads, lr)?;
        Ok(StepStats {
            step,
            lr,
            loss: loss * scale,
            nll: nll * scale,
            tokens,
            grad_norm: norm,
            clipped_norm: clipped,
        })
    }

    /// Per-token `(smoothed loss, nll)` over `batches` in evaluation mode.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<(f64, f64)> {
        evaluate(&self.model, batches, self.cfg.label_smoothing)
    }
}

/// Euclidean norm of all gradient entries together.
pub fn global_norm<'a>(grads: impl Iterator<Item = &'a Tensor>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

pub fn evaluate(model: &Model, batches: &[Batch], eps: f64) -> Result<(f64, f64)> {
    let (mut loss, mut nll, mut tokens) = (0.0, 0.0, 0);
    for batch in batches {
        let logits = model.forward(batch, &mut Fwd::eval())?;
        let (l, n) = label_smoothed_nll(&logits, &batch.tgt_out.ids, &batch.tgt_out.mask, eps)?;
        loss += l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        nll += n;
        tokens += batch.target_tokens;
    }
    let t = tokens.max(1) as f64;
    Ok((loss / t, nll / t))
}

/// Training and validation documents with their vocabularies.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_nll: Option<f64>,
}

pub struct TrainOutcome {
    /// Model with the best validation parameters restored.
    pub model: Model,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub epochs: usize,
    pub steps: u64,
    pub history: Vec<MetricsRecord>,
    pub best_checkpoint: Option<PathBuf>,
}

fn to_batches(examples: &[Example], groups: &[Vec<usize>], c: usize, dtype: DType) -> Result<Vec<Batch>> {
    groups
        .iter()
        .map(|g| {
            let refs: Vec<&Example> = g.iter().map(|&i| &examples[i]).collect();
            Batch::new(&refs, c, dtype)
        })
        .collect()
}

struct MetricsLog(Option<File>);

impl MetricsLog {
    fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }
}

/// Trains a fresh model, evaluating on the validation documents after every
/// epoch. With an output directory, writes `metrics.jsonl`, `best.ckpt`
/// (best validation loss) and `last.ckpt` (with optimizer state).
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let model = Model::new(model_cfg.clone(), DType::F32)?;
    let c = model_cfg.context_size;
    let strip = |v: Vec<crate::data::TrainExample>| v.into_iter().map(|e| e.example).collect::<Vec<_>>();
    let train_ex = strip(examples_from_documents(&corpus.train, &corpus.src_vocab, &corpus.tgt_vocab, c));
    let valid_ex = strip(examples_from_documents(&corpus.valid, &corpus.src_vocab, &corpus.tgt_vocab, c));
    let groups = make_batches(&train_ex, cfg.max_tokens);
    let train_batches = to_batches(&train_ex, &groups, c, DType::F32)?;
    let valid_batches = to_batches(&valid_ex, &make_batches(&valid_ex, cfg.max_tokens), c, DType::F32)?;

    let mut log = MetricsLog(None);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        log.0 = Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?);
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_params = trainer.model().parameters()?;
    let mut best_checkpoint = None;
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        let mut order: Vec<usize> = (0..train_batches.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut tok_sum) = (0.0, 0usize);
        let mut last = None;
        for chunk in order.chunks(cfg.update_freq) {
            let micro: Vec<Batch> = chunk.iter().map(|&i| train_batches[i].clone()).collect();
            let stats = trainer.step(&micro)?;
            loss_sum += stats.loss * stats.tokens as f64;
            tok_sum += stats.tokens;
            last = Some(stats);
        }
        let train_loss = loss_sum / tok_sum.max(1) as f64;
        let (valid_loss, valid_nll) = if valid_batches.is_empty() {
            (train_loss, train_loss)
        } else {
            trainer.evaluate(&valid_batches)?
        };
        let record = MetricsRecord {
            epoch,
            step: trainer.step_count(),
            lr: last.map_or(0.0, |s| s.lr),
            train_loss,
            valid_loss: Some(valid_loss),
            valid_nll: Some(valid_nll),
        };
        log::info!(
            "epoch {epoch} step {} train {train_loss:.4} valid {valid_loss:.4} nll {valid_nll:.4}",
            record.step
        );
        log.write(&record)?;
        history.push(record);
        if stopper.observe(valid_loss) {
            best_params = trainer.model().parameters()?;
            if let Some(dir) = out_dir {
                let path = dir.join("best.ckpt");
                save(&trainer, corpus, &path, epoch, false)?;
                best_checkpoint = Some(path);
            }
        }
        if stopper.should_stop() {
            break;
        }
    }
    if let Some(dir) = out_dir {
        save(&trainer, corpus, &dir.join("last.ckpt"), epochs, true)?;
    }
    let steps = trainer.step_count();
    let model = trainer.into_model();
    model.load_parameters(&best_params)?;
    let (best_index, best_valid_loss) = stopper.best().expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch: best_index + 1,
        best_valid_loss,
        epochs,
        steps,
        history,
        best_checkpoint,
    })
}

fn save(trainer: &Trainer, corpus: &Corpus, path: &Path, epoch: usize, with_optimizer: bool) -> Result<()> {
    let extra = if with_optimizer {
        trainer.optimizer().state_tensors()
    } else {
        Vec::new()
    };
    let meta = serde_json::json!({
        "epoch": epoch,
        "train_config": trainer.config(),
    });
    Checkpoint::from_model(
        trainer.model(),
        &corpus.src_vocab,
        &corpus.tgt_vocab,
        trainer.step_count(),
        extra,
        meta,
    )?
    .save(path)
}
