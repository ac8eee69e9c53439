//! Central finite-difference gradient checks.
//!
//! Relative error is `|a - n| / max(|a|, |n|, 1e-4)`. A coordinate that
//! fails at step `h` is retried once at `h / 10`, which separates genuine
//! errors from finite differences straddling a kink (rectifier, max pool,
//! sparsemax support change).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{Batch, Example, Model, ModelConfig};
use crate::nn::{Fwd, ParamStore};
use crate::shortening::{Shortener, ShorteningConfig};
use crate::training::label_smoothed_nll;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per module.
    pub per_module: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            per_module: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        !self.checks.is_empty() && self.max_rel_error() <= tolerance
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// The first `depth` dot-separated segments of a parameter name.
pub fn module_of(name: &str, depth: usize) -> String {
    name.split('.').take(depth).collect::<Vec<_>>().join(".")
}

/// Up to `per_module` random `(parameter, flat index)` pairs from each
/// module, modules being name prefixes of `depth` segments.
pub fn sample_coordinates(store: &ParamStore, depth: usize, per_module: usize, seed: u64) -> Vec<(String, usize)> {
    let mut modules: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for (name, var) in store.iter() {
        let all = modules.entry(module_of(name, depth)).or_default();
        all.extend((0..var.elem_count()).map(|i| (name.to_string(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut coords) in modules {
        coords.shuffle(&mut rng);
        coords.truncate(per_module);
        out.extend(coords);
    }
    out
}

fn read_flat(store: &ParamStore, name: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let var = store
        .get(name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))?;
    let t = var.as_tensor().detach();
    Ok((t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?, t.dims().to_vec()))
}

fn write_flat(store: &ParamStore, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<()> {
    store.assign(name, &Tensor::from_vec(values, shape, &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares autodiff gradients of the scalar `loss` with central finite
/// differences at the given coordinates. The store must be 64-bit.
pub fn check_coordinates(
    store: &ParamStore,
    coords: &[(String, usize)],
    loss: &dyn Fn() -> Result<Tensor>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if store.dtype() != DType::F64 {
        return Err(Error::InvalidConfig("gradient checks need 64-bit parameters".into()));
    }
    let grads = loss()?.backward()?;
    let mut report = GradCheckReport::default();
    for (name, index) in coords {
        let var = store.get(name).expect("sampled from the store");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[*index],
            None => 0.0,
        };
        let (values, shape) = read_flat(store, name)?;
        let numeric_at = |h: f64| -> Result<f64> {
            let mut plus = values.clone();
            plus[*index] += h;
            write_flat(store, name, plus, &shape)?;
            let up = scalar(&loss()?)?;
            let mut minus = values.clone();
            minus[*index] -= h;
            write_flat(store, name, minus, &shape)?;
            let down = scalar(&loss()?)?;
            Ok((up - down) / (2.0 * h))
        };
        let mut numeric = numeric_at(cfg.step)?;
        let mut err = relative_error(analytic, numeric);
        if err > cfg.tolerance {
            let retry = numeric_at(cfg.step / 10.0)?;
            let retry_err = relative_error(analytic, retry);
            if retry_err < err {
                numeric = retry;
                err = retry_err;
            }
        }
        write_flat(store, name, values, &shape)?;
        report.checks.push(CoordinateCheck {
            param: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: err,
        });
    }
    Ok(report)
}

/// Random examples over the model vocabularies; some have fewer context
/// sentences than the model uses, so padding and missing context are
/// exercised.
pub fn random_examples(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = crate::data::vocab::RESERVED;
    let sentence = |rng: &mut ChaCha8Rng, vocab: usize| -> Vec<u32> {
        let len = rng.random_range(1..=5);
        (0..len).map(|_| rng.random_range(reserved as u32..vocab as u32)).collect()
    };
    (0..count)
        .map(|i| {
            let n_ctx = if cfg.context_size == 0 { 0 } else { i % (cfg.context_size + 1) };
            Example {
                src: sentence(&mut rng, cfg.src_vocab),
                tgt: sentence(&mut rng, cfg.tgt_vocab),
                context: (0..n_ctx).map(|_| sentence(&mut rng, cfg.src_vocab)).collect(),
            }
        })
        .collect()
}

/// Checks the summed cross-entropy of a 64-bit model in evaluation mode.
/// Gradients flow through every context entry (`g = C`): detached entries
/// are excluded from autodiff by design but not from finite differences.
pub fn check_model(config: &ModelConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.grad_flow = config.context_size;
    config.dropout = 0.0;
    let model = Model::new(config.clone(), DType::F64)?;
    let examples = random_examples(&config, 3, cfg.seed);
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::new(&refs, config.context_size, DType::F64)?;
    let loss = || -> Result<Tensor> {
        let logits = model.forward(&batch, &mut Fwd::eval())?;
        Ok(label_smoothed_nll(&logits, &batch.tgt_out.ids, &batch.tgt_out.mask, 0.0)?.0)
    };
    let coords = sample_coordinates(model.store(), 1, cfg.per_module, cfg.seed);
    check_coordinates(model.store(), &coords, &loss, cfg)
}

/// Checks a standalone shortener with loss = sum of its (unpadded) output
/// entries on random states; modules are the pooling map, the categorizer
/// and the refinement attention.
pub fn check_shortener(
    config: ShorteningConfig,
    dim: usize,
    heads: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new(DType::F64, cfg.seed);
    let shortener = Shortener::new(&mut store, "shortening", config, dim, heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
    let m = 7;
    let h: Vec<f64> = (0..2 * m * dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let h = Tensor::from_vec(h, (2, m, dim), &Device::Cpu)?;
    let mask: Vec<f64> = (0..2 * m).map(|i| if i < m + 4 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (2, m), &Device::Cpu)?;
    let loss = || -> Result<Tensor> {
        let (g, gmask) = shortener.forward_batch(&h, &mask, &mut Fwd::eval())?;
        Ok(g.broadcast_mul(&gmask.unsqueeze(2)?)?.sum_all()?)
    };
    let coords = sample_coordinates(&store, 2, cfg.per_module, cfg.seed);
    check_coordinates(&store, &coords, &loss, cfg)
}
