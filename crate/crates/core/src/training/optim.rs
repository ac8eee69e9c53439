use std::collections::BTreeMap;

use candle_core::Tensor;

use super::TrainConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Adam with bias correction and decoupled weight decay.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    /// First and second moments, in parameter order.
    moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let moments = store
            .iter()
            .map(|(n, v)| Ok((n.to_string(), v.zeros_like()?, v.zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are still decayed
    /// and their moments still decay.
    pub fn update(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, m, v) in &mut self.moments {
            let var = store
                .get(name)
                .ok_or_else(|| Error::InvalidState(format!("optimizer lost parameter {name}")))?;
            let p = var.as_tensor().detach();
            let (new_m, new_v) = match grads.get(name.as_str()) {
                Some(g) => {
                    let g = g.detach();
                    (
                        ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                        ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                    )
                }
                None => ((&*m * self.beta1)?, (&*v * self.beta2)?),
            };
            let denom = ((&new_v / c2)?.sqrt()? + self.eps)?;
            let adam = ((&new_m / c1)? / denom)?;
            let decayed = (&p * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (adam * lr)?)?)?;
            *m = new_m;
            *v = new_v;
        }
        Ok(())
    }

    /// Moments as `optim.m.<name>` / `optim.v.<name>` tensors plus the step
    /// count as `optim.step`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len() + 1);
        for (name, m, v) in &self.moments {
            out.push((format!("optim.m.{name}"), m.clone()));
            out.push((format!("optim.v.{name}"), v.clone()));
        }
        let step = Tensor::new(&[self.step as f64], &candle_core::Device::Cpu).expect("scalar tensor");
        out.push(("optim.step".to_string(), step));
        out
    }

    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t);
        for (name, m, v) in &mut self.moments {
            let (Some(tm), Some(tv)) = (find(&format!("optim.m.{name}")), find(&format!("optim.v.{name}"))) else {
                return Err(Error::Checkpoint(format!("missing optimizer state for {name}")));
            };
            *m = tm.to_dtype(m.dtype())?;
            *v = tv.to_dtype(v.dtype())?;
        }
        let step = find("optim.step").ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        self.step = step.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}
