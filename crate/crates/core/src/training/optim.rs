use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear warm-up, then inverse square-root decay.
    WarmupDecay,
    /// Linear warm-up, then cosine decay reaching zero at `total_steps`.
    WarmupCosine,
}

/// Rate for the update that follows `step` completed steps. `total_steps`
/// is only read by [`Schedule::WarmupCosine`].
pub fn learning_rate(base: f64, schedule: Schedule, warmup_steps: u64, total_steps: Option<u64>, step: u64) -> f64 {
    let s = (step + 1) as f64;
    let w = warmup_steps.max(1) as f64;
    match schedule {
        Schedule::Constant => base,
        Schedule::WarmupDecay => base * (s / w).min((w / s).sqrt()),
        Schedule::WarmupCosine => {
            if s <= w {
                return base * s / w;
            }
            let total = total_steps.unwrap_or(step + 1).max(warmup_steps + 1) as f64;
            let p = ((s - w) / (total - w)).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Decay applies to parameters with two
/// or more dimensions; biases and norm gains are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

pub const MOMENT1_PREFIX: &str = "optim.m.";
pub const MOMENT2_PREFIX: &str = "optim.v.";

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.iter() {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { cfg, steps: 0, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.m {
            out.insert(format!("{MOMENT1_PREFIX}{n}"), t.clone());
        }
        for (n, t) in &self.v {
            out.insert(format!("{MOMENT2_PREFIX}{n}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<()> {
        for (prefix, map) in [(MOMENT1_PREFIX, &mut self.m), (MOMENT2_PREFIX, &mut self.v)] {
            for (name, slot) in map.iter_mut() {
                let t = tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer state for {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Shape(format!("optimizer state for {name} has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(dtype)?;
            }
        }
        self.steps = steps;
        Ok(())
    }

    /// One update with learning rate `lr`; `grads` maps names to gradients.
    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.detach();
            let m = ((&self.m[name] * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((&self.v[name] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let p = var.as_detached_tensor();
            let decayed = if var.rank() >= 2 && c.weight_decay != 0.0 {
                (&p * (1.0 - lr * c.weight_decay))?
            } else {
                p
            };
            var.set(&(decayed - (update * lr)?)?.detach())?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Gradients by parameter name; parameters without a gradient are skipped.
pub fn collect_grads(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n.clone(), g.detach())))
        .collect()
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut acc = 0.0;
    for g in grads.values() {
        acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(acc.sqrt())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * s)?;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use candle_core::Device;

    #[test]
    fn adamw_matches_scalar_reference() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        store.create("w", &[2, 2], Init::Ones).unwrap();
        store.create("b", &[2], Init::Ones).unwrap();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(cfg, &store).unwrap();
        let gw = [0.5, -1.0, 2.0, 0.0];
        let gb = [0.1, -0.2];
        let grads = BTreeMap::from([
            ("w".to_string(), Tensor::from_vec(gw.to_vec(), (2, 2), &Device::Cpu).unwrap()),
            ("b".to_string(), Tensor::from_vec(gb.to_vec(), 2, &Device::Cpu).unwrap()),
        ]);
        let lr = 0.01;
        opt.step(&store, &grads, lr).unwrap();
        opt.step(&store, &grads, lr).unwrap();
        let reference = |g: f64, decay: bool| {
            let (mut p, mut m, mut v) = (1.0f64, 0.0, 0.0);
            for t in 1..=2 {
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
                let mh = m / (1.0 - cfg.beta1.powi(t));
                let vh = v / (1.0 - cfg.beta2.powi(t));
                if decay {
                    p *= 1.0 - lr * cfg.weight_decay;
                }
                p -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            p
        };
        let w = store.get("w").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, g) in w.iter().zip(gw) {
            assert!((a - reference(g, true)).abs() < 1e-14);
        }
        let b = store.get("b").unwrap().to_vec1::<f64>().unwrap();
        for (a, g) in b.iter().zip(gb) {
            assert!((a - reference(g, false)).abs() < 1e-14);
        }
    }

    #[test]
    fn clipping_and_schedule() {
        let mut grads = BTreeMap::from([("a".to_string(), Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap())]);
        let n = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!((global_norm(&grads).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(learning_rate(1e-3, Schedule::Constant, 10, None, 99), 1e-3);
        assert!((learning_rate(1.0, Schedule::WarmupDecay, 10, None, 4) - 0.5).abs() < 1e-12);
        assert!((learning_rate(1.0, Schedule::WarmupDecay, 10, None, 9) - 1.0).abs() < 1e-12);
        assert!((learning_rate(1.0, Schedule::WarmupDecay, 10, None, 39) - 0.5).abs() < 1e-12);
        let cos = |step| learning_rate(1.0, Schedule::WarmupCosine, 10, Some(110), step);
        assert!((cos(4) - 0.5).abs() < 1e-12);
        assert!((cos(9) - 1.0).abs() < 1e-12);
        assert!((cos(59) - 0.5).abs() < 1e-12);
        assert!(cos(109).abs() < 1e-12 && cos(500).abs() < 1e-12);
    }
}
