//! Time-domain L1 plus multi-resolution STFT L1.
//!
//! The TF term compares real and imaginary STFT parts (Hann, hop = n/2,
//! centered) at each resolution, averages over bins, then averages over
//! resolutions. L1 uses a zero subgradient at zero.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::{stft, StftConfig};
use crate::tensor_stft::TensorStft;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub fft_sizes: Vec<usize>,
    pub weight_time: f64,
    pub weight_tf: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![256, 512, 768, 1024],
            weight_time: 1.0,
            weight_tf: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_sizes.is_empty() {
            return Err(Error::Config("loss needs at least one FFT size".into()));
        }
        for &n in &self.fft_sizes {
            if n < 64 || n % 2 != 0 {
                return Err(Error::Config(format!("loss FFT size {n} must be even and >= 64")));
            }
        }
        Ok(())
    }

    pub fn max_fft(&self) -> usize {
        self.fft_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn resolutions(&self) -> Result<Vec<StftConfig>> {
        self.fft_sizes.iter().map(|&n| StftConfig::new(n, n / 2)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub time: f64,
    pub tf: f64,
    pub total: f64,
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub fn time_l1(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    if est.is_empty() {
        return Ok(0.0);
    }
    Ok(est.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.len() as f64)
}

pub fn multires_tf_l1(est: &[f64], reference: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_lengths(est, reference)?;
    cfg.validate()?;
    if est.len() < cfg.max_fft() {
        return Err(invalid(format!(
            "signal of {} samples is shorter than the largest loss window {}",
            est.len(),
            cfg.max_fft()
        )));
    }
    let mut acc = 0.0;
    for res in cfg.resolutions()? {
        let a = stft(est, res)?;
        let b = stft(reference, res)?;
        let sum: f64 = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x.re - y.re).abs() + (x.im - y.im).abs())
            .sum();
        acc += sum / a.values.len() as f64;
    }
    Ok(acc / cfg.fft_sizes.len() as f64)
}

pub fn total_loss(est: &[f64], reference: &[f64], cfg: &LossConfig) -> Result<LossTerms> {
    let time = time_l1(est, reference)?;
    let tf = multires_tf_l1(est, reference, cfg)?;
    Ok(LossTerms {
        time,
        tf,
        total: cfg.weight_time * time + cfg.weight_tf * tf,
    })
}

/// Differentiable version of [`total_loss`] over `(B, N)` waveform batches.
#[derive(Debug, Clone)]
pub struct TensorLoss {
    cfg: LossConfig,
    transforms: Vec<TensorStft>,
}

/// Scalar loss tensors, each averaged over the batch.
#[derive(Debug, Clone)]
pub struct TensorLossTerms {
    pub time: Tensor,
    pub tf: Tensor,
    pub total: Tensor,
}

impl TensorLossTerms {
    pub fn values(&self) -> Result<LossTerms> {
        let get = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossTerms {
            time: get(&self.time)?,
            tf: get(&self.tf)?,
            total: get(&self.total)?,
        })
    }
}

impl TensorLoss {
    pub fn new(cfg: &LossConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let transforms = cfg
            .resolutions()?
            .into_iter()
            .map(|r| TensorStft::new(r, dtype, device))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            transforms,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn compute(&self, est: &Tensor, reference: &Tensor) -> Result<TensorLossTerms> {
        if est.dims() != reference.dims() {
            return Err(Error::Shape(format!(
                "estimate {:?} vs reference {:?}",
                est.dims(),
                reference.dims()
            )));
        }
        let (_, len) = est.dims2()?;
        if len < self.cfg.max_fft() {
            return Err(invalid(format!(
                "signal of {len} samples is shorter than the largest loss window {}",
                self.cfg.max_fft()
            )));
        }
        let time = (est - reference)?.abs()?.mean_all()?;
        let mut tf: Option<Tensor> = None;
        for tr in &self.transforms {
            let (er, ei) = tr.forward(est)?;
            let (rr, ri) = tr.forward(reference)?;
            let term = ((er - rr)?.abs()? + (ei - ri)?.abs()?)?.mean_all()?;
            tf = Some(match tf {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let tf = (tf.expect("at least one resolution") / self.transforms.len() as f64)?;
        let total = ((&time * self.cfg.weight_time)? + (&tf * self.cfg.weight_tf)?)?;
        Ok(TensorLossTerms { time, tf, total })
    }
}
