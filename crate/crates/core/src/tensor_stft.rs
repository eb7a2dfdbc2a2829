//! STFT and inverse STFT as differentiable tensor expressions.
//!
//! Same conventions as [`crate::signal`]: periodic Hann window, reflect
//! center padding by `n_fft / 2`, WOLA synthesis. Framing uses reshapes over
//! hop-sized blocks, so `hop` must divide `n_fft`.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};
use crate::signal::{hann, satisfies_cola, StftConfig};

#[derive(Debug, Clone)]
pub struct TensorStft {
    cfg: StftConfig,
    /// `(n_fft, F)` windowed cosine / negated sine analysis bases.
    fwd_re: Tensor,
    fwd_im: Tensor,
    /// `(F, n_fft)` one-sided inverse DFT bases with the synthesis window.
    inv_re: Tensor,
    inv_im: Tensor,
    window: Vec<f64>,
    dtype: DType,
    device: Device,
}

impl TensorStft {
    pub fn new(cfg: StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let bins = cfg.bins();
        let window = hann(n);
        if !satisfies_cola(&window, cfg.hop) {
            return Err(invalid(format!("hop {} violates COLA for n_fft {n}", cfg.hop)));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut fwd_re = vec![0.0; n * bins];
        let mut fwd_im = vec![0.0; n * bins];
        let mut inv_re = vec![0.0; bins * n];
        let mut inv_im = vec![0.0; bins * n];
        for i in 0..n {
            for k in 0..bins {
                // (k * i) mod n keeps the angle small and exact.
                let ang = two_pi * ((k * i) % n) as f64 / n as f64;
                let (s, c) = ang.sin_cos();
                fwd_re[i * bins + k] = window[i] * c;
                fwd_im[i * bins + k] = -window[i] * s;
                let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                inv_re[k * n + i] = weight * c * window[i];
                inv_im[k * n + i] = -weight * s * window[i];
            }
        }
        let mk = |v: Vec<f64>, r: usize, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (r, c), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            cfg,
            fwd_re: mk(fwd_re, n, bins)?,
            fwd_im: mk(fwd_im, n, bins)?,
            inv_re: mk(inv_re, bins, n)?,
            inv_im: mk(inv_im, bins, n)?,
            window,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    fn overlap(&self) -> usize {
        self.cfg.n_fft / self.cfg.hop
    }

    /// `(B, N)` waveform batch to `(re, im)`, each `(B, T, F)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (batch, len) = x.dims2()?;
        let n = self.cfg.n_fft;
        let hop = self.cfg.hop;
        let pad = n / 2;
        if len <= pad || len < n {
            return Err(invalid(format!("signal of {len} samples is shorter than n_fft {n}")));
        }
        let frames = self.cfg.frames(len);
        let r = self.overlap();
        let needed = (frames + r - 1) * hop;
        // reflect padding as a gather
        let idx: Vec<u32> = (0..needed)
            .map(|j| {
                let i = j as isize - pad as isize;
                let i = if i < 0 {
                    -i
                } else if i >= len as isize {
                    2 * (len as isize - 1) - i
                } else {
                    i
                };
                i as u32
            })
            .collect();
        let idx = Tensor::from_vec(idx, needed, &self.device)?;
        let blocks = x
            .contiguous()?
            .index_select(&idx, 1)?
            .reshape((batch, frames + r - 1, hop))?;
        let parts: Vec<Tensor> = (0..r)
            .map(|s| blocks.narrow(1, s, frames))
            .collect::<candle_core::Result<_>>()?;
        let framed = Tensor::cat(&parts, 2)?.reshape((batch * frames, n))?;
        let re = framed.matmul(&self.fwd_re)?.reshape((batch, frames, self.cfg.bins()))?;
        let im = framed.matmul(&self.fwd_im)?.reshape((batch, frames, self.cfg.bins()))?;
        Ok((re, im))
    }

    /// `(re, im)` of shape `(B, T, F)` to a `(B, len)` waveform batch.
    pub fn inverse(&self, re: &Tensor, im: &Tensor, len: usize) -> Result<Tensor> {
        let (batch, frames, bins) = re.dims3()?;
        if bins != self.cfg.bins() || im.dims3()? != (batch, frames, bins) {
            return Err(crate::Error::Shape(format!(
                "expected (B, T, {}) spectra, got {:?} and {:?}",
                self.cfg.bins(),
                re.dims(),
                im.dims()
            )));
        }
        let n = self.cfg.n_fft;
        let hop = self.cfg.hop;
        let r = self.overlap();
        let re2 = re.reshape((batch * frames, bins))?;
        let im2 = im.reshape((batch * frames, bins))?;
        let segs = (re2.matmul(&self.inv_re)? + im2.matmul(&self.inv_im)?)?
            .reshape((batch, frames, n))?;
        let mut acc: Option<Tensor> = None;
        for s in 0..r {
            let chunk = segs
                .narrow(2, s * hop, hop)?
                .pad_with_zeros(1, s, r - 1 - s)?;
            acc = Some(match acc {
                None => chunk,
                Some(a) => (a + chunk)?,
            });
        }
        let total = (frames + r - 1) * hop;
        let ola = acc.expect("overlap >= 1").reshape((batch, total))?;

        let mut norm = vec![0.0; total];
        for t in 0..frames {
            for i in 0..n {
                norm[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        let inv_norm: Vec<f64> = norm
            .iter()
            .map(|v| if *v > 1e-10 { 1.0 / v } else { 0.0 })
            .collect();
        let inv_norm = Tensor::from_vec(inv_norm, (1, total), &self.device)?.to_dtype(self.dtype)?;
        let y = ola.broadcast_mul(&inv_norm)?;
        let pad = n / 2;
        let avail = total.saturating_sub(pad);
        if len <= avail {
            Ok(y.narrow(1, pad, len)?)
        } else {
            Ok(y.narrow(1, pad, avail)?.pad_with_zeros(1, 0, len - avail)?)
        }
    }
}
