//! Speech-to-reverberation modulation energy ratio.
//!
//! Gammatone-like channels are applied in the frequency domain together
//! with the Hilbert transform, so each channel's envelope is the magnitude
//! of a single inverse FFT. Envelopes are block-averaged down to 400 Hz and
//! split into eight log-spaced modulation bands (4 to 128 Hz) by second
//! order band-pass filters.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::signal::SAMPLE_RATE;

pub const SRMR_CHANNELS: usize = 23;
pub const SRMR_LOW_HZ: f64 = 125.0;
pub const SRMR_HIGH_HZ: f64 = 8000.0;
pub const MOD_BANDS: usize = 8;
pub const MOD_LOW_HZ: f64 = 4.0;
pub const MOD_HIGH_HZ: f64 = 128.0;
pub const MOD_Q: f64 = 2.0;
const ENV_DECIMATION: usize = 40;

fn erb_number(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_number_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

pub fn channel_centers() -> Vec<f64> {
    let (lo, hi) = (erb_number(SRMR_LOW_HZ), erb_number(SRMR_HIGH_HZ));
    (0..SRMR_CHANNELS)
        .map(|i| erb_number_inv(lo + (hi - lo) * i as f64 / (SRMR_CHANNELS - 1) as f64))
        .collect()
}

pub fn modulation_centers() -> Vec<f64> {
    let ratio = (MOD_HIGH_HZ / MOD_LOW_HZ).powf(1.0 / (MOD_BANDS - 1) as f64);
    (0..MOD_BANDS).map(|k| MOD_LOW_HZ * ratio.powi(k as i32)).collect()
}

/// Fourth-order gammatone magnitude approximation around `fc`.
fn gammatone_gain(f: f64, fc: f64) -> f64 {
    let b = 1.019 * erb_bandwidth(fc);
    (1.0 + ((f - fc) / b).powi(2)).powi(-2)
}

/// RBJ band-pass (0 dB peak), returns `(b, a)` with `a[0] = 1`.
fn bandpass(fc: f64, q: f64, fs: f64) -> ([f64; 3], [f64; 3]) {
    let w0 = std::f64::consts::TAU * fc / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    (
        [alpha / a0, 0.0, -alpha / a0],
        [1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
    )
}

fn biquad_energy(x: &[f64], (b, a): ([f64; 3], [f64; 3])) -> f64 {
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut acc = 0.0;
    for &v in x {
        let y = b[0] * v + b[1] * x1 + b[2] * x2 - a[1] * y1 - a[2] * y2;
        x2 = x1;
        x1 = v;
        y2 = y1;
        y1 = y;
        acc += y * y;
    }
    acc
}

/// Channel-by-band modulation energies, `SRMR_CHANNELS x MOD_BANDS`.
pub fn modulation_energies(x: &[f64]) -> Result<Vec<[f64; MOD_BANDS]>> {
    if x.len() < 2 * ENV_DECIMATION {
        return Err(invalid(format!("signal of {} samples is too short for SRMR", x.len())));
    }
    let n = x.len().next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    spec.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut spec);

    let fs = SAMPLE_RATE as f64;
    let env_fs = fs / ENV_DECIMATION as f64;
    let filters: Vec<_> = modulation_centers().into_iter().map(|fc| bandpass(fc, MOD_Q, env_fs)).collect();
    let mut out = Vec::with_capacity(SRMR_CHANNELS);
    for fc in channel_centers() {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..=n / 2 {
            let g = gammatone_gain(k as f64 * fs / n as f64, fc);
            let side = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            buf[k] = spec[k] * (g * side / n as f64);
        }
        inv.process(&mut buf);
        let env: Vec<f64> = buf[..x.len()]
            .chunks_exact(ENV_DECIMATION)
            .map(|c| c.iter().map(|v| v.norm()).sum::<f64>() / ENV_DECIMATION as f64)
            .collect();
        let mut row = [0.0; MOD_BANDS];
        for (r, f) in row.iter_mut().zip(&filters) {
            *r = biquad_energy(&env, *f);
        }
        out.push(row);
    }
    Ok(out)
}

/// Energy in modulation bands 1-4 over energy in bands 5-8, summed over
/// channels. Returns 0 for silent input.
pub fn srmr(x: &[f64]) -> Result<f64> {
    let e = modulation_energies(x)?;
    let low: f64 = e.iter().map(|r| r[..MOD_BANDS / 2].iter().sum::<f64>()).sum();
    let high: f64 = e.iter().map(|r| r[MOD_BANDS / 2..].iter().sum::<f64>()).sum();
    Ok(if high > 0.0 { low / high } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_layout() {
        let c = channel_centers();
        assert_eq!(c.len(), 23);
        assert!((c[0] - 125.0).abs() < 1e-9 && (c[22] - 8000.0).abs() < 1e-6);
        let m = modulation_centers();
        assert!((m[0] - 4.0).abs() < 1e-12 && (m[7] - 128.0).abs() < 1e-9);
    }

    #[test]
    fn bandpass_peaks_at_center() {
        let (b, a) = bandpass(10.0, 2.0, 400.0);
        let gain = |f: f64| {
            let z = Complex64::from_polar(1.0, -std::f64::consts::TAU * f / 400.0);
            let num = b[0] + b[1] * z + b[2] * z * z;
            let den = a[0] + a[1] * z + a[2] * z * z;
            (num / den).norm()
        };
        assert!((gain(10.0) - 1.0).abs() < 1e-12);
        assert!(gain(5.0) < 0.8 && gain(20.0) < 0.8);
    }
}
