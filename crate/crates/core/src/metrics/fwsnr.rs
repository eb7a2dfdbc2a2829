//! Frequency-weighted segmental SNR over a mel filterbank.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{frames, FRAME_HOP, FRAME_LEN};
use crate::error::Result;
use crate::signal::{hann, SAMPLE_RATE};

pub const MEL_BANDS: usize = 23;
pub const FWSNR_MIN_DB: f64 = -10.0;
pub const FWSNR_MAX_DB: f64 = 35.0;
pub const WEIGHT_EXPONENT: f64 = 0.2;
const NFFT: usize = 512;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `bands x (nfft / 2 + 1)`, evenly spaced in mel from
/// 0 Hz to Nyquist.
pub fn mel_filterbank(bands: usize, nfft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = nfft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / nfft as f64;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Per frame and band: `10 log10(X^2 / (X - Y)^2)` on filterbank
/// magnitudes, clamped to `[-10, 35]` and weighted by `(X^2)^0.2`.
pub fn fw_seg_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    super::check_pair(est, reference)?;
    let fb = mel_filterbank(MEL_BANDS, NFFT, SAMPLE_RATE);
    let win = hann(FRAME_LEN);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let bins = NFFT / 2 + 1;
    let spectrum = |frame: &[f64]| -> Vec<f64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&win) {
            b.re = x * w;
        }
        fft.process(&mut buf);
        buf[..bins].iter().map(|v| v.norm()).collect()
    };
    let band = |mag: &[f64]| -> Vec<f64> { fb.iter().map(|f| f.iter().zip(mag).map(|(a, b)| a * b).sum()).collect() };

    let mut total = 0.0;
    let mut count = 0usize;
    for (e, r) in frames(est, FRAME_LEN, FRAME_HOP).zip(frames(reference, FRAME_LEN, FRAME_HOP)) {
        let xr = band(&spectrum(r));
        let xe = band(&spectrum(e));
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xr.iter().zip(&xe) {
            let energy = x * x;
            let w = energy.powf(WEIGHT_EXPONENT);
            if w == 0.0 {
                continue;
            }
            let err = (x - y).powi(2);
            let snr = if err == 0.0 {
                FWSNR_MAX_DB
            } else {
                (10.0 * (energy / err).log10()).clamp(FWSNR_MIN_DB, FWSNR_MAX_DB)
            };
            num += w * snr;
            den += w;
        }
        if den > 0.0 {
            total += num / den;
            count += 1;
        }
    }
    Ok(if count == 0 { FWSNR_MIN_DB } else { total / count as f64 })
}
