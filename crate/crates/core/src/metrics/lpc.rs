//! Cepstral distance and log-likelihood ratio from frame-wise LPC.

use super::{frames, FRAME_HOP, FRAME_LEN};
use crate::error::Result;

pub const LPC_ORDER: usize = 12;
pub const CEPSTRUM_ORDER: usize = 16;
pub const CD_MAX: f64 = 10.0;
/// Frames whose reference energy is more than this far below the loudest
/// frame are skipped.
pub const ENERGY_RANGE_DB: f64 = 40.0;
pub const LLR_KEEP_FRACTION: f64 = 0.95;

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn autocorrelation(x: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| x.iter().zip(&x[k.min(x.len())..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Levinson-Durbin. Returns `a` with `a[0] = 1` so that the prediction
/// error filter is `A(z) = sum_k a[k] z^-k`. A silent frame yields `A = 1`.
pub fn levinson(r: &[f64]) -> Vec<f64> {
    let p = r.len() - 1;
    let mut a = vec![0.0; p + 1];
    a[0] = 1.0;
    let r0 = r[0] * (1.0 + 1e-9);
    if !(r0 > 0.0) {
        return a;
    }
    let mut err = r0;
    for i in 1..=p {
        let acc: f64 = r[i] + (1..i).map(|j| a[j] * r[i - j]).sum::<f64>();
        let k = -acc / err;
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
        if !(err > 0.0) {
            break;
        }
    }
    a
}

/// Cepstrum `c_1..c_n` of the all-pole model `1 / A(z)`.
pub fn lpc_cepstrum(a: &[f64], n: usize) -> Vec<f64> {
    let p = a.len() - 1;
    let coef = |k: usize| if k <= p { a[k] } else { 0.0 };
    let mut c = vec![0.0; n + 1];
    for m in 1..=n {
        let mut acc = -coef(m);
        for k in 1..m {
            acc -= (k as f64 / m as f64) * c[k] * coef(m - k);
        }
        c[m] = acc;
    }
    c[1..].to_vec()
}

struct FramePair {
    est: Vec<f64>,
    reference: Vec<f64>,
}

fn active_frames(est: &[f64], reference: &[f64]) -> Vec<FramePair> {
    let win = hamming(FRAME_LEN);
    let windowed = |f: &[f64]| -> Vec<f64> { f.iter().zip(&win).map(|(a, b)| a * b).collect() };
    let pairs: Vec<FramePair> = frames(est, FRAME_LEN, FRAME_HOP)
        .zip(frames(reference, FRAME_LEN, FRAME_HOP))
        .map(|(e, r)| FramePair {
            est: windowed(e),
            reference: windowed(r),
        })
        .collect();
    let energy: Vec<f64> = pairs.iter().map(|p| p.reference.iter().map(|v| v * v).sum()).collect();
    let max = energy.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    let floor = max * 10f64.powf(-ENERGY_RANGE_DB / 10.0);
    pairs
        .into_iter()
        .zip(energy)
        .filter(|(_, e)| *e >= floor && *e > 0.0)
        .map(|(p, _)| p)
        .collect()
}

/// Mean over active frames of `(10 / ln 10) sqrt(2 sum (c_e - c_r)^2)`,
/// each frame clamped to `[0, 10]`.
pub fn cepstral_distance(est: &[f64], reference: &[f64]) -> Result<f64> {
    super::check_pair(est, reference)?;
    let frames = active_frames(est, reference);
    if frames.is_empty() {
        return Ok(0.0);
    }
    let scale = 10.0 / std::f64::consts::LN_10;
    let total: f64 = frames
        .iter()
        .map(|f| {
            let ce = lpc_cepstrum(&levinson(&autocorrelation(&f.est, LPC_ORDER)), CEPSTRUM_ORDER);
            let cr = lpc_cepstrum(&levinson(&autocorrelation(&f.reference, LPC_ORDER)), CEPSTRUM_ORDER);
            let d2: f64 = ce.iter().zip(&cr).map(|(a, b)| (a - b).powi(2)).sum();
            (scale * (2.0 * d2).sqrt()).clamp(0.0, CD_MAX)
        })
        .sum();
    Ok(total / frames.len() as f64)
}

fn quad_form(a: &[f64], r: &[f64]) -> f64 {
    let p = a.len();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..p {
            acc += a[i] * a[j] * r[i.abs_diff(j)];
        }
    }
    acc
}

/// `ln(a_e' R a_e / a_r' R a_r)` per active frame, with `R` the reference
/// autocorrelation matrix; mean of the smallest 95 %, clamped at 0.
pub fn llr(est: &[f64], reference: &[f64]) -> Result<f64> {
    super::check_pair(est, reference)?;
    let frames = active_frames(est, reference);
    if frames.is_empty() {
        return Ok(0.0);
    }
    let mut vals: Vec<f64> = frames
        .iter()
        .map(|f| {
            let rr = autocorrelation(&f.reference, LPC_ORDER);
            let ar = levinson(&rr);
            let ae = levinson(&autocorrelation(&f.est, LPC_ORDER));
            let num = quad_form(&ae, &rr);
            let den = quad_form(&ar, &rr);
            if den > 0.0 && num > 0.0 {
                (num / den).ln()
            } else {
                0.0
            }
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    let keep = ((vals.len() as f64 * LLR_KEEP_FRACTION).ceil() as usize).clamp(1, vals.len());
    Ok((vals[..keep].iter().sum::<f64>() / keep as f64).max(0.0))
}
