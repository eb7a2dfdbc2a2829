//! Speech quality metrics: cepstral distance, LLR, frequency-weighted
//! segmental SNR, SRMR and SI-SDR.
//!
//! These are approximations of the usual evaluation tools with frozen
//! constants (25 ms / 10 ms frames, LPC order 12, 16 cepstra, 23 bands), so
//! values are comparable across runs here but not with published tables.

mod fwsnr;
mod lpc;
mod srmr;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fwsnr::{fw_seg_snr, mel_filterbank, FWSNR_MAX_DB, FWSNR_MIN_DB, MEL_BANDS};
pub use lpc::{autocorrelation, cepstral_distance, levinson, llr, lpc_cepstrum, CD_MAX, LPC_ORDER};
pub use srmr::{channel_centers, modulation_centers, modulation_energies, srmr};

use crate::error::{invalid, Result};
use crate::signal::si_sdr;
use crate::synth::fft_convolve;

pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
/// Alignment search range, samples (10 ms).
pub const MAX_ALIGN_LAG: usize = 160;

pub(crate) fn frames(x: &[f64], len: usize, hop: usize) -> impl Iterator<Item = &[f64]> {
    let n = if x.len() < len { 0 } else { (x.len() - len) / hop + 1 };
    (0..n).map(move |i| &x[i * hop..i * hop + len])
}

pub(crate) fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    if est.len() < FRAME_LEN {
        return Err(invalid(format!("signals shorter than one {FRAME_LEN}-sample frame")));
    }
    if est.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite samples"));
    }
    Ok(())
}

/// Lag in `[-max_lag, max_lag]` maximizing the cross-correlation; a
/// positive lag means `est` is delayed relative to `reference`.
pub fn best_lag(est: &[f64], reference: &[f64], max_lag: usize) -> i64 {
    let rev: Vec<f64> = reference.iter().rev().copied().collect();
    let xc = fft_convolve(est, &rev);
    let zero = reference.len() as i64 - 1;
    let mut best = (0i64, f64::NEG_INFINITY);
    for lag in -(max_lag as i64)..=max_lag as i64 {
        let idx = zero + lag;
        if idx < 0 || idx as usize >= xc.len() {
            continue;
        }
        let v = xc[idx as usize];
        if v > best.1 || (v == best.1 && lag.abs() < best.0.abs()) {
            best = (lag, v);
        }
    }
    best.0
}

/// Shifts `est` by `-lag` (zero fill) so it lines up with the reference.
pub fn align(est: &[f64], reference: &[f64], max_lag: usize) -> Vec<f64> {
    let lag = best_lag(est, reference, max_lag);
    let n = est.len();
    (0..n)
        .map(|i| {
            let j = i as i64 + lag;
            if j >= 0 && (j as usize) < n {
                est[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Cross-correlation alignment within +-10 ms before intrusive metrics.
    pub align: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub cd: f64,
    pub llr: f64,
    pub fwsnr: f64,
    pub srmr: f64,
    pub si_sdr: f64,
}

pub const CSV_HEADER: &str = "id,cd,llr,fwsnr,srmr,si_sdr";

pub fn evaluate_pair(id: &str, est: &[f64], reference: &[f64], opts: MetricOptions) -> Result<MetricReport> {
    check_pair(est, reference)?;
    let aligned;
    let est_i = if opts.align {
        aligned = align(est, reference, MAX_ALIGN_LAG);
        &aligned[..]
    } else {
        est
    };
    Ok(MetricReport {
        id: id.to_string(),
        cd: cepstral_distance(est_i, reference)?,
        llr: llr(est_i, reference)?,
        fwsnr: fw_seg_snr(est_i, reference)?,
        srmr: srmr(est)?,
        si_sdr: si_sdr(est_i, reference)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub cd: f64,
    pub llr: f64,
    pub fwsnr: f64,
    pub srmr: f64,
    pub si_sdr: f64,
}

pub fn summarize(rows: &[MetricReport]) -> MetricSummary {
    let n = rows.len();
    let mean = |f: fn(&MetricReport) -> f64| if n == 0 { f64::NAN } else { rows.iter().map(f).sum::<f64>() / n as f64 };
    MetricSummary {
        count: n,
        cd: mean(|r| r.cd),
        llr: mean(|r| r.llr),
        fwsnr: mean(|r| r.fwsnr),
        srmr: mean(|r| r.srmr),
        si_sdr: mean(|r| r.si_sdr),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            csv_field(&r.id),
            r.cd,
            r.llr,
            r.fwsnr,
            r.srmr,
            r.si_sdr
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &MetricSummary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}
