use crate::error::{invalid, Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

use super::conv::fft_convolve;
use super::source::{noise, NoiseKind};

pub const DEFAULT_SNR_DB: f64 = 20.0;
pub const DEFAULT_DIRECT_WINDOW_MS: f64 = 2.5;

#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub mixture: Waveform,
    /// Clean signal convolved with the direct part of the RIR.
    pub target: Waveform,
    pub clean: Waveform,
    pub rir: Vec<f64>,
    /// `None` means no additive noise.
    pub snr_db: Option<f64>,
    pub noise_kind: NoiseKind,
}

/// Keeps `[peak, peak + window)` of the RIR, where `peak` is the index of
/// the largest magnitude, and zeroes the rest.
pub fn direct_part(rir: &[f64], window_ms: f64) -> Result<Vec<f64>> {
    if !(window_ms > 0.0) {
        return Err(invalid(format!("direct window must be positive, got {window_ms} ms")));
    }
    let Some(peak) = rir
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
    else {
        return Ok(Vec::new());
    };
    let width = ((window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize).max(1);
    let end = (peak + width).min(rir.len());
    let mut out = vec![0.0; rir.len()];
    out[peak..end].copy_from_slice(&rir[peak..end]);
    Ok(out)
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `snr_db = None` (or `+inf`) adds no noise.
pub fn make_mixture(
    clean: &Waveform,
    rir: &[f64],
    snr_db: Option<f64>,
    noise_kind: NoiseKind,
    seed: u64,
) -> Result<MixtureSample> {
    make_mixture_with_window(clean, rir, snr_db, noise_kind, seed, DEFAULT_DIRECT_WINDOW_MS)
}

pub fn make_mixture_with_window(
    clean: &Waveform,
    rir: &[f64],
    snr_db: Option<f64>,
    noise_kind: NoiseKind,
    seed: u64,
    window_ms: f64,
) -> Result<MixtureSample> {
    clean.require_pipeline_rate()?;
    let len = clean.len();
    if len < SAMPLE_RATE as usize {
        return Err(invalid(format!("clean signal must be at least 1 s, got {len} samples")));
    }
    if power(clean.samples()) == 0.0 {
        return Err(invalid("clean signal is silent"));
    }
    if rir.is_empty() || rir.iter().any(|v| !v.is_finite()) {
        return Err(invalid("RIR must be non-empty and finite"));
    }
    let snr_db = snr_db.filter(|s| *s != f64::INFINITY);
    if let Some(s) = snr_db {
        if !s.is_finite() {
            return Err(invalid(format!("SNR must be finite or +inf, got {s}")));
        }
    }

    let mut reverberant = fft_convolve(clean.samples(), rir);
    reverberant.truncate(len);
    let direct = direct_part(rir, window_ms)?;
    let mut target = fft_convolve(clean.samples(), &direct);
    target.truncate(len);

    let mixture = match snr_db {
        None => reverberant,
        Some(snr) => {
            let p_speech = power(&reverberant);
            if p_speech == 0.0 {
                return Err(Error::Numerical("reverberant speech has zero power".into()));
            }
            let n = noise(noise_kind, len, seed);
            let p_noise = power(&n);
            let gain = (p_speech / (p_noise * 10f64.powf(snr / 10.0))).sqrt();
            reverberant.iter().zip(&n).map(|(s, v)| s + gain * v).collect()
        }
    };
    Ok(MixtureSample {
        mixture: Waveform::new(mixture, SAMPLE_RATE)?,
        target: Waveform::new(target, SAMPLE_RATE)?,
        clean: clean.clone(),
        rir: rir.to_vec(),
        snr_db,
        noise_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::source::speechlike;

    fn clean(seed: u64) -> Waveform {
        Waveform::new(speechlike(16000, seed), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn snr_is_exact() {
        let c = clean(1);
        let rir = crate::synth::make_rir(&crate::synth::RirSpec::exp_decay(0.5, 2)).unwrap();
        for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::HumWhite] {
            let m = make_mixture(&c, &rir, Some(20.0), kind, 7).unwrap();
            let mut rev = fft_convolve(c.samples(), &rir);
            rev.truncate(c.len());
            let resid: Vec<f64> = m.mixture.samples().iter().zip(&rev).map(|(a, b)| a - b).collect();
            let measured = 10.0 * (power(&rev) / power(&resid)).log10();
            assert!((measured - 20.0).abs() < 0.01, "{kind:?}: {measured}");
        }
    }

    #[test]
    fn infinite_snr_and_identity_rir() {
        let c = clean(2);
        let rir = vec![1.0, 0.0, 0.3, -0.1];
        let m = make_mixture(&c, &rir, Some(f64::INFINITY), NoiseKind::White, 1).unwrap();
        let mut rev = fft_convolve(c.samples(), &rir);
        rev.truncate(c.len());
        assert_eq!(m.mixture.samples(), &rev[..]);
        let id = make_mixture(&c, &[1.0], None, NoiseKind::White, 1).unwrap();
        for ((a, b), s) in id.mixture.samples().iter().zip(id.target.samples()).zip(c.samples()) {
            assert!((a - s).abs() < 1e-12 && (b - s).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_clean() {
        let silent = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        assert!(make_mixture(&silent, &[1.0], None, NoiseKind::White, 0).is_err());
        let short = Waveform::new(vec![0.1; 8000], SAMPLE_RATE).unwrap();
        assert!(make_mixture(&short, &[1.0], None, NoiseKind::White, 0).is_err());
    }

    #[test]
    fn direct_part_cases() {
        let mut imp = vec![0.0; 2000];
        imp[10] = 1.0;
        assert_eq!(direct_part(&imp, 2.5).unwrap(), imp);
        let mut echo = imp.clone();
        echo[10 + 800] = 0.6;
        assert_eq!(direct_part(&echo, 2.5).unwrap(), imp);
        let h = crate::synth::make_rir(&crate::synth::RirSpec::exp_decay(0.4, 5)).unwrap();
        let d = direct_part(&h, 2.5).unwrap();
        assert!(d.iter().map(|v| v * v).sum::<f64>() <= h.iter().map(|v| v * v).sum::<f64>());
        // exactly 40 samples kept at 16 kHz
        assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 40);
    }
}
