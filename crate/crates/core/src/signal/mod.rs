//! STFT analysis/synthesis and waveform utilities.
//!
//! Frames are centered: the signal is reflect-padded by `n_fft / 2` on both
//! ends, so frame `t` (0-based) is centered on sample `t * hop` of the
//! original signal. The analysis window is a periodic Hann window and the
//! synthesis step divides the overlap-added, re-windowed frames by the
//! accumulated squared window (WOLA).

mod wav;

pub use wav::{read_wav, write_wav, WavFormat};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// A mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// 16 kHz waveform.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Rejects anything that is not 16 kHz.
    pub fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(invalid(format!(
                "expected {SAMPLE_RATE} Hz audio, got {} Hz",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    PeriodicHann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::PeriodicHann => hann(n),
        }
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        let cfg = Self { n_fft, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(invalid(format!("n_fft must be even, got {}", self.n_fft)));
        }
        if self.hop == 0 || self.n_fft % self.hop != 0 {
            return Err(invalid(format!(
                "hop {} must divide n_fft {}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// One-sided complex STFT, indexed `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<Complex64>,
    pub config: StftConfig,
    pub window: Window,
    /// Length of the analysed signal, used to trim the synthesis output.
    pub signal_len: Option<usize>,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Array2<Complex64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(crate::Error::Shape(format!(
                "expected {:?}, got {:?}",
                self.values.dim(),
                values.dim()
            )));
        }
        Ok(Self {
            values,
            config: self.config,
            window: self.window,
            signal_len: self.signal_len,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.mapv(|v| v * factor),
            ..self.clone()
        }
    }
}

/// Reflect-pads `x` by `pad` samples on both sides (edge sample not repeated).
pub fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if pad >= n {
        return Err(invalid(format!(
            "reflect padding of {pad} needs more than {pad} samples, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    Ok(out)
}

/// Checks the constant-overlap-add property of `window` at hop `hop`.
pub fn satisfies_cola(window: &[f64], hop: usize) -> bool {
    if hop == 0 || window.is_empty() {
        return false;
    }
    let sums: Vec<f64> = (0..hop)
        .map(|phase| window.iter().skip(phase).step_by(hop).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / hop as f64;
    mean > 0.0 && sums.iter().all(|s| (s - mean).abs() <= 1e-8 * mean)
}

pub fn stft(x: &[f64], cfg: StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(invalid("cannot analyse an empty signal"));
    }
    if x.len() < cfg.n_fft {
        return Err(invalid(format!(
            "signal of {} samples is shorter than n_fft {}",
            x.len(),
            cfg.n_fft
        )));
    }
    let n_fft = cfg.n_fft;
    let bins = cfg.bins();
    let frames = cfg.frames(x.len());
    let padded = reflect_pad(x, n_fft / 2)?;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut values = Array2::<Complex64>::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in values.row_mut(t).iter_mut().enumerate() {
            *v = buf[k];
        }
    }
    Ok(Spectrogram {
        values,
        config: cfg,
        window: Window::PeriodicHann,
        signal_len: Some(x.len()),
    })
}

/// Inverse of [`stft`]. The output length is `signal_len` when known,
/// otherwise `(frames - 1) * hop`.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    let cfg = spec.config;
    cfg.validate()?;
    let n_fft = cfg.n_fft;
    if spec.bins() != cfg.bins() {
        return Err(crate::Error::Shape(format!(
            "spectrogram has {} bins, expected {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    let window = spec.window.coefficients(n_fft);
    if !satisfies_cola(&window, cfg.hop) {
        return Err(invalid(format!(
            "window of {n_fft} samples at hop {} violates COLA",
            cfg.hop
        )));
    }
    let frames = spec.frames();
    let out_len = spec
        .signal_len
        .unwrap_or_else(|| frames.saturating_sub(1) * cfg.hop);
    let pad = n_fft / 2;
    let total = (frames.saturating_sub(1)) * cfg.hop + n_fft;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let row = spec.values.row(t);
        for k in 0..cfg.bins() {
            buf[k] = row[k];
        }
        // Hermitian extension; imaginary parts of DC and Nyquist are dropped.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for n in 0..n_fft {
            let w = window[n];
            acc[start + n] += buf[n].re / n_fft as f64 * w;
            norm[start + n] += w * w;
        }
    }
    let mut out = vec![0.0; out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + pad;
        if j < total && norm[j] > 1e-10 {
            *o = acc[j] / norm[j];
        }
    }
    Ok(out)
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(invalid(format!(
            "length mismatch: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(invalid("SI-SDR is undefined for an all-zero reference"));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if target_energy <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    if residual <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zeros_give_zero_spectrogram() {
        let spec = stft(&vec![0.0; 16000], StftConfig::default()).unwrap();
        // (16000 + 512 - 512) / 256 + 1
        assert_eq!(spec.frames(), 63);
        assert_eq!(spec.bins(), 257);
        assert!(spec.values.iter().all(|v| v.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert!(back.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn four_second_segment_has_257_bins() {
        let spec = stft(&vec![0.1; 64000], StftConfig::default()).unwrap();
        assert_eq!(spec.bins(), 257);
        assert_eq!(spec.frames(), 251);
    }

    #[test]
    fn cosine_peaks_at_bin_32_and_matches_dft() {
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).cos())
            .collect();
        let spec = stft(&x, StftConfig::default()).unwrap();
        for t in 2..spec.frames() - 2 {
            let row = spec.values.row(t);
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
                .unwrap();
            assert_eq!(peak, 32);
        }
        // direct DFT of one interior frame
        let t = 10;
        let w = hann(512);
        let start = t * 256 - 256;
        for k in [0usize, 31, 32, 33, 100, 256] {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..512 {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                acc += Complex64::from_polar(x[start + n] * w[n], ang);
            }
            assert!((acc - spec.values[[t, k]]).norm() < 1e-8);
        }
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        for (i, len) in [512usize, 1000, 16000, 23456].into_iter().enumerate() {
            let x = random_signal(len, i as u64);
            let y = istft(&stft(&x, StftConfig::default()).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "len {len}: {err}");
        }
    }

    #[test]
    fn synthesis_is_linear() {
        let x = random_signal(8000, 7);
        let spec = stft(&x, StftConfig::default()).unwrap();
        let y = istft(&spec.scaled(2.0)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_energy_matches_parseval() {
        let x = random_signal(4096, 3);
        let cfg = StftConfig::default();
        let spec = stft(&x, cfg).unwrap();
        let padded = reflect_pad(&x, 256).unwrap();
        let w = hann(512);
        for t in 0..spec.frames() {
            let time: f64 = (0..512).map(|n| (padded[t * 256 + n] * w[n]).powi(2)).sum();
            let row = spec.values.row(t);
            // one-sided spectrum: interior bins count twice
            let freq: f64 = row
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let m = if k == 0 || k == 256 { 1.0 } else { 2.0 };
                    m * v.norm_sqr()
                })
                .sum::<f64>()
                / 512.0;
            assert!((time - freq).abs() <= 1e-9 * time.max(1e-300));
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(stft(&[], StftConfig::default()).is_err());
        assert!(stft(&[0.0; 100], StftConfig::default()).is_err());
        assert!(StftConfig::new(511, 256).is_err());
        assert!(StftConfig::new(512, 200).is_err());
        let spec = Spectrogram {
            values: Array2::zeros((4, 257)),
            config: StftConfig {
                n_fft: 512,
                hop: 512,
            },
            window: Window::PeriodicHann,
            signal_len: None,
        };
        // Hann at 0% overlap is not COLA
        assert!(istft(&spec).is_err());
        assert!(satisfies_cola(&hann(512), 128));
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 8000)
            .unwrap()
            .require_pipeline_rate()
            .is_err());
    }

    #[test]
    fn si_sdr_cases() {
        let r = random_signal(1000, 11);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        let half: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        assert_eq!(si_sdr(&half, &r).unwrap(), SI_SDR_CAP_DB);
        // orthogonal noise of equal norm -> 0 dB
        let n = random_signal(1000, 12);
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
        let mut orth: Vec<f64> = n.iter().zip(&r).map(|(a, b)| a - proj * b).collect();
        let on = orth.iter().map(|v| v * v).sum::<f64>().sqrt();
        orth.iter_mut().for_each(|v| *v *= rr.sqrt() / on);
        let est: Vec<f64> = r.iter().zip(&orth).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&est, &r).unwrap().abs() < 1e-9);
        assert!(si_sdr(&r, &vec![0.0; 1000]).is_err());
        assert_eq!(si_sdr(&vec![0.0; 1000], &r).unwrap(), -SI_SDR_CAP_DB);
        assert!(si_sdr(&r[..10], &r).is_err());
    }
}
