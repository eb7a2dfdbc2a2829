//! Room impulse responses: exponentially decaying noise tails and a
//! rectangular-room image model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::SAMPLE_RATE;

pub const T60_MIN: f64 = 0.05;
pub const T60_MAX: f64 = 2.0;
const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomGeometry {
    /// Room dimensions in metres.
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
}

impl Default for RoomGeometry {
    fn default() -> Self {
        Self {
            dims: [6.0, 4.5, 3.0],
            source: [2.0, 2.5, 1.6],
            mic: [4.0, 2.0, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RirMethod {
    /// `h[d] = 1`, then `g * u[n] * exp(-3 ln(10) (n - d) / (t60 fs))`.
    ExpDecayNoise,
    ImageMethod(RoomGeometry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RirSpec {
    pub t60: f64,
    /// Direct-path position in samples (exponential-decay method only; the
    /// image method uses the physical propagation delay).
    pub direct_delay: usize,
    pub method: RirMethod,
    /// Amplitude of the reverberant tail at its onset, relative to the
    /// direct path. With a fixed gain the reverberant energy grows with t60.
    pub tail_gain: f64,
    pub seed: u64,
    /// Total length in samples; defaults to `direct_delay + t60 * fs`.
    pub length: Option<usize>,
}

impl RirSpec {
    pub fn exp_decay(t60: f64, seed: u64) -> Self {
        Self {
            t60,
            direct_delay: 0,
            method: RirMethod::ExpDecayNoise,
            tail_gain: DEFAULT_TAIL_GAIN,
            seed,
            length: None,
        }
    }

    pub fn resolved_length(&self) -> usize {
        self.length
            .unwrap_or(self.direct_delay + (self.t60 * SAMPLE_RATE as f64).ceil() as usize + 1)
    }
}

/// Roughly 0 dB direct-to-reverberant ratio at t60 = 0.5 s.
pub const DEFAULT_TAIL_GAIN: f64 = 0.04;

pub fn make_rir(spec: &RirSpec) -> Result<Vec<f64>> {
    if !(T60_MIN..=T60_MAX).contains(&spec.t60) {
        return Err(invalid(format!(
            "t60 {} s outside [{T60_MIN}, {T60_MAX}]",
            spec.t60
        )));
    }
    if !(spec.tail_gain >= 0.0) {
        return Err(invalid(format!("tail gain must be >= 0, got {}", spec.tail_gain)));
    }
    let len = spec.resolved_length();
    match &spec.method {
        RirMethod::ExpDecayNoise => {
            if spec.direct_delay >= len {
                return Err(invalid("direct delay exceeds the RIR length"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let decay = 3.0 * std::f64::consts::LN_10 / (spec.t60 * SAMPLE_RATE as f64);
            let mut h = vec![0.0; len];
            h[spec.direct_delay] = 1.0;
            for n in spec.direct_delay + 1..len {
                let u: f64 = StandardNormal.sample(&mut rng);
                h[n] = spec.tail_gain * u * (-decay * (n - spec.direct_delay) as f64).exp();
            }
            Ok(h)
        }
        RirMethod::ImageMethod(room) => image_method(room, spec.t60, len),
    }
}

/// Allen-Berkley image model with frequency-independent wall reflection
/// from Sabine's formula. Arrivals are placed with a Hann-windowed sinc
/// fractional delay. Normalized so the direct path has unit amplitude.
fn image_method(room: &RoomGeometry, t60: f64, len: usize) -> Result<Vec<f64>> {
    let [lx, ly, lz] = room.dims;
    if room.dims.iter().any(|d| !(*d > 0.0)) {
        return Err(invalid("room dimensions must be positive"));
    }
    for p in [&room.source, &room.mic] {
        if (0..3).any(|i| !(p[i] > 0.0 && p[i] < room.dims[i])) {
            return Err(invalid("source and microphone must lie inside the room"));
        }
    }
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let absorption = (0.161 * volume / (surface * t60)).min(1.0);
    let beta = (1.0 - absorption).sqrt();

    let fs = SAMPLE_RATE as f64;
    let max_dist = len as f64 / fs * SPEED_OF_SOUND;
    let orders = |l: f64| (max_dist / (2.0 * l)).ceil() as i64 + 1;
    let (nx, ny, nz) = (orders(lx), orders(ly), orders(lz));
    const HALF_TAPS: i64 = 16;

    let direct = dist(&room.source, &room.mic);
    let mut h = vec![0.0; len];
    let s = room.source;
    let r = room.mic;
    for ix in -nx..=nx {
        for iy in -ny..=ny {
            for iz in -nz..=nz {
                for q in 0..8u32 {
                    let (qx, qy, qz) = ((q & 1) as i64, ((q >> 1) & 1) as i64, ((q >> 2) & 1) as i64);
                    let px = (1 - 2 * qx) as f64 * s[0] - r[0] + 2.0 * ix as f64 * lx;
                    let py = (1 - 2 * qy) as f64 * s[1] - r[1] + 2.0 * iy as f64 * ly;
                    let pz = (1 - 2 * qz) as f64 * s[2] - r[2] + 2.0 * iz as f64 * lz;
                    let d = (px * px + py * py + pz * pz).sqrt();
                    let delay = d / SPEED_OF_SOUND * fs;
                    if delay >= len as f64 + HALF_TAPS as f64 {
                        continue;
                    }
                    let reflections = (ix - qx).abs() + ix.abs() + (iy - qy).abs() + iy.abs() + (iz - qz).abs() + iz.abs();
                    let gain = beta.powi(reflections as i32) * direct / d;
                    let center = delay.round() as i64;
                    for k in center - HALF_TAPS..=center + HALF_TAPS {
                        if k < 0 || k >= len as i64 {
                            continue;
                        }
                        let x = k as f64 - delay;
                        let win = 0.5 * (1.0 + (std::f64::consts::PI * x / (HALF_TAPS as f64 + 1.0)).cos());
                        h[k as usize] += gain * sinc(x) * win;
                    }
                }
            }
        }
    }
    Ok(h)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
