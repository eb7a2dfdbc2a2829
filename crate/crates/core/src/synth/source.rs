//! Noise signals and synthetic speech-like sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::signal::SAMPLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    Pink,
    /// 120 Hz hum with harmonics over a white floor.
    HumWhite,
}

pub fn noise(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = || -> f64 { StandardNormal.sample(&mut rng) };
    match kind {
        NoiseKind::White => (0..len).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's refined pink filter
            let mut b = [0.0f64; 7];
            (0..len)
                .map(|_| {
                    let w = white();
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    out
                })
                .collect()
        }
        NoiseKind::HumWhite => {
            let fs = SAMPLE_RATE as f64;
            let phases: Vec<f64> = (0..4).map(|_| white() * std::f64::consts::PI).collect();
            (0..len)
                .map(|n| {
                    let t = n as f64 / fs;
                    let hum: f64 = (1..=4)
                        .map(|h| {
                            let amp = 1.0 / h as f64;
                            amp * (2.0 * std::f64::consts::PI * 120.0 * h as f64 * t + phases[h - 1]).sin()
                        })
                        .sum();
                    2.0 * hum + 0.3 * white()
                })
                .collect()
        }
    }
}

/// White noise through a slowly varying all-pole (order 8) filter, with a
/// 2-8 Hz syllabic amplitude modulation and occasional pauses.
///
/// The filter is a lattice whose reflection coefficients are interpolated
/// between random targets every 50 ms, so it stays stable throughout.
pub fn speechlike(len: usize, seed: u64) -> Vec<f64> {
    const ORDER: usize = 8;
    let fs = SAMPLE_RATE as f64;
    let seg = (0.05 * fs) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_k = |rng: &mut ChaCha8Rng| -> [f64; ORDER] {
        let mut k = [0.0; ORDER];
        for (i, v) in k.iter_mut().enumerate() {
            let lim = if i < 2 { 0.95 } else { 0.6 };
            *v = rng.gen_range(-lim..lim);
        }
        k
    };
    let mut k_from = draw_k(&mut rng);
    let mut k_to = draw_k(&mut rng);
    let mod_rate = rng.gen_range(2.0..8.0);
    let mod_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pause_left = 0usize;

    let mut b = [0.0f64; ORDER + 1];
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        if n > 0 && n % seg == 0 {
            k_from = k_to;
            k_to = draw_k(&mut rng);
            if pause_left == 0 && rng.gen_bool(0.06) {
                pause_left = rng.gen_range(2..6) * seg;
            }
        }
        let a = (n % seg) as f64 / seg as f64;
        let mut k = [0.0; ORDER];
        for i in 0..ORDER {
            k[i] = (1.0 - a) * k_from[i] + a * k_to[i];
        }
        // all-pole lattice
        let e: f64 = StandardNormal.sample(&mut rng);
        let mut f = e;
        for i in (0..ORDER).rev() {
            f -= k[i] * b[i];
            b[i + 1] = b[i] + k[i] * f;
        }
        b[0] = f;
        let t = n as f64 / fs;
        let env = 0.5 * (1.0 - (std::f64::consts::TAU * mod_rate * t + mod_phase).cos());
        let gate = if pause_left > 0 {
            pause_left -= 1;
            0.02
        } else {
            1.0
        };
        out.push(f * env * env * gate);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}
