//! Multi-frame stacks, inter-frame correlation matrices and network inputs.

use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::signal::Spectrogram;

/// Default PHAT-β exponent.
pub const DEFAULT_BETA: f64 = 0.5;
/// Magnitude floor used by [`phat_beta_weight`].
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// For every `(t, f)` the vector `[X(t-L, f), ..., X(t, f), ..., X(t+L, f)]`.
/// Frames outside the utterance are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFrameStack {
    /// Indexed `(t, f, tap)`.
    pub taps: Array3<Complex64>,
    pub half_width: usize,
}

impl MultiFrameStack {
    pub fn tap_count(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn frames(&self) -> usize {
        self.taps.dim().0
    }

    pub fn bins(&self) -> usize {
        self.taps.dim().1
    }

    /// The current-frame spectrum (center tap).
    pub fn center(&self) -> Array2<Complex64> {
        self.taps.index_axis(Axis(2), self.half_width).to_owned()
    }
}

pub fn build_stack(x: &Spectrogram, half_width: usize) -> MultiFrameStack {
    build_stack_from(&x.values, half_width)
}

pub fn build_stack_from(x: &Array2<Complex64>, half_width: usize) -> MultiFrameStack {
    let (frames, bins) = x.dim();
    let taps = 2 * half_width + 1;
    let mut out = Array3::<Complex64>::zeros((frames, bins, taps));
    for t in 0..frames {
        for m in 0..taps {
            let src = t as isize - half_width as isize + m as isize;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let row = x.row(src as usize);
            for f in 0..bins {
                out[[t, f, m]] = row[f];
            }
        }
    }
    MultiFrameStack {
        taps: out,
        half_width,
    }
}

/// Per-bin `(2L+1) x (2L+1)` matrices, indexed `(t, f, m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    pub matrices: Array4<Complex64>,
    /// `Some(beta)` once PHAT-β weighting has been applied.
    pub beta: Option<f64>,
    pub epsilon: f64,
}

impl CorrelationTensor {
    pub fn tap_count(&self) -> usize {
        self.matrices.dim().2
    }
}

/// `Z = x x^H` for every bin: `Z[m, n] = x[m] * conj(x[n])`.
pub fn correlate(stack: &MultiFrameStack) -> CorrelationTensor {
    let (frames, bins, taps) = stack.taps.dim();
    let mut z = Array4::<Complex64>::zeros((frames, bins, taps, taps));
    for t in 0..frames {
        for f in 0..bins {
            for m in 0..taps {
                let xm = stack.taps[[t, f, m]];
                for n in 0..taps {
                    z[[t, f, m, n]] = xm * stack.taps[[t, f, n]].conj();
                }
            }
        }
    }
    CorrelationTensor {
        matrices: z,
        beta: None,
        epsilon: DEFAULT_EPSILON,
    }
}

#[inline]
pub fn phat_beta(z: Complex64, beta: f64, epsilon: f64) -> Complex64 {
    if beta == 0.0 {
        return z;
    }
    z / z.norm().max(epsilon).powf(beta)
}

/// `z <- z / max(|z|, eps)^beta` entrywise.
pub fn phat_beta_weight(z: &CorrelationTensor, beta: f64, epsilon: f64) -> Result<CorrelationTensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(CorrelationTensor {
        matrices: z.matrices.mapv(|v| phat_beta(v, beta, epsilon)),
        beta: Some(beta),
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputLayout {
    /// Real parts of `Z[m, n]` row-major, then imaginary parts in the same order.
    RealBlockThenImagBlock,
    /// `[Re X; Im X]`.
    RawRealImag,
}

impl InputLayout {
    pub fn descriptor(self) -> &'static str {
        match self {
            InputLayout::RealBlockThenImagBlock => "real-block-then-imag-block/row-major(m,n)",
            InputLayout::RawRealImag => "raw/real,imag",
        }
    }
}

/// Real-valued network input, shape `(channels, T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput {
    pub tensor: Array3<f64>,
    pub layout: InputLayout,
}

impl NetworkInput {
    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }
}

pub fn correlation_channels(half_width: usize) -> usize {
    let taps = 2 * half_width + 1;
    2 * taps * taps
}

pub fn flatten_input(z: &CorrelationTensor) -> NetworkInput {
    let (frames, bins, taps, _) = z.matrices.dim();
    let block = taps * taps;
    let mut out = Array3::<f64>::zeros((2 * block, frames, bins));
    for t in 0..frames {
        for f in 0..bins {
            for m in 0..taps {
                for n in 0..taps {
                    let v = z.matrices[[t, f, m, n]];
                    let c = m * taps + n;
                    out[[c, t, f]] = v.re;
                    out[[block + c, t, f]] = v.im;
                }
            }
        }
    }
    NetworkInput {
        tensor: out,
        layout: InputLayout::RealBlockThenImagBlock,
    }
}

/// Inverse of [`flatten_input`].
pub fn unflatten_input(input: &NetworkInput) -> Result<Array4<Complex64>> {
    if input.layout != InputLayout::RealBlockThenImagBlock {
        return Err(invalid("only correlation inputs can be unflattened"));
    }
    let (channels, frames, bins) = input.tensor.dim();
    let block = channels / 2;
    let taps = (block as f64).sqrt().round() as usize;
    if taps * taps * 2 != channels {
        return Err(Error::Shape(format!(
            "{channels} channels is not 2(2L+1)^2"
        )));
    }
    let mut z = Array4::<Complex64>::zeros((frames, bins, taps, taps));
    for t in 0..frames {
        for f in 0..bins {
            for c in 0..block {
                z[[t, f, c / taps, c % taps]] =
                    Complex64::new(input.tensor[[c, t, f]], input.tensor[[block + c, t, f]]);
            }
        }
    }
    Ok(z)
}

pub fn raw_input(x: &Spectrogram) -> NetworkInput {
    let (frames, bins) = x.values.dim();
    let mut out = Array3::<f64>::zeros((2, frames, bins));
    for ((t, f), v) in x.values.indexed_iter() {
        out[[0, t, f]] = v.re;
        out[[1, t, f]] = v.im;
    }
    NetworkInput {
        tensor: out,
        layout: InputLayout::RawRealImag,
    }
}

/// Weighted correlation features written channel-last, `(T, F, 2(2L+1)^2)`,
/// in the same channel order as [`flatten_input`]. Skips the 4-D intermediate.
pub fn correlation_features_channel_last(
    stack: &MultiFrameStack,
    beta: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    let (frames, bins, taps) = stack.taps.dim();
    let block = taps * taps;
    let channels = 2 * block;
    let mut out = vec![0.0; frames * bins * channels];
    for t in 0..frames {
        for f in 0..bins {
            let base = (t * bins + f) * channels;
            for m in 0..taps {
                let xm = stack.taps[[t, f, m]];
                for n in 0..taps {
                    let v = phat_beta(xm * stack.taps[[t, f, n]].conj(), beta, epsilon);
                    out[base + m * taps + n] = v.re;
                    out[base + block + m * taps + n] = v.im;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(frames: usize, bins: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((frames, bins), |_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn degenerate_stack_is_the_spectrogram() {
        let x = random_spec(6, 4, 1);
        let s = build_stack_from(&x, 0);
        assert_eq!(s.tap_count(), 1);
        for ((t, f), v) in x.indexed_iter() {
            assert_eq!(s.taps[[t, f, 0]], *v);
        }
    }

    #[test]
    fn stack_boundaries_and_interior() {
        let x = random_spec(10, 3, 2);
        let s = build_stack_from(&x, 3);
        for f in 0..3 {
            for m in 0..3 {
                assert_eq!(s.taps[[0, f, m]], c(0.0, 0.0));
            }
            assert_eq!(s.taps[[0, f, 3]], x[[0, f]]);
            // 1-based t=5 is index 4
            for m in 0..7 {
                assert_eq!(s.taps[[4, f, m]], x[[4 - 3 + m, f]]);
            }
            assert_eq!(s.taps[[9, f, 6]], c(0.0, 0.0));
        }
        assert_eq!(s.center(), x);
    }

    #[test]
    fn two_tap_outer_product() {
        let stack = MultiFrameStack {
            taps: Array3::from_shape_vec((1, 1, 2), vec![c(1.0, 0.0), c(0.0, 1.0)]).unwrap(),
            half_width: 0,
        };
        let z = correlate(&stack);
        let expect = [[c(1.0, 0.0), c(0.0, -1.0)], [c(0.0, 1.0), c(1.0, 0.0)]];
        for m in 0..2 {
            for n in 0..2 {
                assert_eq!(z.matrices[[0, 0, m, n]], expect[m][n]);
            }
        }
    }

    #[test]
    fn correlation_matches_double_loop() {
        let x = random_spec(8, 5, 3);
        let s = build_stack_from(&x, 2);
        let z = correlate(&s);
        for t in 0..8 {
            for f in 0..5 {
                for m in 0..5 {
                    assert!(z.matrices[[t, f, m, m]].im == 0.0 && z.matrices[[t, f, m, m]].re >= 0.0);
                    for n in 0..5 {
                        let ti = t as isize - 2 + m as isize;
                        let tj = t as isize - 2 + n as isize;
                        let get = |ti: isize| {
                            if ti < 0 || ti >= 8 {
                                c(0.0, 0.0)
                            } else {
                                x[[ti as usize, f]]
                            }
                        };
                        let expect = get(ti) * get(tj).conj();
                        assert_eq!(z.matrices[[t, f, m, n]], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn phat_beta_examples() {
        let one = |v: Complex64, b: f64| phat_beta(v, b, DEFAULT_EPSILON);
        assert_eq!(one(c(4.0, 0.0), 0.5), c(2.0, 0.0));
        assert_eq!(one(c(3.0, -4.0), 0.0), c(3.0, -4.0));
        let u = one(c(3.0, -4.0), 1.0);
        assert!((u - c(0.6, -0.8)).norm() < 1e-15);
        assert_eq!(one(c(0.0, 0.0), 1.0), c(0.0, 0.0));

        let z = correlate(&build_stack_from(&random_spec(3, 3, 4), 1));
        assert!(phat_beta_weight(&z, 1.5, 1e-8).is_err());
        assert!(phat_beta_weight(&z, -0.1, 1e-8).is_err());
        assert!(phat_beta_weight(&z, 0.5, 0.0).is_err());
        let id = phat_beta_weight(&z, 0.0, 1e-8).unwrap();
        assert_eq!(id.matrices, z.matrices);
    }

    #[test]
    fn flatten_layout_and_inverse() {
        let x = random_spec(5, 4, 5);
        let z = phat_beta_weight(&correlate(&build_stack_from(&x, 3)), 0.5, 1e-8).unwrap();
        let inp = flatten_input(&z);
        assert_eq!(inp.channels(), 98);
        for m in 0..7 {
            let diag = 49 + m * 7 + m;
            assert!(inp.tensor.index_axis(Axis(0), diag).iter().all(|v| *v == 0.0));
        }
        assert_eq!(unflatten_input(&inp).unwrap(), z.matrices);

        let stack = build_stack_from(&x, 3);
        let fast = correlation_features_channel_last(&stack, 0.5, 1e-8).unwrap();
        for t in 0..5 {
            for f in 0..4 {
                for ch in 0..98 {
                    assert_eq!(fast[(t * 4 + f) * 98 + ch], inp.tensor[[ch, t, f]]);
                }
            }
        }
    }

    #[test]
    fn raw_input_of_real_and_impulse_spectra() {
        let x = random_spec(4, 3, 6).mapv(|v| c(v.re, 0.0));
        let spec = Spectrogram {
            values: x,
            config: StftConfig::default(),
            window: crate::signal::Window::PeriodicHann,
            signal_len: None,
        };
        let raw = raw_input(&spec);
        assert_eq!(raw.tensor.dim(), (2, 4, 3));
        assert!(raw.tensor.index_axis(Axis(0), 1).iter().all(|v| *v == 0.0));

        // Impulse at sample 1024 = center of frame 4: that frame's spectrum is
        // w[256] * exp(-i pi k) = (-1)^k, computed here by direct DFT.
        let mut imp = vec![0.0; 4096];
        imp[1024] = 1.0;
        let spec = stft(&imp, StftConfig::default()).unwrap();
        let raw = raw_input(&spec);
        let w = crate::signal::hann(512);
        for k in 0..257 {
            let mut acc = c(0.0, 0.0);
            for n in 0..512 {
                if 4 * 256 + n == 1024 + 256 {
                    acc += Complex64::from_polar(w[n], -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0);
                }
            }
            assert!((raw.tensor[[0, 4, k]] - acc.re).abs() < 1e-12);
        }
    }
}
