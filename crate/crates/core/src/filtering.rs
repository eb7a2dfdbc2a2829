//! Applying estimated filters, plus a least-squares oracle filter.
//!
//! Multi-frame filters are applied with a plain (unconjugated) transpose,
//! `Y(t, f) = sum_m w(t, f, m) * x(t, f, m)`.

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::features::MultiFrameStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    MultiFrame,
    Mask,
    Mapping,
}

/// Output of a network head.
#[derive(Debug, Clone, PartialEq)]
pub enum DeepFilter {
    /// `(t, f, tap)`, `2L + 1` taps.
    MultiFrame(Array3<Complex64>),
    /// One complex gain per bin.
    Mask(Array2<Complex64>),
    /// The enhanced spectrum itself.
    Mapping(Array2<Complex64>),
}

impl DeepFilter {
    pub fn kind(&self) -> FilterKind {
        match self {
            DeepFilter::MultiFrame(_) => FilterKind::MultiFrame,
            DeepFilter::Mask(_) => FilterKind::Mask,
            DeepFilter::Mapping(_) => FilterKind::Mapping,
        }
    }

    /// One-hot filter on the current frame.
    pub fn identity(frames: usize, bins: usize, half_width: usize) -> Self {
        let mut w = Array3::zeros((frames, bins, 2 * half_width + 1));
        for t in 0..frames {
            for f in 0..bins {
                w[[t, f, half_width]] = Complex64::new(1.0, 0.0);
            }
        }
        DeepFilter::MultiFrame(w)
    }

    pub fn is_finite(&self) -> bool {
        let ok = |v: &Complex64| v.re.is_finite() && v.im.is_finite();
        match self {
            DeepFilter::MultiFrame(w) => w.iter().all(ok),
            DeepFilter::Mask(w) | DeepFilter::Mapping(w) => w.iter().all(ok),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSpectrum {
    /// `(t, f)`.
    pub values: Array2<Complex64>,
    pub kind: FilterKind,
}

pub fn apply_filter(w: &DeepFilter, stack: &MultiFrameStack) -> Result<FilteredSpectrum> {
    let (frames, bins, taps) = stack.taps.dim();
    let values = match w {
        DeepFilter::MultiFrame(w) => {
            if w.dim() != (frames, bins, taps) {
                return Err(Error::Shape(format!(
                    "filter {:?} does not match stack {:?}",
                    w.dim(),
                    stack.taps.dim()
                )));
            }
            Array2::from_shape_fn((frames, bins), |(t, f)| {
                (0..taps).map(|m| w[[t, f, m]] * stack.taps[[t, f, m]]).sum()
            })
        }
        DeepFilter::Mask(m) => {
            check_2d(m, frames, bins)?;
            let center = stack.center();
            m * &center
        }
        DeepFilter::Mapping(y) => {
            check_2d(y, frames, bins)?;
            y.clone()
        }
    };
    Ok(FilteredSpectrum {
        values,
        kind: w.kind(),
    })
}

fn check_2d(a: &Array2<Complex64>, frames: usize, bins: usize) -> Result<()> {
    if a.dim() != (frames, bins) {
        return Err(Error::Shape(format!(
            "expected ({frames}, {bins}), got {:?}",
            a.dim()
        )));
    }
    Ok(())
}

/// Relative Tikhonov weight: `lambda = REG * trace(A^H A) / taps`.
pub const ORACLE_REGULARIZATION: f64 = 1e-6;

/// Least-squares filter minimising `|A w - y|^2 + lambda |w|^2`, where the
/// rows of `A` are stack vectors across time. With `per_frequency` one filter
/// is solved for each bin; otherwise a single filter serves all bins. The
/// result is time-invariant and broadcast over frames. Intended for tests and
/// diagnostics.
pub fn oracle_ls_filter(
    stack: &MultiFrameStack,
    target: &Array2<Complex64>,
    per_frequency: bool,
) -> Result<DeepFilter> {
    let (frames, bins, taps) = stack.taps.dim();
    check_2d(target, frames, bins)?;
    let mut w = Array3::<Complex64>::zeros((frames, bins, taps));
    let groups: Vec<Vec<usize>> = if per_frequency {
        (0..bins).map(|f| vec![f]).collect()
    } else {
        vec![(0..bins).collect()]
    };
    for group in groups {
        let (gram, rhs) = normal_equations(stack, target, &group);
        let lambda = regularization(&gram);
        let solution = solve_regularized(&gram, &rhs, lambda)?;
        for &f in &group {
            for t in 0..frames {
                for m in 0..taps {
                    w[[t, f, m]] = solution[m];
                }
            }
        }
    }
    Ok(DeepFilter::MultiFrame(w))
}

/// `(A^H A, A^H y)` accumulated over the given bins.
fn normal_equations(
    stack: &MultiFrameStack,
    target: &Array2<Complex64>,
    bins: &[usize],
) -> (Array2<Complex64>, Vec<Complex64>) {
    let (frames, _, taps) = stack.taps.dim();
    let mut gram = Array2::<Complex64>::zeros((taps, taps));
    let mut rhs = vec![Complex64::new(0.0, 0.0); taps];
    for &f in bins {
        for t in 0..frames {
            let y = target[[t, f]];
            for i in 0..taps {
                let ai = stack.taps[[t, f, i]].conj();
                rhs[i] += ai * y;
                for j in 0..taps {
                    gram[[i, j]] += ai * stack.taps[[t, f, j]];
                }
            }
        }
    }
    (gram, rhs)
}

fn regularization(gram: &Array2<Complex64>) -> f64 {
    let taps = gram.nrows();
    let trace: f64 = (0..taps).map(|i| gram[[i, i]].re).sum();
    let lambda = ORACLE_REGULARIZATION * trace / taps as f64;
    // An all-zero stack still needs a solvable system.
    if lambda > 0.0 {
        lambda
    } else {
        ORACLE_REGULARIZATION
    }
}

/// Solves `(G + lambda I) w = b` for Hermitian positive semidefinite `G`
/// by Cholesky factorisation.
fn solve_regularized(gram: &Array2<Complex64>, b: &[Complex64], lambda: f64) -> Result<Vec<Complex64>> {
    let n = gram.nrows();
    let mut l = Array2::<Complex64>::zeros((n, n));
    for j in 0..n {
        let mut d = gram[[j, j]].re + lambda;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > 0.0) {
            return Err(Error::Numerical(format!(
                "normal equations not positive definite (pivot {d})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = gram[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / d;
        }
    }
    // L y = b
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    // L^H w = y
    let mut w = vec![Complex64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]].conj() * w[k];
        }
        w[i] = s / l[[i, i]];
    }
    Ok(w)
}

/// The regularized objective minimised by [`oracle_ls_filter`] for one bin and
/// a given tap vector.
pub fn ls_objective(stack: &MultiFrameStack, target: &Array2<Complex64>, bin: usize, w: &[Complex64]) -> f64 {
    let (frames, _, taps) = stack.taps.dim();
    let (gram, _) = normal_equations(stack, target, &[bin]);
    let lambda = regularization(&gram);
    let residual: f64 = (0..frames)
        .map(|t| {
            let y: Complex64 = (0..taps).map(|m| w[m] * stack.taps[[t, bin, m]]).sum();
            (y - target[[t, bin]]).norm_sqr()
        })
        .sum();
    residual + lambda * w.iter().map(|v| v.norm_sqr()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_stack_from;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    fn random_spec(frames: usize, bins: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((frames, bins), |_| rand_c(&mut rng))
    }

    #[test]
    fn identity_and_scaled_center_tap() {
        let x = random_spec(9, 5, 1);
        let stack = build_stack_from(&x, 3);
        let y = apply_filter(&DeepFilter::identity(9, 5, 3), &stack).unwrap();
        assert_eq!(y.values, x);
        let DeepFilter::MultiFrame(mut w) = DeepFilter::identity(9, 5, 3) else {
            unreachable!()
        };
        w.mapv_inplace(|v| v * 0.5);
        let y = apply_filter(&DeepFilter::MultiFrame(w), &stack).unwrap();
        for (a, b) in y.values.iter().zip(x.iter()) {
            assert!((a - b * 0.5).norm() == 0.0);
        }
    }

    #[test]
    fn random_filter_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_spec(12, 6, 3);
        let stack = build_stack_from(&x, 3);
        let w = Array3::from_shape_fn((12, 6, 7), |_| rand_c(&mut rng));
        let y = apply_filter(&DeepFilter::MultiFrame(w.clone()), &stack).unwrap();
        for t in 0..12 {
            for f in 0..6 {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..7 {
                    let src = t as isize - 3 + m as isize;
                    if (0..12).contains(&src) {
                        acc += w[[t, f, m]] * x[[src as usize, f]];
                    }
                }
                assert!((acc - y.values[[t, f]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_equals_single_tap_filter() {
        let x = random_spec(7, 4, 4);
        let mask = random_spec(7, 4, 5);
        let via_mask = apply_filter(&DeepFilter::Mask(mask.clone()), &build_stack_from(&x, 2)).unwrap();
        let taps = mask.clone().into_shape_with_order((7, 4, 1)).unwrap();
        let via_mf = apply_filter(&DeepFilter::MultiFrame(taps), &build_stack_from(&x, 0)).unwrap();
        assert_eq!(via_mask.values, via_mf.values);
        let mapped = apply_filter(&DeepFilter::Mapping(mask.clone()), &build_stack_from(&x, 0)).unwrap();
        assert_eq!(mapped.values, mask);
    }

    #[test]
    fn tap_mismatch_is_rejected() {
        let x = random_spec(7, 4, 6);
        let err = apply_filter(&DeepFilter::identity(7, 4, 1), &build_stack_from(&x, 3));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn oracle_recovers_identity() {
        let x = random_spec(40, 6, 7);
        let stack = build_stack_from(&x, 3);
        let DeepFilter::MultiFrame(w) = oracle_ls_filter(&stack, &x, true).unwrap() else {
            unreachable!()
        };
        for f in 0..6 {
            for m in 0..7 {
                let expect = if m == 3 { 1.0 } else { 0.0 };
                assert!((w[[0, f, m]] - Complex64::new(expect, 0.0)).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn oracle_zero_target_gives_zero_filter() {
        let x = random_spec(20, 3, 8);
        let stack = build_stack_from(&x, 2);
        let DeepFilter::MultiFrame(w) = oracle_ls_filter(&stack, &Array2::zeros((20, 3)), true).unwrap() else {
            unreachable!()
        };
        assert!(w.iter().all(|v| v.norm() < 1e-6));
        // an all-zero stack must not fail either
        let zero = build_stack_from(&Array2::zeros((5, 2)), 1);
        assert!(oracle_ls_filter(&zero, &Array2::zeros((5, 2)), false).is_ok());
    }

    #[test]
    fn oracle_is_a_minimiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_spec(30, 4, 10);
        let target = random_spec(30, 4, 11);
        let stack = build_stack_from(&x, 2);
        let DeepFilter::MultiFrame(w) = oracle_ls_filter(&stack, &target, true).unwrap() else {
            unreachable!()
        };
        for f in 0..4 {
            let best: Vec<Complex64> = (0..5).map(|m| w[[0, f, m]]).collect();
            let j0 = ls_objective(&stack, &target, f, &best);
            for _ in 0..20 {
                let mut delta: Vec<Complex64> = (0..5).map(|_| rand_c(&mut rng)).collect();
                let norm = delta.iter().map(|d| d.norm_sqr()).sum::<f64>().sqrt();
                delta.iter_mut().for_each(|d| *d *= 1e-2 / norm);
                let moved: Vec<Complex64> = best.iter().zip(&delta).map(|(a, b)| a + b).collect();
                assert!(ls_objective(&stack, &target, f, &moved) >= j0);
            }
        }
    }
}
