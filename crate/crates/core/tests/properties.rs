use ifcorrnet::features::{build_stack_from, correlate, phat_beta};
use ifcorrnet::filtering::{apply_filter, DeepFilter};
use ifcorrnet::signal::{istft, stft, StftConfig};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;

fn spectrum(frames: usize, bins: usize, vals: &[(f64, f64)]) -> Array2<Complex64> {
    Array2::from_shape_fn((frames, bins), |(t, f)| {
        let (re, im) = vals[(t * bins + f) % vals.len()];
        Complex64::new(re, im)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_round_trip(x in prop::collection::vec(-1.0f64..1.0, 600..4000), hop in prop::sample::select(vec![128usize, 256])) {
        let cfg = StftConfig::new(512, hop).unwrap();
        let y = istft(&stft(&x, cfg).unwrap()).unwrap();
        prop_assert_eq!(y.len(), x.len());
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-9, "max error {err}");
    }

    #[test]
    fn phat_beta_keeps_phase_and_compresses(re in -1e3f64..1e3, im in -1e3f64..1e3, beta in 0.0f64..=1.0) {
        let z = Complex64::new(re, im);
        prop_assume!(z.norm() > 1e-6);
        let w = phat_beta(z, beta, 1e-8);
        prop_assert!((w.norm() - z.norm().powf(1.0 - beta)).abs() <= 1e-9 * w.norm().max(1.0));
        prop_assert!((w.arg() - z.arg()).abs() <= 1e-9);
    }

    #[test]
    fn correlation_is_hermitian_rank_one(vals in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..64), l in 0usize..4) {
        let x = spectrum(7, 5, &vals);
        let z = correlate(&build_stack_from(&x, l)).matrices;
        let (frames, bins, taps, _) = z.dim();
        for t in 0..frames {
            for f in 0..bins {
                // Trace equals the stack energy; every 2x2 minor vanishes.
                let mut trace = 0.0;
                for m in 0..taps {
                    trace += z[[t, f, m, m]].re;
                    for n in 0..taps {
                        prop_assert!((z[[t, f, m, n]] - z[[t, f, n, m]].conj()).norm() <= 1e-12);
                        let minor = z[[t, f, m, m]] * z[[t, f, n, n]] - z[[t, f, m, n]] * z[[t, f, n, m]];
                        prop_assert!(minor.norm() <= 1e-9);
                    }
                }
                prop_assert!(trace >= 0.0);
            }
        }
    }

    #[test]
    fn identity_filter_returns_center(vals in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..64), l in 0usize..4) {
        let x = spectrum(9, 6, &vals);
        let stack = build_stack_from(&x, l);
        let y = apply_filter(&DeepFilter::identity(9, 6, l), &stack).unwrap();
        prop_assert_eq!(y.values, x);
    }
}
