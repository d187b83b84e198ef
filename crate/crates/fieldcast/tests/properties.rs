//! Randomized invariant checks: properties that must hold for every input,
//! probed over generated shapes, values, and coefficients.

use fieldcast::dataset::{assign_splits, split_dataset, SplitFractions};
use fieldcast::evolve::evolve_momentum;
use fieldcast::io::{decode_field, encode_field, ManifestEntry, Split, DEFAULT_STEP_HOURS};
use fieldcast::mask::{splat_energy, SplatMode};
use fieldcast::metrics::{metric_corr, metric_ssim, SsimConfig};
use fieldcast::warp::{advect, KernelConfig};
use fieldcast::{ScalarField, Sequence, VectorField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_field(h: usize, w: usize, scale: f64, rng: &mut ChaCha20Rng) -> ScalarField {
    ScalarField::from_fn(h, w, |_, _| rng.gen_range(-scale..scale))
}

fn random_flow(h: usize, w: usize, scale: f64, rng: &mut ChaCha20Rng) -> VectorField {
    VectorField::from_fn(h, w, |_, _| {
        (rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Encoding stores frames as f32; any f32-representable sequence must
    /// survive a byte round trip exactly.
    #[test]
    fn fgrd_bytes_round_trip(
        frames in 1..4usize,
        h in 1..10usize,
        w in 1..10usize,
        seed in 0..u64::MAX,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let stack: Vec<ScalarField> = (0..frames)
            .map(|_| {
                ScalarField::from_fn(h, w, |_, _| rng.gen_range(-1e6f32..1e6) as f64)
            })
            .collect();
        let seq = Sequence::new(stack, DEFAULT_STEP_HOURS).unwrap();
        let decoded = decode_field(&encode_field(&seq).unwrap()).unwrap();
        prop_assert_eq!(decoded.len(), seq.len());
        prop_assert_eq!(decoded.shape(), seq.shape());
        for (a, b) in decoded.frames().iter().zip(seq.frames()) {
            prop_assert_eq!(a.data(), b.data());
        }
    }

    /// Every source pixel carries one unit of energy; whatever does not
    /// land on the grid is accounted as discarded, so the total is the
    /// pixel count no matter the flow or splat mode.
    #[test]
    fn splat_energy_is_conserved(
        h in 1..12usize,
        w in 1..12usize,
        scale in 0.0..8.0f64,
        seed in 0..u64::MAX,
        nearest in any::<bool>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let flow = random_flow(h, w, scale.max(1e-9), &mut rng);
        let mode = if nearest { SplatMode::Nearest } else { SplatMode::Bilinear };
        let energy = splat_energy(&flow, mode);
        let n = (h * w) as f64;
        prop_assert!(
            (energy.total() - n).abs() <= 1e-9 * n,
            "total {} for {} pixels", energy.total(), n
        );
    }

    /// Advection is linear in the source frame and, with zero padding,
    /// every output pixel is a convex combination of source values and
    /// zero — so it can never exceed the source's extreme magnitudes.
    #[test]
    fn advect_is_linear_and_bounded(
        h in 4..12usize,
        w in 4..12usize,
        kappa in 0.0..0.5f64,
        alpha in -2.0..2.0f64,
        seed in 0..u64::MAX,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let f = random_field(h, w, 2.0, &mut rng);
        let g = random_field(h, w, 2.0, &mut rng);
        let flow = random_flow(h, w, 2.0, &mut rng);
        let kernel = KernelConfig::new(kappa);

        let combined = ScalarField::from_fn(h, w, |y, x| alpha * f.get(y, x) + g.get(y, x));
        let warped_combined = advect(&combined, &flow, &kernel).unwrap();
        let warped_f = advect(&f, &flow, &kernel).unwrap();
        let warped_g = advect(&g, &flow, &kernel).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = alpha * warped_f.get(y, x) + warped_g.get(y, x);
                prop_assert!(
                    (warped_combined.get(y, x) - expect).abs() <= 1e-9,
                    "linearity broke at ({}, {})", y, x
                );
            }
        }
        prop_assert!(warped_f.max_abs() <= f.max_abs() * (1.0 + 1e-12));
    }

    /// Split assignment is an ordered partition: counts come from the floor
    /// rule, and after sorting by timestamp the earliest block is train,
    /// then val, then test.
    #[test]
    fn split_assignment_partitions_chronologically(
        n in 0..40usize,
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
        seed in 0..u64::MAX,
    ) {
        let fractions = SplitFractions {
            train: a,
            val: b * (1.0 - a),
            test: (1.0 - a) * (1.0 - b),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut entries: Vec<ManifestEntry> = (0..n)
            .map(|i| ManifestEntry {
                path: format!("seq_{i:03}.fgrd"),
                start_timestamp: rng.gen_range(-1000..1000),
                split: Split::Test,
            })
            .collect();

        let (n_train, n_val, n_test) = assign_splits(&mut entries, fractions).unwrap();
        prop_assert_eq!(split_dataset(n, fractions).unwrap(), (n_train, n_val, n_test));
        prop_assert_eq!(n_train + n_val + n_test, n);
        for pair in entries.windows(2) {
            prop_assert!(pair[0].start_timestamp <= pair[1].start_timestamp);
        }
        for (i, e) in entries.iter().enumerate() {
            let expect = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            prop_assert_eq!(e.split, expect);
        }
    }

    /// The momentum rule blends two flows with weights (1-beta, beta), so
    /// each output component stays inside the interval its inputs span,
    /// with the endpoints reproduced exactly.
    #[test]
    fn momentum_evolution_is_a_convex_combination(
        h in 2..10usize,
        w in 2..10usize,
        beta in 0.0..=1.0f64,
        seed in 0..u64::MAX,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let carry = random_flow(h, w, 3.0, &mut rng);
        let dw = random_flow(h, w, 3.0, &mut rng);
        let out = evolve_momentum(&carry, &dw, beta).unwrap();
        for y in 0..h {
            for x in 0..w {
                for (got, lhs, rhs) in [
                    (out.u(y, x), carry.u(y, x), dw.u(y, x)),
                    (out.v(y, x), carry.v(y, x), dw.v(y, x)),
                ] {
                    prop_assert!(got >= lhs.min(rhs) - 1e-12 && got <= lhs.max(rhs) + 1e-12);
                }
            }
        }
        let ends = evolve_momentum(&carry, &dw, 0.0).unwrap();
        prop_assert_eq!(ends.u_data(), dw.u_data());
        let ends = evolve_momentum(&carry, &dw, 1.0).unwrap();
        prop_assert_eq!(ends.u_data(), carry.u_data());
    }

    /// Similarity scores are symmetric in their arguments and bounded by 1
    /// in magnitude for any pair of (non-constant) fields.
    #[test]
    fn similarity_metrics_are_symmetric_and_bounded(
        h in 11..20usize,
        w in 11..20usize,
        seed in 0..u64::MAX,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = random_field(h, w, 5.0, &mut rng);
        let b = random_field(h, w, 5.0, &mut rng);
        let cfg = SsimConfig::for_range(10.0);

        let s_ab = metric_ssim(&a, &b, &cfg).unwrap();
        let s_ba = metric_ssim(&b, &a, &cfg).unwrap();
        prop_assert!((s_ab - s_ba).abs() <= 1e-12);
        prop_assert!(s_ab.abs() <= 1.0 + 1e-12);

        let c_ab = metric_corr(&a, &b).unwrap();
        let c_ba = metric_corr(&b, &a).unwrap();
        prop_assert!((c_ab - c_ba).abs() <= 1e-12);
        prop_assert!(c_ab.abs() <= 1.0 + 1e-12);
    }
}
