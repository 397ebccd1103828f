use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srom_core::io::{decode_matrix, encode_matrix};
use srom_core::latent::{energy_error, feature_map_g};
use srom_core::linalg::thin_qr;
use srom_core::sampler::{dirichlet_draw, sample_rng, solve_concentration};
use srom_core::stiefel::{geodesic_distance, riemann_exp, riemann_log};
use srom_core::uq::quantile_sorted;
use srom_core::{ConstraintMatrix, PipelineConfig, StiefelPoint, TangentVector};

/// Random point with zero first and last rows, so it satisfies the endpoint constraint.
fn constrained_point(n: usize, k: usize, seed: u64) -> StiefelPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    a.row_mut(0).fill(0.0);
    a.row_mut(n - 1).fill(0.0);
    let q = thin_qr(&a).0;
    StiefelPoint::new(q, Some(Arc::new(ConstraintMatrix::dirichlet_endpoints(n)))).unwrap()
}

fn direction(base: &StiefelPoint, norm: f64, seed: u64) -> TangentVector {
    let (n, k) = base.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    raw.row_mut(0).fill(0.0);
    raw.row_mut(n - 1).fill(0.0);
    let v = TangentVector::project(&raw, base.clone());
    let s = norm / v.norm();
    v.scaled(s)
}

fn spd(m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exp_log_round_trip(seed in any::<u64>(), norm in 0.05f64..1.0) {
        let base = constrained_point(24, 4, seed);
        let delta = direction(&base, norm, seed ^ 0x5eed);
        let target = riemann_exp(&base, &delta).unwrap();
        prop_assert!(target.orthonormality_residual() < 1e-10);
        prop_assert!(target.constraint_residual() < 1e-10);
        let back = riemann_log(&base, &target).unwrap();
        prop_assert!((back.matrix() - delta.matrix()).norm() < 1e-8);
    }

    #[test]
    fn geodesic_distance_is_symmetric(seed in any::<u64>(), norm in 0.05f64..0.8) {
        let a = constrained_point(20, 3, seed);
        let b = riemann_exp(&a, &direction(&a, norm, seed.wrapping_add(1))).unwrap();
        let dab = geodesic_distance(&a, &b).unwrap();
        let dba = geodesic_distance(&b, &a).unwrap();
        prop_assert!((dab - dba).abs() < 1e-8 * dab.max(1.0));
        prop_assert!((dab - norm).abs() < 1e-8);
    }

    #[test]
    fn concentration_lies_on_simplex(m in 1usize..6, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let h = spd(m, seed);
        let alpha = solve_concentration(&h).unwrap();
        prop_assert!((alpha.sum() - 1.0).abs() < 1e-10);
        prop_assert!(alpha.iter().all(|&a| a >= 1e-6 - 1e-15));
        let scaled = solve_concentration(&(&h * scale)).unwrap();
        prop_assert!((scaled - &alpha).amax() < 1e-8);
    }

    #[test]
    fn dirichlet_draws_lie_on_simplex(
        alpha in prop::collection::vec(1e-3f64..10.0, 1..6),
        seed in any::<u64>(),
        index in any::<u64>(),
    ) {
        let alpha = DVector::from_vec(alpha);
        let p = dirichlet_draw(&alpha, &mut sample_rng(seed, index));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = dirichlet_draw(&alpha, &mut sample_rng(seed, index));
        prop_assert_eq!(p, again);
    }

    #[test]
    fn quantiles_are_monotone(
        mut values in prop::collection::vec(-1e3f64..1e3, 1..60),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        values.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ql = quantile_sorted(&values, lo);
        let qh = quantile_sorted(&values, hi);
        prop_assert!(ql <= qh);
        prop_assert!(values[0] <= ql && qh <= values[values.len() - 1]);
    }

    #[test]
    fn matrix_encoding_round_trips(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1e6..1e6));
        let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
        prop_assert_eq!(m, back);
    }

    #[test]
    fn energy_error_is_nonincreasing(mut sigma in prop::collection::vec(0.0f64..100.0, 1..30)) {
        sigma.sort_by(|a, b| b.total_cmp(a));
        let sigma = DVector::from_vec(sigma);
        let errs: Vec<f64> = (0..=sigma.len()).map(|r| energy_error(&sigma, r)).collect();
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        prop_assert!(errs[sigma.len()].abs() < 1e-12);
    }

    #[test]
    fn feature_map_g_stacks_powers(s in prop::collection::vec(-2.0f64..2.0, 1..8), p in 1usize..5) {
        let r = s.len();
        let s = DVector::from_vec(s);
        let g = feature_map_g(&s, p);
        prop_assert_eq!(g.len(), r * (p - 1));
        for (block, degree) in (2..=p).enumerate() {
            for i in 0..r {
                prop_assert_eq!(g[block * r + i], s[i].powi(degree as i32));
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml(
        n_samples in 1usize..5000,
        seed in any::<u32>(),
        test_mu in 0.41f64..1.19,
        threshold in 1e-3f64..0.5,
    ) {
        let mut cfg = PipelineConfig::default();
        cfg.sampling.n_samples = n_samples;
        cfg.sampling.seed = seed as u64;
        cfg.propagation.test_mu = test_mu;
        cfg.ranks.energy_threshold = threshold;
        let text = cfg.to_toml_string().unwrap();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(back.to_toml_string().unwrap(), text);
        prop_assert_eq!(back.sampling.n_samples, n_samples);
        prop_assert_eq!(back.propagation.test_mu, test_mu);
    }
}
