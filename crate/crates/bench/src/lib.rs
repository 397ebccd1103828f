//! Inputs shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srom_core::linalg::thin_qr;
use srom_core::opinf::{FeatureSpecGhat, ReducedOperators};
use srom_core::stiefel::{riemann_exp, StiefelPoint, TangentVector};

pub fn random_point(n: usize, k: usize, seed: u64) -> StiefelPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    StiefelPoint::new(thin_qr(&a).0, None).expect("orthonormal")
}

/// A point at distance `dist` from `base` along a random direction.
pub fn nearby_point(base: &StiefelPoint, dist: f64, seed: u64) -> StiefelPoint {
    let (n, k) = base.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let delta = TangentVector::project(&raw, base.clone());
    let delta = delta.scaled(dist / delta.norm());
    riemann_exp(base, &delta).expect("exp")
}

/// Mildly damped random operators of the default shape.
pub fn random_operators(r: usize, seed: u64) -> (ReducedOperators, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = ReducedOperators::zeros(FeatureSpecGhat::new(r, 2));
    ops.c_hat = DVector::from_fn(r, |_, _| rng.random_range(-0.1..0.1));
    ops.a_hat = DMatrix::from_fn(r, r, |i, j| if i == j { -1.0 } else { rng.random_range(-0.1..0.1) });
    ops.h_hat = DMatrix::from_fn(r, r * r, |_, _| rng.random_range(-0.01..0.01));
    let d = ops.p_hat.ncols();
    ops.p_hat = DMatrix::from_fn(r, d, |_, _| rng.random_range(-0.001..0.001));
    let s0 = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
    (ops, s0)
}
