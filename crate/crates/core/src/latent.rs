//! Linear-plus-polynomial state representation
//! `s ~ s_ref + V_r s_hat + V_bar Xi g(s_hat)`.
//!
//! `V_r` and `V_bar` are the leading left singular vectors of the centered
//! snapshot matrix. `Xi` is fit by ridge regression with the reduced
//! coordinates held at their POD projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};
use crate::fom::SnapshotMatrix;
use crate::linalg::{left_svd, solve_spd, spd_condition};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub v_r: DMatrix<f64>,
    pub v_bar: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl ProjectionBasis {
    pub fn r(&self) -> usize {
        self.v_r.ncols()
    }

    pub fn q(&self) -> usize {
        self.v_bar.ncols()
    }

    pub fn n_states(&self) -> usize {
        self.v_r.nrows()
    }

    /// `[V_r | V_bar]`.
    pub fn full(&self) -> DMatrix<f64> {
        let (n, r, q) = (self.n_states(), self.r(), self.q());
        let mut m = DMatrix::zeros(n, r + q);
        m.columns_mut(0, r).copy_from(&self.v_r);
        m.columns_mut(r, q).copy_from(&self.v_bar);
        m
    }

    /// Split an `N x (r + q)` matrix into a basis with the given `r`.
    pub fn from_full(full: &DMatrix<f64>, r: usize, singular_values: DVector<f64>) -> Result<Self> {
        if r == 0 || r > full.ncols() {
            return Err(SromError::InvalidArgument(format!(
                "r = {r} incompatible with {} columns",
                full.ncols()
            )));
        }
        let q = full.ncols() - r;
        Ok(Self {
            v_r: full.columns(0, r).into_owned(),
            v_bar: full.columns(r, q).into_owned(),
            singular_values,
        })
    }
}

/// Fix the sign of each column so that its largest-magnitude entry is
/// positive. Makes SVD output deterministic across equivalent inputs.
pub fn canonicalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() + 1e-14 {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// All left singular vectors of centered snapshots, sign-canonicalized
/// column by column so any leading block is itself canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct PodModes {
    pub modes: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl PodModes {
    pub fn compute(snapshots: &SnapshotMatrix) -> Self {
        let centered;
        let snaps = if snapshots.centered {
            snapshots
        } else {
            centered = snapshots.centered();
            &centered
        };
        let (mut modes, singular_values) = left_svd(&snaps.data);
        canonicalize_signs(&mut modes);
        Self {
            modes,
            singular_values,
        }
    }

    /// Flip modes so each has a nonnegative inner product with the matching
    /// column of `reference`. Modes beyond the reference are left alone.
    pub fn align_signs(&mut self, reference: &DMatrix<f64>) {
        align_signs(&mut self.modes, reference);
    }

    /// Keep only the leading `k` modes (the spectrum is kept whole).
    pub fn truncate(&mut self, k: usize) {
        let k = k.min(self.modes.ncols());
        self.modes = self.modes.columns(0, k).into_owned();
    }

    pub fn basis(&self, r: usize, q: usize) -> Result<ProjectionBasis> {
        if r == 0 {
            return Err(SromError::InvalidArgument("r must be at least 1".into()));
        }
        let rank = numerical_rank(&self.singular_values).min(self.modes.ncols());
        if r + q > rank {
            return Err(SromError::RankDeficient {
                requested: r + q,
                rank,
            });
        }
        ProjectionBasis::from_full(
            &self.modes.columns(0, r + q).into_owned(),
            r,
            self.singular_values.clone(),
        )
    }
}

/// Column-wise sign alignment of `m` against `reference`. Bases of
/// neighbouring data sets then differ by small rotations rather than by
/// reflections, which keeps Stiefel logarithms between them well defined.
pub fn align_signs(m: &mut DMatrix<f64>, reference: &DMatrix<f64>) {
    let k = m.ncols().min(reference.ncols());
    for j in 0..k {
        if m.column(j).dot(&reference.column(j)) < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

/// Leading `r + q` left singular vectors of the centered snapshots.
pub fn compute_pod(snapshots: &SnapshotMatrix, r: usize, q: usize) -> Result<ProjectionBasis> {
    if r == 0 {
        return Err(SromError::InvalidArgument("r must be at least 1".into()));
    }
    PodModes::compute(snapshots).basis(r, q)
}

pub fn numerical_rank(singular_values: &DVector<f64>) -> usize {
    let first = singular_values.iter().copied().fold(0.0, f64::max);
    if first == 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s > RANK_RTOL * first)
        .count()
}

/// `1 - sum_{i<=r} sigma_i^2 / sum_i sigma_i^2`.
pub fn energy_error(singular_values: &DVector<f64>, r: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0.0;
    }
    let kept: f64 = singular_values.iter().take(r).map(|s| s * s).sum();
    (1.0 - kept / total).max(0.0)
}

/// Smallest `r` with `energy_error < threshold`, if any.
pub fn min_rank_for_threshold(singular_values: &DVector<f64>, threshold: f64) -> Option<usize> {
    (1..=singular_values.len()).find(|&r| energy_error(singular_values, r) < threshold)
}

/// How per-scenario ranks are combined into a single truncation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankRule {
    /// Smallest `r` meeting the threshold for every scenario.
    EveryScenario,
    /// Smallest `r` meeting the threshold for at least one scenario.
    AnyScenario,
}

pub fn select_rank(spectra: &[DVector<f64>], threshold: f64, rule: RankRule) -> Result<usize> {
    if spectra.is_empty() {
        return Err(SromError::InvalidArgument("no spectra given".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SromError::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let max_rank = spectra.iter().map(|s| s.len()).max().unwrap_or(0);
    let per_scenario: Vec<Option<usize>> = spectra
        .iter()
        .map(|s| min_rank_for_threshold(s, threshold))
        .collect();
    let unreachable = SromError::Unreachable {
        threshold,
        max_rank,
    };
    match rule {
        RankRule::EveryScenario => per_scenario
            .iter()
            .try_fold(0usize, |acc, r| r.map(|r| acc.max(r)))
            .ok_or(unreachable),
        RankRule::AnyScenario => per_scenario.iter().flatten().copied().min().ok_or(unreachable),
    }
}

/// Elementwise powers `(s^2, ..., s^p)` stacked into a `(p - 1) r` vector.
pub fn feature_map_g(s_hat: &DVector<f64>, p: usize) -> DVector<f64> {
    let r = s_hat.len();
    let mut out = DVector::zeros(r * p.saturating_sub(1));
    for (block, degree) in (2..=p).enumerate() {
        for i in 0..r {
            out[block * r + i] = s_hat[i].powi(degree as i32);
        }
    }
    out
}

/// Column-wise `g` applied to an `r x k` matrix.
pub fn feature_map_g_columns(s_hat: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let (r, k) = s_hat.shape();
    let mut out = DMatrix::zeros(r * p.saturating_sub(1), k);
    for j in 0..k {
        for (block, degree) in (2..=p).enumerate() {
            for i in 0..r {
                out[(block * r + i, j)] = s_hat[(i, j)].powi(degree as i32);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyRepresentation {
    pub basis: ProjectionBasis,
    pub xi: DMatrix<f64>,
    pub p: usize,
    pub gamma: f64,
    pub s_ref: DVector<f64>,
}

impl PolyRepresentation {
    /// Pure POD representation (`q = 0` or `Xi = 0`).
    pub fn linear(basis: ProjectionBasis, p: usize, s_ref: DVector<f64>) -> Self {
        let xi = DMatrix::zeros(basis.q(), basis.r() * (p - 1));
        Self {
            basis,
            xi,
            p,
            gamma: 0.0,
            s_ref,
        }
    }

    pub fn r(&self) -> usize {
        self.basis.r()
    }

    pub fn q(&self) -> usize {
        self.basis.q()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(SromError::InvalidArgument("p must be at least 2".into()));
        }
        if self.xi.shape() != (self.q(), (self.p - 1) * self.r()) {
            return Err(SromError::ShapeMismatch(format!(
                "Xi is {:?}, expected ({}, {})",
                self.xi.shape(),
                self.q(),
                (self.p - 1) * self.r()
            )));
        }
        if self.s_ref.len() != self.basis.n_states() {
            return Err(SromError::ShapeMismatch("s_ref length".into()));
        }
        Ok(())
    }

    pub fn encode(&self, s: &DVector<f64>) -> DVector<f64> {
        self.basis.v_r.tr_mul(&(s - &self.s_ref))
    }

    /// Reduced coordinates of every column of raw snapshots.
    pub fn encode_columns(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = raw.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.s_ref;
        }
        self.basis.v_r.tr_mul(&centered)
    }

    pub fn decode(&self, s_hat: &DVector<f64>) -> DVector<f64> {
        decode(s_hat, self)
    }

    pub fn decode_columns(&self, s_hat: &DMatrix<f64>) -> DMatrix<f64> {
        let g = feature_map_g_columns(s_hat, self.p);
        let mut out = &self.basis.v_r * s_hat + &self.basis.v_bar * (&self.xi * g);
        for mut col in out.column_iter_mut() {
            col += &self.s_ref;
        }
        out
    }
}

/// `s_ref + V_r s_hat + V_bar Xi g(s_hat)`.
pub fn decode(s_hat: &DVector<f64>, rep: &PolyRepresentation) -> DVector<f64> {
    let g = feature_map_g(s_hat, rep.p);
    &rep.s_ref + &rep.basis.v_r * s_hat + &rep.basis.v_bar * (&rep.xi * g)
}

/// Largest admissible condition number of a regularized Gram matrix.
pub const MAX_CONDITION: f64 = 1e14;

/// Ridge fit of `Xi` with `s_hat_j = V_r^T (s_j - s_ref)` held fixed.
pub fn fit_xi(
    snapshots: &SnapshotMatrix,
    basis: &ProjectionBasis,
    p: usize,
    gamma: f64,
) -> Result<PolyRepresentation> {
    if p < 2 {
        return Err(SromError::InvalidArgument("p must be at least 2".into()));
    }
    if gamma < 0.0 {
        return Err(SromError::InvalidArgument("gamma must be nonnegative".into()));
    }
    if snapshots.n_states() != basis.n_states() {
        return Err(SromError::ShapeMismatch("snapshots vs basis".into()));
    }
    let centered;
    let snaps = if snapshots.centered {
        snapshots
    } else {
        centered = snapshots.centered();
        &centered
    };
    let r = basis.r();
    let q = basis.q();
    let width = (p - 1) * r;
    let s_ref = snaps.s_ref.clone();
    if q == 0 {
        return Ok(PolyRepresentation {
            basis: basis.clone(),
            xi: DMatrix::zeros(0, width),
            p,
            gamma,
            s_ref,
        });
    }
    let s_hat = basis.v_r.tr_mul(&snaps.data);
    let g = feature_map_g_columns(&s_hat, p);
    // Residual after the linear part, expressed in V_bar coordinates. V_bar is
    // orthogonal to V_r so the component outside span(V_bar) is constant in Xi.
    let residual = &snaps.data - &basis.v_r * &s_hat;
    let target = basis.v_bar.tr_mul(&residual); // q x k
    let mut gram = &g * g.transpose();
    for i in 0..width {
        gram[(i, i)] += gamma;
    }
    let condition = spd_condition(&gram);
    if !(condition <= MAX_CONDITION) {
        return Err(SromError::IllConditioned { condition });
    }
    // Xi G G^T + gamma Xi = T G^T  =>  (G G^T + gamma I) Xi^T = G T^T
    let rhs = &g * target.transpose();
    let xi_t = solve_spd(&gram, &rhs)?;
    Ok(PolyRepresentation {
        basis: basis.clone(),
        xi: xi_t.transpose(),
        p,
        gamma,
        s_ref,
    })
}

/// Regularized objective `sum_j ||s_j - Gamma(s_hat_j)||^2 + gamma ||Xi||_F^2`.
pub fn representation_objective(rep: &PolyRepresentation, snapshots: &SnapshotMatrix) -> f64 {
    let raw = snapshots.raw();
    let s_hat = rep.encode_columns(&raw);
    let recon = rep.decode_columns(&s_hat);
    (raw - recon).norm_squared() + rep.gamma * rep.xi.norm_squared()
}

/// `||V_r S_hat + V_bar Xi G||_F^2 / ||S - S_ref||_F^2`.
pub fn snapshot_energy_captured(rep: &PolyRepresentation, snapshots: &SnapshotMatrix) -> f64 {
    let raw = snapshots.raw();
    let s_hat = rep.encode_columns(&raw);
    let g = feature_map_g_columns(&s_hat, rep.p);
    let captured = &rep.basis.v_r * &s_hat + &rep.basis.v_bar * (&rep.xi * g);
    let mut centered = raw;
    for mut col in centered.column_iter_mut() {
        col -= &rep.s_ref;
    }
    let denom = centered.norm_squared();
    if denom == 0.0 {
        return 0.0;
    }
    captured.norm_squared() / denom
}

/// `||S - Gamma(V_r^T (S - s_ref))||_F / ||S - S_ref||_F`: the encode/decode
/// error of the representation on the snapshots.
pub fn projection_error(rep: &PolyRepresentation, snapshots: &SnapshotMatrix) -> Result<f64> {
    let raw = snapshots.raw();
    let s_hat = rep.encode_columns(&raw);
    let recon = rep.decode_columns(&s_hat);
    let mut centered = raw.clone();
    for mut col in centered.column_iter_mut() {
        col -= &rep.s_ref;
    }
    let denom = centered.norm();
    if denom < 1e-14 {
        return Err(SromError::DegenerateDenominator);
    }
    Ok((raw - recon).norm() / denom)
}

/// Log-spaced grid `10^lo ..= 10^hi` with `n` points.
pub fn log_grid(lo_exp: f64, hi_exp: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![10f64.powf(lo_exp)];
    }
    (0..n)
        .map(|i| 10f64.powf(lo_exp + (hi_exp - lo_exp) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Fit `Xi` for every `gamma` in the grid and keep the one with the lowest
/// training reconstruction error (ties go to the larger `gamma`).
pub fn select_gamma(
    snapshots: &SnapshotMatrix,
    basis: &ProjectionBasis,
    p: usize,
    grid: &[f64],
) -> Result<PolyRepresentation> {
    let mut best: Option<(f64, PolyRepresentation)> = None;
    let mut last_err = None;
    for &gamma in grid {
        let rep = match fit_xi(snapshots, basis, p, gamma) {
            Ok(rep) => rep,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let err = projection_error(&rep, snapshots)?;
        let better = match &best {
            None => true,
            Some((b, prev)) => err < *b || (err == *b && gamma > prev.gamma),
        };
        if better {
            best = Some((err, rep));
        }
    }
    best.map(|(_, rep)| rep)
        .ok_or_else(|| last_err.unwrap_or(SromError::InvalidArgument("empty gamma grid".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_residual, thin_qr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_snapshots(n: usize, k: usize, seed: u64) -> SnapshotMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        SnapshotMatrix::new(
            data,
            DVector::from_fn(n, |i, _| i as f64),
            DVector::from_fn(k, |i, _| i as f64),
        )
        .unwrap()
    }

    /// Snapshots exactly on a planted quadratic manifold, already centered
    /// with respect to a zero reference.
    fn planted_manifold(seed: u64) -> (SnapshotMatrix, ProjectionBasis, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, r, q, k) = (30, 3, 2, 60);
        let frame = thin_qr(&DMatrix::from_fn(n, r + q, |_, _| rng.random_range(-1.0..1.0))).0;
        let basis = ProjectionBasis::from_full(&frame, r, DVector::zeros(0)).unwrap();
        let xi0 = DMatrix::from_fn(q, r, |_, _| rng.random_range(-1.0..1.0));
        let s_hat = DMatrix::from_fn(r, k, |_, _| rng.random_range(-1.0..1.0));
        let g = feature_map_g_columns(&s_hat, 2);
        let data = &basis.v_r * &s_hat + &basis.v_bar * (&xi0 * g);
        let mut snaps = SnapshotMatrix::new(
            data,
            DVector::from_fn(n, |i, _| i as f64),
            DVector::from_fn(k, |i, _| i as f64),
        )
        .unwrap();
        snaps.centered = true;
        (snaps, basis, xi0)
    }

    #[test]
    fn energy_error_formula() {
        let s = DVector::from_vec(vec![2.0, 1.0, 1.0]);
        assert!((energy_error(&s, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(energy_error(&s, 3), 0.0);
        let vals: Vec<f64> = (0..=3).map(|r| energy_error(&s, r)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn select_rank_rules() {
        // Scenario A reaches eps < 0.05 at r = 3, scenario B at r = 5.
        let a = DVector::from_vec(vec![10.0, 5.0, 3.0, 0.5, 0.4, 0.3, 0.2]);
        let b = DVector::from_vec(vec![6.0, 5.0, 4.0, 3.0, 2.5, 0.5, 0.4]);
        assert_eq!(min_rank_for_threshold(&a, 0.05), Some(3));
        assert_eq!(min_rank_for_threshold(&b, 0.05), Some(5));
        let spectra = [a.clone(), b];
        assert_eq!(select_rank(&spectra, 0.05, RankRule::EveryScenario).unwrap(), 5);
        assert_eq!(select_rank(&spectra, 0.05, RankRule::AnyScenario).unwrap(), 3);
        // Threshold just above eps(1) of every scenario.
        let t = energy_error(&a, 1) + 1e-9;
        assert_eq!(select_rank(&[a.clone()], t, RankRule::EveryScenario).unwrap(), 1);
        assert!(matches!(
            select_rank(&[DVector::from_vec(vec![1.0, 1.0])], 1e-3, RankRule::EveryScenario),
            Ok(2)
        ));
        assert!(select_rank(&[], 0.05, RankRule::EveryScenario).is_err());
    }

    #[test]
    fn select_rank_unreachable() {
        // energy_error(s, len) is 0, so a threshold is always met at full rank
        // unless the spectrum is empty.
        let empty = DVector::<f64>::zeros(0);
        assert!(matches!(
            select_rank(&[empty], 0.05, RankRule::EveryScenario),
            Err(SromError::Unreachable { .. })
        ));
    }

    #[test]
    fn feature_map_examples() {
        let g = feature_map_g(&DVector::from_vec(vec![2.0, 3.0]), 3);
        assert_eq!(g.as_slice(), &[4.0, 9.0, 8.0, 27.0]);
        assert_eq!(feature_map_g(&DVector::from_vec(vec![-1.5]), 2).as_slice(), &[2.25]);
        assert!(feature_map_g(&DVector::zeros(4), 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pod_is_orthonormal_and_ordered() {
        let snaps = random_snapshots(20, 50, 1);
        let basis = compute_pod(&snaps, 3, 4).unwrap();
        assert!(orthonormality_residual(&basis.full()) < 1e-10);
        let sv = &basis.singular_values;
        assert!(sv.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_one_snapshots() {
        let n = 10;
        let v = DVector::from_fn(n, |i, _| (i as f64 * 0.3).sin());
        let coeffs = [1.0, -2.0, 0.5, 3.0];
        let data = DMatrix::from_fn(n, coeffs.len(), |i, j| v[i] * coeffs[j]);
        let snaps = SnapshotMatrix::new(
            data,
            DVector::from_fn(n, |i, _| i as f64),
            DVector::from_fn(4, |i, _| i as f64),
        )
        .unwrap();
        let basis = compute_pod(&snaps, 1, 0).unwrap();
        let u = basis.v_r.column(0);
        let cos = (u.dot(&v) / v.norm()).abs();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(energy_error(&basis.singular_values, 1) < 1e-20);
        assert!(matches!(
            compute_pod(&snaps, 1, 1),
            Err(SromError::RankDeficient { requested: 2, rank: 1 })
        ));
    }

    #[test]
    fn fit_recovers_planted_xi() {
        let (snaps, basis, xi0) = planted_manifold(2);
        let rep = fit_xi(&snaps, &basis, 2, 0.0).unwrap();
        assert!((&rep.xi - &xi0).norm() < 1e-8, "{}", (&rep.xi - &xi0).norm());
    }

    #[test]
    fn ridge_limit_shrinks_xi() {
        let (snaps, basis, _) = planted_manifold(3);
        let free = fit_xi(&snaps, &basis, 2, 0.0).unwrap();
        let shrunk = fit_xi(&snaps, &basis, 2, 1e12).unwrap();
        assert!(shrunk.xi.norm() <= 1e-6 * free.xi.norm());
    }

    #[test]
    fn linear_data_gives_zero_xi() {
        let (mut snaps, basis, _) = planted_manifold(4);
        let s_hat = basis.v_r.tr_mul(&snaps.data);
        snaps.data = &basis.v_r * s_hat;
        let rep = fit_xi(&snaps, &basis, 2, 1e-3).unwrap();
        assert!(rep.xi.norm() < 1e-10);
    }

    #[test]
    fn fit_satisfies_first_order_optimality() {
        let snaps = random_snapshots(25, 80, 5).centered();
        let basis = compute_pod(&snaps, 3, 4).unwrap();
        let rep = fit_xi(&snaps, &basis, 2, 1e-2).unwrap();
        let base_obj = representation_objective(&rep, &snaps);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut d = DMatrix::from_fn(rep.xi.nrows(), rep.xi.ncols(), |_, _| {
                rng.random_range(-1.0..1.0)
            });
            d *= 1e-4 / d.norm();
            let mut perturbed = rep.clone();
            perturbed.xi += d;
            assert!(representation_objective(&perturbed, &snaps) >= base_obj - 1e-12 * base_obj);
        }
    }

    #[test]
    fn decode_special_cases() {
        let (snaps, basis, _) = planted_manifold(6);
        let rep = fit_xi(&snaps, &basis, 2, 0.0).unwrap();
        let zero = DVector::zeros(rep.r());
        assert_eq!(decode(&zero, &rep), rep.s_ref);
        let lin = PolyRepresentation::linear(basis.clone(), 2, rep.s_ref.clone());
        let s_hat = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let expected = &basis.v_r * &s_hat;
        assert!((decode(&s_hat, &lin) - expected).norm() < 1e-15);
    }

    #[test]
    fn linear_energy_matches_singular_values() {
        let snaps = random_snapshots(20, 40, 7).centered();
        let basis = compute_pod(&snaps, 4, 0).unwrap();
        let rep = PolyRepresentation::linear(basis.clone(), 2, snaps.s_ref.clone());
        let e = snapshot_energy_captured(&rep, &snaps);
        let lin = 1.0 - energy_error(&basis.singular_values, 4);
        assert!((e - lin).abs() < 1e-10);
    }

    #[test]
    fn enrichment_never_loses_energy() {
        let snaps = random_snapshots(20, 40, 8).centered();
        let enriched = fit_xi(&snaps, &compute_pod(&snaps, 3, 4).unwrap(), 2, 1e-6).unwrap();
        let plain = fit_xi(&snaps, &compute_pod(&snaps, 3, 0).unwrap(), 2, 1e-6).unwrap();
        assert!(snapshot_energy_captured(&enriched, &snaps) >= snapshot_energy_captured(&plain, &snaps));
        assert!(
            representation_objective(&enriched, &snaps) <= representation_objective(&plain, &snaps)
        );
    }

    #[test]
    fn gamma_grid_is_log_spaced() {
        let g = log_grid(-6.0, 2.0, 9);
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1e-6).abs() < 1e-20);
        assert!((g[8] - 1e2).abs() < 1e-10);
        assert!((g[1] / g[0] - 10.0).abs() < 1e-9);
    }
}
