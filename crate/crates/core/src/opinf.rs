//! Operator inference: learn `c_hat + A_hat s + H_hat (s ⊗ s) + P_hat g_hat(s)`
//! from reduced trajectories by Tikhonov-regularized least squares, and
//! integrate the learned model.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};
use crate::fom::SnapshotMatrix;
use crate::latent::{feature_map_g_columns, PolyRepresentation};
use crate::linalg::{solve_spd, spd_condition};
use crate::ode::{self, OdeOptions, OdeStats};

/// Monomial dictionary for the higher-order term `g_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GhatDictionary {
    /// `s_i^d` for each degree `d`.
    #[default]
    Elementwise,
    /// Every monomial of each degree `d`, including cross terms.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpecGhat {
    pub r: usize,
    pub p: usize,
    pub degrees: Vec<usize>,
    #[serde(default)]
    pub dictionary: GhatDictionary,
}

impl FeatureSpecGhat {
    /// Elementwise monomials of degrees `3..=2p`.
    pub fn new(r: usize, p: usize) -> Self {
        Self {
            r,
            p,
            degrees: (3..=2 * p).collect(),
            dictionary: GhatDictionary::Elementwise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.p < 2 {
            return Err(SromError::InvalidArgument(format!(
                "feature spec needs r >= 1 and p >= 2 (r = {}, p = {})",
                self.r, self.p
            )));
        }
        if let Some(&d) = self.degrees.iter().find(|&&d| d < 3 || d > 2 * self.p) {
            return Err(SromError::InvalidArgument(format!(
                "g_hat degree {d} outside [3, {}]",
                2 * self.p
            )));
        }
        Ok(())
    }

    /// `d(r, p)`.
    pub fn len(&self) -> usize {
        match self.dictionary {
            GhatDictionary::Elementwise => self.r * self.degrees.len(),
            GhatDictionary::Full => self
                .degrees
                .iter()
                .map(|&d| multisets(self.r, d).len())
                .sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nondecreasing index tuples of length `degree` over `0..r`.
fn multisets(r: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; degree];
    fn rec(r: usize, pos: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for i in start..r {
            cur[pos] = i;
            rec(r, pos + 1, i, cur, out);
        }
    }
    rec(r, 0, 0, &mut cur, &mut out);
    out
}

pub fn feature_map_ghat(s_hat: &DVector<f64>, spec: &FeatureSpecGhat) -> DVector<f64> {
    let mut out = DVector::zeros(spec.len());
    fill_ghat(s_hat.as_slice(), spec, out.as_mut_slice());
    out
}

fn fill_ghat(s: &[f64], spec: &FeatureSpecGhat, out: &mut [f64]) {
    let mut idx = 0;
    match spec.dictionary {
        GhatDictionary::Elementwise => {
            for &d in &spec.degrees {
                for &v in s {
                    out[idx] = v.powi(d as i32);
                    idx += 1;
                }
            }
        }
        GhatDictionary::Full => {
            for &d in &spec.degrees {
                for m in multisets(s.len(), d) {
                    out[idx] = m.iter().map(|&i| s[i]).product();
                    idx += 1;
                }
            }
        }
    }
}

/// The learned operator tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedOperators {
    pub c_hat: DVector<f64>,
    pub a_hat: DMatrix<f64>,
    pub h_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub spec: FeatureSpecGhat,
    pub lambdas: [f64; 3],
}

impl ReducedOperators {
    pub fn zeros(spec: FeatureSpecGhat) -> Self {
        let r = spec.r;
        let d = spec.len();
        Self {
            c_hat: DVector::zeros(r),
            a_hat: DMatrix::zeros(r, r),
            h_hat: DMatrix::zeros(r, r * r),
            p_hat: DMatrix::zeros(r, d),
            spec,
            lambdas: [0.0; 3],
        }
    }

    pub fn r(&self) -> usize {
        self.c_hat.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r();
        let d = self.spec.len();
        if self.spec.r != r
            || self.a_hat.shape() != (r, r)
            || self.h_hat.shape() != (r, r * r)
            || self.p_hat.shape() != (r, d)
        {
            return Err(SromError::ShapeMismatch(format!(
                "operators: c {}, A {:?}, H {:?}, P {:?} for r = {r}, d = {d}",
                self.c_hat.len(),
                self.a_hat.shape(),
                self.h_hat.shape(),
                self.p_hat.shape()
            )));
        }
        Ok(())
    }

    /// Named operator matrices in the order `c, A, H, P` (c as a column).
    pub fn named(&self) -> [(&'static str, DMatrix<f64>); 4] {
        [
            ("c", DMatrix::from_column_slice(self.r(), 1, self.c_hat.as_slice())),
            ("A", self.a_hat.clone()),
            ("H", self.h_hat.clone()),
            ("P", self.p_hat.clone()),
        ]
    }
}

/// `c + A s + H (s ⊗ s) + P g_hat(s)` with the full Kronecker product.
pub fn rom_rhs(s_hat: &DVector<f64>, ops: &ReducedOperators) -> DVector<f64> {
    let r = s_hat.len();
    let mut out = &ops.c_hat + &ops.a_hat * s_hat;
    let s = s_hat.as_slice();
    for i in 0..r {
        let si = s[i];
        if si == 0.0 {
            continue;
        }
        for j in 0..r {
            let col = ops.h_hat.column(i * r + j);
            out.axpy(si * s[j], &col, 1.0);
        }
    }
    if !ops.p_hat.is_empty() {
        out += &ops.p_hat * feature_map_ghat(s_hat, &ops.spec);
    }
    out
}

/// Fourth-order finite-difference time derivative of an `r x k` trajectory
/// sampled at uniform spacing `dt`. Interior columns use the centered 5-point
/// stencil; the two columns at either end use one-sided 4th-order stencils.
pub fn time_derivatives(traj: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let (r, k) = traj.shape();
    if k < 5 {
        return Err(SromError::TooFewSamples { needed: 5, got: k });
    }
    let mut d = DMatrix::zeros(r, k);
    let w = 1.0 / (12.0 * dt);
    for i in 0..r {
        let x = |j: usize| traj[(i, j)];
        d[(i, 0)] = w * (-25.0 * x(0) + 48.0 * x(1) - 36.0 * x(2) + 16.0 * x(3) - 3.0 * x(4));
        d[(i, 1)] = w * (-3.0 * x(0) - 10.0 * x(1) + 18.0 * x(2) - 6.0 * x(3) + x(4));
        for j in 2..k - 2 {
            d[(i, j)] = w * (x(j - 2) - 8.0 * x(j - 1) + 8.0 * x(j + 1) - x(j + 2));
        }
        let e = k - 1;
        d[(i, e - 1)] =
            w * (3.0 * x(e) + 10.0 * x(e - 1) - 18.0 * x(e - 2) + 6.0 * x(e - 3) - x(e - 4));
        d[(i, e)] =
            w * (25.0 * x(e) - 48.0 * x(e - 1) + 36.0 * x(e - 2) - 16.0 * x(e - 3) + 3.0 * x(e - 4));
    }
    Ok(d)
}

/// Derivatives computed independently on each trajectory segment.
pub fn time_derivatives_segmented(
    traj: &DMatrix<f64>,
    dt: f64,
    segments: &[std::ops::Range<usize>],
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(traj.nrows(), traj.ncols());
    for seg in segments {
        let part = traj.columns(seg.start, seg.len()).into_owned();
        let d = time_derivatives(&part, dt)?;
        out.columns_mut(seg.start, seg.len()).copy_from(&d);
    }
    Ok(out)
}

/// Regression columns: constant, linear, unique quadratic pairs, `g_hat`.
struct Design {
    r: usize,
    pairs: Vec<(usize, usize)>,
    d: usize,
}

impl Design {
    fn new(spec: &FeatureSpecGhat) -> Self {
        let r = spec.r;
        let pairs = (0..r).flat_map(|i| (i..r).map(move |j| (i, j))).collect();
        Self {
            r,
            pairs,
            d: spec.len(),
        }
    }

    fn width(&self) -> usize {
        1 + self.r + self.pairs.len() + self.d
    }

    fn matrix(&self, s_hat: &DMatrix<f64>, spec: &FeatureSpecGhat) -> DMatrix<f64> {
        let k = s_hat.ncols();
        let mut m = DMatrix::zeros(k, self.width());
        let mut g = vec![0.0; self.d];
        for j in 0..k {
            let s: Vec<f64> = s_hat.column(j).iter().copied().collect();
            let mut c = 0;
            m[(j, c)] = 1.0;
            c += 1;
            for &v in &s {
                m[(j, c)] = v;
                c += 1;
            }
            for &(a, b) in &self.pairs {
                m[(j, c)] = s[a] * s[b];
                c += 1;
            }
            fill_ghat(&s, spec, &mut g);
            for &v in &g {
                m[(j, c)] = v;
                c += 1;
            }
        }
        m
    }

    /// Diagonal penalty per column. The redundant Kronecker coefficients
    /// `H_ij`, `H_ji` share one unique regressor; splitting its coefficient
    /// evenly halves the effective penalty for `i != j`.
    fn penalty(&self, lambdas: [f64; 3]) -> Vec<f64> {
        let mut pen = vec![lambdas[0] / 2.0; 1 + self.r];
        pen.extend(
            self.pairs
                .iter()
                .map(|&(a, b)| if a == b { lambdas[1] / 2.0 } else { lambdas[1] / 4.0 }),
        );
        pen.extend(std::iter::repeat_n(lambdas[2] / 2.0, self.d));
        pen
    }
}

/// Precomputed normal-equation blocks for repeated solves with different
/// regularization weights.
pub struct RegressionProblem {
    spec: FeatureSpecGhat,
    design: Design,
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
    n_samples: usize,
}

impl RegressionProblem {
    pub fn new(s_hat: &DMatrix<f64>, ds_hat: &DMatrix<f64>, spec: &FeatureSpecGhat) -> Result<Self> {
        spec.validate()?;
        if s_hat.shape() != ds_hat.shape() || s_hat.nrows() != spec.r {
            return Err(SromError::ShapeMismatch(format!(
                "trajectory {:?}, derivatives {:?}, r = {}",
                s_hat.shape(),
                ds_hat.shape(),
                spec.r
            )));
        }
        let design = Design::new(spec);
        let full_features = 1 + spec.r + spec.r * spec.r + spec.len();
        if s_hat.ncols() < full_features {
            log::warn!(
                "operator inference with {} samples for {} features",
                s_hat.ncols(),
                full_features
            );
        }
        let d = design.matrix(s_hat, spec);
        let gram = d.tr_mul(&d);
        let rhs = d.tr_mul(&ds_hat.transpose());
        Ok(Self {
            spec: spec.clone(),
            design,
            gram,
            rhs,
            n_samples: s_hat.ncols(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn solve(&self, lambdas: [f64; 3]) -> Result<ReducedOperators> {
        if lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(SromError::InvalidArgument("regularization must be nonnegative".into()));
        }
        let mut gram = self.gram.clone();
        for (i, p) in self.design.penalty(lambdas).into_iter().enumerate() {
            gram[(i, i)] += p;
        }
        let condition = spd_condition(&gram);
        if !(condition <= crate::latent::MAX_CONDITION) {
            return Err(SromError::IllConditioned { condition });
        }
        let coef = solve_spd(&gram, &self.rhs)?.transpose(); // r x width
        Ok(self.unpack(&coef, lambdas))
    }

    fn unpack(&self, coef: &DMatrix<f64>, lambdas: [f64; 3]) -> ReducedOperators {
        let r = self.spec.r;
        let mut ops = ReducedOperators::zeros(self.spec.clone());
        ops.lambdas = lambdas;
        ops.c_hat.copy_from(&coef.column(0));
        ops.a_hat.copy_from(&coef.columns(1, r));
        for (n, &(a, b)) in self.design.pairs.iter().enumerate() {
            let col = coef.column(1 + r + n);
            if a == b {
                ops.h_hat.set_column(a * r + b, &col);
            } else {
                ops.h_hat.set_column(a * r + b, &(&col * 0.5));
                ops.h_hat.set_column(b * r + a, &(&col * 0.5));
            }
        }
        let off = 1 + r + self.design.pairs.len();
        ops.p_hat.copy_from(&coef.columns(off, self.design.d));
        ops
    }

    /// Gradient of the regularized objective at `ops`, relative to the scale
    /// of the data term. Zero at the minimizer.
    pub fn stationarity_residual(&self, ops: &ReducedOperators) -> f64 {
        let r = self.spec.r;
        let w = self.design.width();
        let mut coef = DMatrix::zeros(r, w);
        coef.set_column(0, &ops.c_hat);
        coef.columns_mut(1, r).copy_from(&ops.a_hat);
        for (n, &(a, b)) in self.design.pairs.iter().enumerate() {
            let col = if a == b {
                ops.h_hat.column(a * r + b).into_owned()
            } else {
                ops.h_hat.column(a * r + b) + ops.h_hat.column(b * r + a)
            };
            coef.set_column(1 + r + n, &col);
        }
        let off = 1 + r + self.design.pairs.len();
        coef.columns_mut(off, self.design.d).copy_from(&ops.p_hat);
        let mut gram = self.gram.clone();
        for (i, p) in self.design.penalty(ops.lambdas).into_iter().enumerate() {
            gram[(i, i)] += p;
        }
        let grad = &coef * gram - self.rhs.transpose();
        grad.norm() / self.rhs.norm().max(f64::MIN_POSITIVE)
    }
}

/// One-shot regularized regression.
pub fn infer_operators(
    s_hat: &DMatrix<f64>,
    ds_hat: &DMatrix<f64>,
    spec: &FeatureSpecGhat,
    lambdas: [f64; 3],
) -> Result<ReducedOperators> {
    RegressionProblem::new(s_hat, ds_hat, spec)?.solve(lambdas)
}

/// Default regularization grid: `lambda_1` and a tied `lambda_2 = lambda_3`,
/// 5 values each.
pub fn default_lambda_grid() -> Vec<[f64; 3]> {
    let l1 = [1e-1, 1.0, 1e1, 1e2, 1e3];
    let l23 = [1e2, 1e3, 1e4, 1e5, 1e6];
    l1.iter()
        .flat_map(|&a| l23.iter().map(move |&b| [a, b, b]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub lambdas: [f64; 3],
    /// Training error, or `None` when the candidate failed.
    pub error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub lambdas: [f64; 3],
    pub operators: ReducedOperators,
    pub error: f64,
    pub candidates: Vec<GridCandidate>,
}

/// Fit operators for every grid point and evaluate them. Among the
/// candidates whose error is within a factor `1 + tolerance` of the
/// smallest, keep the most strongly regularized one (largest
/// `lambda_2 + lambda_3`, then largest `lambda_1`, then smallest error).
/// With `tolerance = 0` this is plain error minimization.
pub fn grid_search_regularization<E>(
    problem: &RegressionProblem,
    grid: &[[f64; 3]],
    tolerance: f64,
    eval: E,
) -> Result<GridSearchOutcome>
where
    E: Fn(&ReducedOperators) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(SromError::InvalidArgument("empty regularization grid".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(SromError::InvalidArgument(format!("selection tolerance {tolerance} is negative")));
    }
    let results: Vec<Option<(ReducedOperators, f64)>> = grid
        .par_iter()
        .map(|&lambdas| {
            let ops = problem.solve(lambdas).ok()?;
            let err = eval(&ops).ok()?;
            err.is_finite().then_some((ops, err))
        })
        .collect();
    let candidates = grid
        .iter()
        .zip(&results)
        .map(|(&lambdas, res)| GridCandidate {
            lambdas,
            error: res.as_ref().map(|(_, e)| *e),
        })
        .collect();
    let min_err = results
        .iter()
        .flatten()
        .map(|(_, e)| *e)
        .fold(f64::INFINITY, f64::min);
    let cutoff = min_err * (1.0 + tolerance);
    let key = |i: usize, err: f64| (grid[i][1] + grid[i][2], grid[i][0], -err);
    let mut best: Option<(usize, f64)> = None;
    for (i, res) in results.iter().enumerate() {
        let Some((_, err)) = res else { continue };
        if *err > cutoff {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, berr)) => key(i, *err).partial_cmp(&key(b, berr)) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((i, *err));
        }
    }
    let (idx, error) = best.ok_or(SromError::AllUnstable)?;
    let (operators, _) = results.into_iter().nth(idx).flatten().expect("selected candidate");
    Ok(GridSearchOutcome {
        lambdas: grid[idx],
        operators,
        error,
        candidates,
    })
}

/// Integrate the learned model, sampled at `t_eval`.
pub fn integrate_rom(
    ops: &ReducedOperators,
    s_hat0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<DMatrix<f64>> {
    integrate_rom_with_stats(ops, s_hat0, t_eval, opts).map(|(y, _)| y)
}

pub fn integrate_rom_with_stats(
    ops: &ReducedOperators,
    s_hat0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<(DMatrix<f64>, OdeStats)> {
    ops.validate()?;
    if s_hat0.len() != ops.r() {
        return Err(SromError::ShapeMismatch(format!(
            "initial state of length {} for r = {}",
            s_hat0.len(),
            ops.r()
        )));
    }
    ode::integrate(|_, s| rom_rhs(s, ops), s_hat0, t_eval, opts)
}

/// `||S - Gamma(S_hat)||_F / ||S - S_ref||_F` with `S_ref` the snapshot
/// matrix's recorded reference state.
pub fn relative_state_error(snapshots: &SnapshotMatrix, reconstructed: &DMatrix<f64>) -> Result<f64> {
    let raw = snapshots.raw();
    if raw.shape() != reconstructed.shape() {
        return Err(SromError::ShapeMismatch(format!(
            "snapshots {:?} vs reconstruction {:?}",
            raw.shape(),
            reconstructed.shape()
        )));
    }
    let mut centered = raw.clone();
    for mut col in centered.column_iter_mut() {
        col -= &snapshots.s_ref;
    }
    let denom = centered.norm();
    if denom < 1e-14 {
        return Err(SromError::DegenerateDenominator);
    }
    Ok((raw - reconstructed).norm() / denom)
}

/// Relative state error of a learned model on its training trajectories,
/// evaluated in the coordinates of the (orthonormal) representation basis:
/// `||S_c - Phi Y||^2 = ||S_c||^2 - 2 <Phi^T S_c, Y> + ||Y||^2`.
pub struct TrainingErrorEvaluator {
    rep: PolyRepresentation,
    segments: Vec<SegmentData>,
    denom_sq: f64,
    opts: OdeOptions,
}

struct SegmentData {
    s_hat0: DVector<f64>,
    times: Vec<f64>,
    projected: DMatrix<f64>,
    energy: f64,
}

impl TrainingErrorEvaluator {
    pub fn new(rep: &PolyRepresentation, snapshots: &SnapshotMatrix, opts: OdeOptions) -> Result<Self> {
        let raw = snapshots.raw();
        let mut centered = raw;
        for mut col in centered.column_iter_mut() {
            col -= &rep.s_ref;
        }
        let denom_sq = centered.norm_squared();
        if denom_sq.sqrt() < 1e-14 {
            return Err(SromError::DegenerateDenominator);
        }
        let phi = rep.basis.full();
        let segments = snapshots
            .segments
            .iter()
            .map(|seg| {
                let part = centered.columns(seg.start, seg.len());
                SegmentData {
                    s_hat0: rep.basis.v_r.tr_mul(&part.column(0).into_owned()),
                    times: snapshots.times.rows(seg.start, seg.len()).iter().copied().collect(),
                    projected: phi.tr_mul(&part),
                    energy: part.norm_squared(),
                }
            })
            .collect();
        Ok(Self {
            rep: rep.clone(),
            segments,
            denom_sq,
            opts,
        })
    }

    pub fn evaluate(&self, ops: &ReducedOperators) -> Result<f64> {
        let r = self.rep.r();
        let mut total = 0.0;
        for seg in &self.segments {
            let y = integrate_rom(ops, &seg.s_hat0, &seg.times, &self.opts)?;
            let g = feature_map_g_columns(&y, self.rep.p);
            let enriched = &self.rep.xi * g;
            let proj_r = seg.projected.rows(0, r);
            let proj_q = seg.projected.rows(r, self.rep.q());
            let cross = proj_r.dot(&y) + proj_q.dot(&enriched);
            total += seg.energy - 2.0 * cross + y.norm_squared() + enriched.norm_squared();
        }
        Ok(total.max(0.0).sqrt() / self.denom_sq.sqrt())
    }
}
