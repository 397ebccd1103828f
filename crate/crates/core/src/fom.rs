//! Full-order model: 1D viscous Burgers' equation on `[0, 1]` with homogeneous
//! Dirichlet boundaries, central finite differences in space and backward
//! Euler with Newton-Raphson in time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FomConfig {
    pub n_elements: usize,
    pub reynolds: f64,
    pub dt: f64,
    pub t_final: f64,
    pub mu: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self {
            n_elements: 256,
            reynolds: 1000.0,
            dt: 1e-3,
            t_final: 2.0,
            mu: 1.0,
            newton_tol: 1e-10,
            newton_max_iter: 25,
        }
    }
}

impl FomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SromError::InvalidArgument(msg.to_string()));
        if self.n_elements < 2 {
            return bad("n_elements must be at least 2");
        }
        if !(self.reynolds > 0.0) {
            return bad("reynolds must be positive");
        }
        if !(self.dt > 0.0) || !(self.t_final > 0.0) {
            return bad("dt and t_final must be positive");
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return bad("newton_tol and newton_max_iter must be positive");
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n_elements as f64
    }

    /// Number of time steps; `t_final / dt` rounded to the nearest integer.
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn grid(&self) -> DVector<f64> {
        let h = self.spacing();
        DVector::from_fn(self.n_nodes(), |i, _| i as f64 * h)
    }
}

/// Columns of state snapshots with their grid and time stamps.
///
/// `segments` records the column ranges belonging to distinct trajectories
/// when several simulations are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub data: DMatrix<f64>,
    pub x_grid: DVector<f64>,
    pub times: DVector<f64>,
    pub s_ref: DVector<f64>,
    pub centered: bool,
    pub segments: Vec<std::ops::Range<usize>>,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, x_grid: DVector<f64>, times: DVector<f64>) -> Result<Self> {
        if data.ncols() != times.len() || data.nrows() != x_grid.len() {
            return Err(SromError::ShapeMismatch(format!(
                "snapshot data {}x{} vs grid {} and times {}",
                data.nrows(),
                data.ncols(),
                x_grid.len(),
                times.len()
            )));
        }
        let n = data.nrows();
        let k = data.ncols();
        Ok(Self {
            data,
            x_grid,
            times,
            s_ref: DVector::zeros(n),
            centered: false,
            segments: vec![0..k],
        })
    }

    pub fn n_states(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }

    /// Raw (uncentered) snapshots.
    pub fn raw(&self) -> DMatrix<f64> {
        if self.centered {
            let mut raw = self.data.clone();
            for mut col in raw.column_iter_mut() {
                col += &self.s_ref;
            }
            raw
        } else {
            self.data.clone()
        }
    }

    /// Subtract the column mean and record it as `s_ref`.
    pub fn centered(&self) -> SnapshotMatrix {
        let raw = self.raw();
        let mean = raw.column_mean();
        let mut data = raw;
        for mut col in data.column_iter_mut() {
            col -= &mean;
        }
        SnapshotMatrix {
            data,
            x_grid: self.x_grid.clone(),
            times: self.times.clone(),
            s_ref: mean,
            centered: true,
            segments: self.segments.clone(),
        }
    }

    /// Column-wise concatenation of raw snapshot matrices on a shared grid.
    pub fn concatenate(parts: &[&SnapshotMatrix]) -> Result<SnapshotMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| SromError::InvalidArgument("nothing to concatenate".into()))?;
        let n = first.n_states();
        let total: usize = parts.iter().map(|p| p.n_snapshots()).sum();
        let mut data = DMatrix::zeros(n, total);
        let mut times = DVector::zeros(total);
        let mut segments = Vec::new();
        let mut offset = 0;
        for part in parts {
            if part.n_states() != n {
                return Err(SromError::ShapeMismatch(
                    "snapshot matrices have different state dimensions".into(),
                ));
            }
            let k = part.n_snapshots();
            data.columns_mut(offset, k).copy_from(&part.raw());
            times.rows_mut(offset, k).copy_from(&part.times);
            for seg in &part.segments {
                segments.push(seg.start + offset..seg.end + offset);
            }
            offset += k;
        }
        Ok(SnapshotMatrix {
            data,
            x_grid: first.x_grid.clone(),
            times,
            s_ref: DVector::zeros(n),
            centered: false,
            segments,
        })
    }
}

/// `mu sin(2 pi x)` on `[0, 0.5]`, zero elsewhere; endpoints pinned to zero.
pub fn assemble_initial_state(mu: f64, x_grid: &DVector<f64>) -> DVector<f64> {
    let n = x_grid.len();
    DVector::from_fn(n, |i, _| {
        let x = x_grid[i];
        if i == 0 || i + 1 == n || x > 0.5 {
            0.0
        } else {
            mu * (2.0 * std::f64::consts::PI * x).sin()
        }
    })
}

/// Semi-discrete right-hand side `f(s)` (zero on boundary nodes).
pub fn burgers_rhs(s: &DVector<f64>, h: f64, reynolds: f64) -> DVector<f64> {
    let n = s.len();
    let nu = 1.0 / reynolds;
    let mut f = DVector::zeros(n);
    for i in 1..n - 1 {
        let (sm, sc, sp) = (s[i - 1], s[i], s[i + 1]);
        f[i] = -sc * (sp - sm) / (2.0 * h) + nu * (sp - 2.0 * sc + sm) / (h * h);
    }
    f
}

/// Thomas algorithm for a tridiagonal system. `lower[i]` multiplies
/// `x[i-1]` in row `i`, `upper[i]` multiplies `x[i+1]`.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Per-iteration max-norm residuals of one Newton solve.
#[derive(Debug, Clone, Default)]
pub struct NewtonTrace {
    pub residuals: Vec<f64>,
}

/// One backward-Euler step, returning the new state and the Newton trace.
pub fn step_backward_euler_traced(
    state: &DVector<f64>,
    cfg: &FomConfig,
) -> Result<(DVector<f64>, NewtonTrace)> {
    let n = state.len();
    let h = cfg.spacing();
    let dt = cfg.dt;
    let nu = 1.0 / cfg.reynolds;
    let mut s = state.clone();
    s[0] = 0.0;
    s[n - 1] = 0.0;
    let mut trace = NewtonTrace::default();
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let mut residual = vec![0.0; n];
    for _ in 0..=cfg.newton_max_iter {
        // R(s) = s - s_prev - dt f(s) on interior nodes.
        let mut rmax: f64 = 0.0;
        for i in 1..n - 1 {
            let (sm, sc, sp) = (s[i - 1], s[i], s[i + 1]);
            let f = -sc * (sp - sm) / (2.0 * h) + nu * (sp - 2.0 * sc + sm) / (h * h);
            residual[i] = sc - state[i] - dt * f;
            rmax = rmax.max(residual[i].abs());
        }
        trace.residuals.push(rmax);
        if !rmax.is_finite() {
            break;
        }
        if rmax <= cfg.newton_tol {
            return Ok((s, trace));
        }
        if trace.residuals.len() > cfg.newton_max_iter {
            break;
        }
        for i in 1..n - 1 {
            let (sm, sc, sp) = (s[i - 1], s[i], s[i + 1]);
            diag[i] = 1.0 - dt * (-(sp - sm) / (2.0 * h) - 2.0 * nu / (h * h));
            lower[i] = -dt * (sc / (2.0 * h) + nu / (h * h));
            upper[i] = -dt * (-sc / (2.0 * h) + nu / (h * h));
        }
        // Boundary rows are identity with zero residual.
        diag[0] = 1.0;
        upper[0] = 0.0;
        diag[n - 1] = 1.0;
        lower[n - 1] = 0.0;
        residual[0] = 0.0;
        residual[n - 1] = 0.0;
        let delta = solve_tridiagonal(&lower, &diag, &upper, &residual);
        for i in 1..n - 1 {
            s[i] -= delta[i];
        }
    }
    Err(SromError::NewtonDivergence {
        step: 0,
        residual: trace.residuals.last().copied().unwrap_or(f64::NAN),
    })
}

pub fn step_backward_euler(state: &DVector<f64>, cfg: &FomConfig) -> Result<DVector<f64>> {
    step_backward_euler_traced(state, cfg).map(|(s, _)| s)
}

/// Integrate from the initial condition `cfg.mu` to `cfg.t_final`, storing
/// every step (including `t = 0`).
pub fn simulate(cfg: &FomConfig) -> Result<SnapshotMatrix> {
    cfg.validate()?;
    let x = cfg.grid();
    let steps = cfg.n_steps();
    let mut data = DMatrix::zeros(x.len(), steps + 1);
    let mut s = assemble_initial_state(cfg.mu, &x);
    data.set_column(0, &s);
    for step in 1..=steps {
        s = step_backward_euler(&s, cfg).map_err(|e| match e {
            SromError::NewtonDivergence { residual, .. } => {
                SromError::NewtonDivergence { step, residual }
            }
            other => other,
        })?;
        data.set_column(step, &s);
    }
    let times = DVector::from_fn(steps + 1, |i, _| i as f64 * cfg.dt);
    SnapshotMatrix::new(data, x, times)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> FomConfig {
        FomConfig {
            n_elements: 64,
            t_final: 0.1,
            ..FomConfig::default()
        }
    }

    #[test]
    fn initial_condition_values() {
        let x = DVector::from_vec(vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let s = assemble_initial_state(1.0, &x);
        assert!((s[1] - 1.0).abs() < 1e-15);
        assert_eq!(s[3], 0.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[4], 0.0);
        assert!(s[2].abs() < 1e-15);
        let zero = assemble_initial_state(0.0, &FomConfig::default().grid());
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let cfg = FomConfig::default();
        let s = DVector::zeros(cfg.n_nodes());
        let next = step_backward_euler(&s, &cfg).unwrap();
        assert!(next.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearized_regime_matches_diffusion_solve() {
        let cfg = FomConfig::default();
        let x = cfg.grid();
        let n = x.len();
        let s0 = assemble_initial_state(1e-7, &x);
        let s1 = step_backward_euler(&s0, &cfg).unwrap();
        // Backward Euler for ds/dt = nu * Laplacian: (I - dt nu L) s1 = s0.
        let h = cfg.spacing();
        let k = cfg.dt / (cfg.reynolds * h * h);
        let mut lower = vec![-k; n];
        let mut diag = vec![1.0 + 2.0 * k; n];
        let mut upper = vec![-k; n];
        lower[0] = 0.0;
        upper[0] = 0.0;
        diag[0] = 1.0;
        lower[n - 1] = 0.0;
        upper[n - 1] = 0.0;
        diag[n - 1] = 1.0;
        let lin = solve_tridiagonal(&lower, &diag, &upper, s0.as_slice());
        let max_diff = (0..n).map(|i| (s1[i] - lin[i]).abs()).fold(0.0, f64::max);
        // Relative to the 1e-7 amplitude the convective term is O(1e-14).
        assert!(max_diff < 1e-6 * 1e-7, "{max_diff}");
    }

    #[test]
    fn newton_converges_quadratically() {
        let cfg = FomConfig {
            newton_tol: 1e-14,
            ..FomConfig::default()
        };
        let x = cfg.grid();
        let s0 = assemble_initial_state(1.0, &x);
        let (_, trace) = step_backward_euler_traced(&s0, &cfg).unwrap();
        let r = &trace.residuals;
        assert!(r.len() >= 3, "{r:?}");
        // Contraction ratios shrink superlinearly once in the basin.
        let ratios: Vec<f64> = r.windows(2).map(|w| w[1] / w[0]).collect();
        let informative: Vec<f64> = ratios
            .iter()
            .zip(r.iter().skip(1))
            .filter(|(_, &res)| res > 1e-13)
            .map(|(&q, _)| q)
            .collect();
        assert!(informative.windows(2).all(|w| w[1] < w[0]), "{r:?}");
    }

    #[test]
    fn newton_failure_is_reported() {
        let cfg = FomConfig {
            newton_max_iter: 1,
            newton_tol: 1e-300,
            ..small_cfg()
        };
        let err = simulate(&FomConfig { mu: 1.0, ..cfg }).unwrap_err();
        assert!(matches!(err, SromError::NewtonDivergence { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn simulate_shapes_and_boundaries() {
        let cfg = small_cfg();
        let snaps = simulate(&cfg).unwrap();
        assert_eq!(snaps.n_snapshots(), 101);
        assert_eq!(snaps.n_states(), 65);
        assert!(!snaps.centered);
        assert!(snaps.s_ref.iter().all(|&v| v == 0.0));
        for j in 0..snaps.n_snapshots() {
            assert_eq!(snaps.data[(0, j)], 0.0);
            assert_eq!(snaps.data[(64, j)], 0.0);
        }
        let zero = simulate(&FomConfig { mu: 0.0, ..cfg }).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centering_round_trip() {
        let snaps = simulate(&small_cfg()).unwrap();
        let c = snaps.centered();
        assert!(c.centered);
        assert!(c.data.column_mean().norm() < 1e-14);
        assert!((c.raw() - &snaps.data).norm() < 1e-13);
    }

    #[test]
    fn concatenation_tracks_segments() {
        let a = simulate(&small_cfg()).unwrap();
        let b = simulate(&FomConfig { mu: 0.5, ..small_cfg() }).unwrap();
        let cat = SnapshotMatrix::concatenate(&[&a, &b]).unwrap();
        assert_eq!(cat.n_snapshots(), 202);
        assert_eq!(cat.segments, vec![0..101, 101..202]);
        assert_eq!(cat.data.column(150), b.data.column(49));
    }
}
