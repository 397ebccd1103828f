//! Riemannian geometry of the Stiefel manifold `St(N, n)` under the canonical
//! metric, together with its subset of matrices annihilated by a linear
//! constraint operator `B^T`.
//!
//! The exponential is evaluated in closed form from a `2n x 2n` matrix
//! exponential. The logarithm has no closed form; it is computed with the
//! iterative algebraic shooting method that repeatedly rotates the orthogonal
//! completion until the lower-right block of the matrix logarithm vanishes.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Result, SromError};
use crate::linalg::{expm, logm_orthogonal, orthonormality_residual, sym_part, thin_qr};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub orth: f64,
    pub tangent: f64,
    pub constraint: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            orth: 1e-8,
            tangent: 1e-8,
            constraint: 1e-8,
        }
    }
}

/// Linear constraints `B^T M = 0` with `B` of size `N x N_CD`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    matrix: DMatrix<f64>,
}

impl ConstraintMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let rank = matrix.rank(1e-12 * matrix.norm().max(1.0));
        if rank < matrix.ncols() {
            return Err(SromError::InvalidArgument(format!(
                "constraint matrix has rank {rank} < {} columns",
                matrix.ncols()
            )));
        }
        Ok(Self { matrix })
    }

    /// Homogeneous Dirichlet conditions on the first and last node.
    pub fn dirichlet_endpoints(n: usize) -> Self {
        let mut b = DMatrix::zeros(n, 2);
        b[(0, 0)] = 1.0;
        b[(n - 1, 1)] = 1.0;
        Self { matrix: b }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `||B^T M||_F`.
    pub fn residual(&self, m: &DMatrix<f64>) -> f64 {
        (self.matrix.transpose() * m).norm()
    }
}

/// A point on the Stiefel manifold, optionally tied to a constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    matrix: DMatrix<f64>,
    constraint: Option<Arc<ConstraintMatrix>>,
}

impl StiefelPoint {
    pub fn new(matrix: DMatrix<f64>, constraint: Option<Arc<ConstraintMatrix>>) -> Result<Self> {
        Self::with_tolerances(matrix, constraint, &Tolerances::default())
    }

    pub fn with_tolerances(
        matrix: DMatrix<f64>,
        constraint: Option<Arc<ConstraintMatrix>>,
        tol: &Tolerances,
    ) -> Result<Self> {
        if matrix.nrows() < matrix.ncols() {
            return Err(SromError::ShapeMismatch(format!(
                "Stiefel point must be tall, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let orth = orthonormality_residual(&matrix);
        if orth > tol.orth {
            return Err(SromError::InvalidArgument(format!(
                "columns are not orthonormal (residual {orth:.3e})"
            )));
        }
        if let Some(c) = &constraint {
            if c.matrix().nrows() != matrix.nrows() {
                return Err(SromError::ShapeMismatch("constraint row count".into()));
            }
            let res = c.residual(&matrix);
            if res > tol.constraint {
                return Err(SromError::InvalidArgument(format!(
                    "constraint violated (residual {res:.3e})"
                )));
            }
        }
        Ok(Self { matrix, constraint })
    }

    pub(crate) fn from_parts_unchecked(
        matrix: DMatrix<f64>,
        constraint: Option<Arc<ConstraintMatrix>>,
    ) -> Self {
        Self { matrix, constraint }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn constraint(&self) -> Option<&Arc<ConstraintMatrix>> {
        self.constraint.as_ref()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    pub fn orthonormality_residual(&self) -> f64 {
        orthonormality_residual(&self.matrix)
    }

    pub fn constraint_residual(&self) -> f64 {
        self.constraint
            .as_ref()
            .map_or(0.0, |c| c.residual(&self.matrix))
    }
}

/// Tangent vector at a basepoint: `basepoint^T matrix` is skew-symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    matrix: DMatrix<f64>,
    basepoint: StiefelPoint,
}

impl TangentVector {
    pub fn new(matrix: DMatrix<f64>, basepoint: StiefelPoint) -> Result<Self> {
        Self::with_tolerance(matrix, basepoint, Tolerances::default().tangent)
    }

    pub fn with_tolerance(matrix: DMatrix<f64>, basepoint: StiefelPoint, tol: f64) -> Result<Self> {
        if matrix.shape() != basepoint.shape() {
            return Err(SromError::ShapeMismatch(format!(
                "tangent {:?} vs basepoint {:?}",
                matrix.shape(),
                basepoint.shape()
            )));
        }
        let residual = tangency_residual(basepoint.matrix(), &matrix);
        if residual > tol {
            return Err(SromError::NotTangent { residual });
        }
        Ok(Self { matrix, basepoint })
    }

    /// Zero vector at `basepoint`.
    pub fn zero(basepoint: StiefelPoint) -> Self {
        let (n, p) = basepoint.shape();
        Self {
            matrix: DMatrix::zeros(n, p),
            basepoint,
        }
    }

    /// Project an arbitrary matrix onto the tangent space at `basepoint`.
    pub fn project(matrix: &DMatrix<f64>, basepoint: StiefelPoint) -> Self {
        let u = basepoint.matrix();
        let m = matrix - u * sym_part(&(u.transpose() * matrix));
        Self {
            matrix: m,
            basepoint,
        }
    }

    /// Linear combination `sum_i w_i v_i` of tangent vectors sharing a basepoint.
    pub fn combine(weights: &[f64], vectors: &[TangentVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| SromError::InvalidArgument("no tangent vectors".into()))?;
        if weights.len() != vectors.len() {
            return Err(SromError::ShapeMismatch("weights vs vectors".into()));
        }
        let mut acc = DMatrix::zeros(first.matrix.nrows(), first.matrix.ncols());
        for (w, v) in weights.iter().zip(vectors) {
            if v.basepoint.matrix != first.basepoint.matrix {
                return Err(SromError::InvalidArgument(
                    "tangent vectors live at different basepoints".into(),
                ));
            }
            acc += &v.matrix * *w;
        }
        Ok(Self {
            matrix: acc,
            basepoint: first.basepoint.clone(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            matrix: &self.matrix * factor,
            basepoint: self.basepoint.clone(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn basepoint(&self) -> &StiefelPoint {
        &self.basepoint
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }
}

/// `||sym(U^T D)||_F`, zero exactly when `D` is tangent at `U`.
pub fn tangency_residual(base: &DMatrix<f64>, delta: &DMatrix<f64>) -> f64 {
    sym_part(&(base.transpose() * delta)).norm()
}

fn block_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = (a.nrows(), a.ncols());
    let mut m = DMatrix::zeros(p + c.nrows(), q + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, q), b.shape()).copy_from(b);
    m.view_mut((p, 0), c.shape()).copy_from(c);
    m.view_mut((p, q), d.shape()).copy_from(d);
    m
}

/// Riemannian exponential under the canonical metric.
pub fn riemann_exp(base: &StiefelPoint, delta: &TangentVector) -> Result<StiefelPoint> {
    riemann_exp_with(base, delta, &Tolerances::default())
}

pub fn riemann_exp_with(
    base: &StiefelPoint,
    delta: &TangentVector,
    tol: &Tolerances,
) -> Result<StiefelPoint> {
    let u0 = base.matrix();
    let d = delta.matrix();
    if d.shape() != u0.shape() {
        return Err(SromError::ShapeMismatch("tangent vs basepoint".into()));
    }
    let residual = tangency_residual(u0, d);
    if residual > tol.tangent {
        return Err(SromError::NotTangent { residual });
    }
    let p = u0.ncols();
    if d.norm() == 0.0 {
        return Ok(base.clone());
    }
    let a = crate::linalg::skew_part(&(u0.transpose() * d));
    let (q, r) = thin_qr(&(d - u0 * &a));
    let block = block_matrix(&a, &(-r.transpose()), &r, &DMatrix::zeros(p, p));
    let e = expm(&block);
    let u1 = u0 * e.view((0, 0), (p, p)) + &q * e.view((p, 0), (p, p));
    // QR with positive diagonal removes orthonormality drift.
    let (u1, _) = thin_qr(&u1);
    Ok(StiefelPoint::from_parts_unchecked(u1, base.constraint.clone()))
}

/// Result of the iterative logarithm.
#[derive(Debug, Clone)]
pub struct LogOutcome {
    pub tangent: TangentVector,
    pub iterations: usize,
    pub residual: f64,
}

pub const LOG_DEFAULT_TOL: f64 = 1e-10;
pub const LOG_DEFAULT_MAX_ITER: usize = 100;

/// Rotation generator for the shooting update: solves `S G + G S = C` with
/// `S = B B^T / 12 - I / 2`, which cancels the lower-right block of
/// `log(V diag(I, exp(G)))` to second order. Reduces to `G = -C` for small `B`.
fn sylvester_correction(b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let p = b.nrows();
    let s = b * b.transpose() / 12.0 - DMatrix::identity(p, p) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(s);
    let q = &eig.eigenvectors;
    let mut g = q.transpose() * c * q;
    for i in 0..p {
        for j in 0..p {
            let denom = eig.eigenvalues[i] + eig.eigenvalues[j];
            // Fall back to the plain update where the system is singular.
            g[(i, j)] = if denom.abs() > 1e-8 { g[(i, j)] / denom } else { -g[(i, j)] };
        }
    }
    crate::linalg::skew_part(&(q * g * q.transpose()))
}

/// Riemannian logarithm `log_base(target)` with default tolerances.
pub fn riemann_log(base: &StiefelPoint, target: &StiefelPoint) -> Result<TangentVector> {
    riemann_log_with(base, target, LOG_DEFAULT_TOL, LOG_DEFAULT_MAX_ITER).map(|o| o.tangent)
}

pub fn riemann_log_with(
    base: &StiefelPoint,
    target: &StiefelPoint,
    tol: f64,
    max_iter: usize,
) -> Result<LogOutcome> {
    let u0 = base.matrix();
    let u1 = target.matrix();
    if u0.shape() != u1.shape() {
        return Err(SromError::ShapeMismatch(format!(
            "log between {:?} and {:?}",
            u0.shape(),
            u1.shape()
        )));
    }
    let p = u0.ncols();
    let m = u0.transpose() * u1;
    let (q, n) = thin_qr(&(u1 - u0 * &m));

    // Orthogonal completion of [M; N], rotated so its lower block is
    // symmetric positive semidefinite (Procrustes start).
    let mut stacked = DMatrix::zeros(2 * p, p);
    stacked.view_mut((0, 0), (p, p)).copy_from(&m);
    stacked.view_mut((p, 0), (p, p)).copy_from(&n);
    let completion = crate::linalg::orthogonal_complement(&stacked);
    let y0 = completion.view((p, 0), (p, p)).into_owned();
    let svd = y0.svd(true, true);
    let rot = svd.v_t.expect("v_t").transpose() * svd.u.expect("u").transpose();
    let completion = completion * rot;

    let mut v = DMatrix::zeros(2 * p, 2 * p);
    v.view_mut((0, 0), (2 * p, p)).copy_from(&stacked);
    v.view_mut((0, p), (2 * p, p)).copy_from(&completion);

    let mut residual = f64::INFINITY;
    let mut log_v = DMatrix::zeros(2 * p, 2 * p);
    let mut iterations = 0;
    for k in 0..=max_iter {
        log_v = logm_orthogonal(&v).map_err(|_| SromError::LogNoConvergence {
            iterations: k,
            residual,
        })?;
        let c = log_v.view((p, p), (p, p)).into_owned();
        residual = c.norm();
        iterations = k;
        if residual <= tol {
            break;
        }
        if k == max_iter {
            return Err(SromError::LogNoConvergence {
                iterations: max_iter,
                residual,
            });
        }
        let b = log_v.view((p, 0), (p, p)).into_owned();
        let phi = expm(&sylvester_correction(&b, &c));
        let right = v.view((0, p), (2 * p, p)) * phi;
        v.view_mut((0, p), (2 * p, p)).copy_from(&right);
    }
    let a = log_v.view((0, 0), (p, p)).into_owned();
    let b = log_v.view((p, 0), (p, p)).into_owned();
    let delta = u0 * a + q * b;
    let tangent = TangentVector {
        matrix: delta,
        basepoint: base.clone(),
    };
    Ok(LogOutcome {
        tangent,
        iterations,
        residual,
    })
}

/// `||log_a(b)||_F`.
pub fn geodesic_distance(a: &StiefelPoint, b: &StiefelPoint) -> Result<f64> {
    riemann_log(a, b).map(|t| t.norm())
}

/// `||(1/n) sum_j log_base(sample_j)||_F`; zero when `base` is a first-order
/// Karcher mean of the samples.
pub fn tangent_mean_residual(base: &StiefelPoint, samples: &[StiefelPoint]) -> Result<f64> {
    if samples.is_empty() {
        return Err(SromError::TooFewSamples { needed: 1, got: 0 });
    }
    let (n, p) = base.shape();
    let mut acc = DMatrix::zeros(n, p);
    for (i, s) in samples.iter().enumerate() {
        let t = riemann_log(base, s).map_err(|e| e.in_sample(i))?;
        acc += t.matrix();
    }
    Ok(acc.norm() / samples.len() as f64)
}

/// Iterative Karcher mean: repeatedly move the estimate along the mean of the
/// logarithms.
pub fn karcher_mean(points: &[StiefelPoint], tol: f64, max_iter: usize) -> Result<StiefelPoint> {
    let mut mean = points
        .first()
        .ok_or(SromError::TooFewSamples { needed: 1, got: 0 })?
        .clone();
    for _ in 0..max_iter {
        let logs = points
            .iter()
            .map(|p| riemann_log(&mean, p))
            .collect::<Result<Vec<_>>>()?;
        let w = vec![1.0 / points.len() as f64; points.len()];
        let step = TangentVector::combine(&w, &logs)?;
        if step.norm() < tol {
            break;
        }
        mean = riemann_exp(&mean, &step)?;
    }
    Ok(mean)
}
