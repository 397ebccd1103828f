//! Dense linear-algebra helpers shared by the geometry, representation and
//! regression modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SromError};

/// Thin QR factorization with the diagonal of `R` made nonnegative.
///
/// For an `n x p` input with `n >= p` returns `Q` (`n x p`, orthonormal
/// columns) and `R` (`p x p`, upper triangular).
pub fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..p.min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            r.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }
    (q, r)
}

/// Orthonormal completion: returns an `n x (n - p)` matrix whose columns are
/// orthogonal to the columns of `m` (assumed orthonormal, `n x p`).
pub fn orthogonal_complement(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = m.shape();
    // Householder QR of [m | I]: the trailing columns of the full Q span the
    // complement.
    let mut aug = DMatrix::<f64>::zeros(n, p + n);
    aug.view_mut((0, 0), (n, p)).copy_from(m);
    aug.view_mut((0, p), (n, n)).fill_with_identity();
    let q = aug.qr().q();
    q.columns(p, n - p).into_owned()
}

/// Matrix exponential (scaling and squaring with Padé approximants).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.exp()
}

/// Principal square root via the Denman-Beavers iteration.
fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y
            .clone()
            .try_inverse()
            .ok_or(SromError::IllConditioned { condition: f64::INFINITY })?;
        let zi = z
            .clone()
            .try_inverse()
            .ok_or(SromError::IllConditioned { condition: f64::INFINITY })?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let change = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if change <= 1e-15 * y.norm().max(1.0) {
            return Ok(y);
        }
    }
    Ok(y)
}

/// Real logarithm of an orthogonal matrix with no eigenvalue at -1.
///
/// Inverse scaling and squaring: take square roots until the matrix is close
/// to the identity, evaluate `2 artanh` of its Cayley transform as a series,
/// then scale back. The result is projected onto the skew-symmetric matrices.
pub fn logm_orthogonal(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut m = v.clone();
    let mut squarings = 0u32;
    while (&m - &eye).norm() > 0.25 {
        if squarings > 40 {
            return Err(SromError::LogNoConvergence {
                iterations: squarings as usize,
                residual: (&m - &eye).norm(),
            });
        }
        m = sqrtm(&m)?;
        squarings += 1;
    }
    let plus = &m + &eye;
    let plus_inv = plus
        .try_inverse()
        .ok_or(SromError::IllConditioned { condition: f64::INFINITY })?;
    let z = (&m - &eye) * plus_inv;
    let z2 = &z * &z;
    let mut term = z.clone();
    let mut sum = z.clone();
    for k in 1..60 {
        term = &term * &z2;
        let contrib = &term / (2 * k + 1) as f64;
        sum += &contrib;
        if contrib.norm() < 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    let log = sum * (2.0 * 2f64.powi(squarings as i32));
    Ok(skew_part(&log))
}

pub fn skew_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a - a.transpose()) * 0.5
}

pub fn sym_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `||M^T M - I||_F`.
pub fn orthonormality_residual(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    (m.transpose() * m - DMatrix::<f64>::identity(n, n)).norm()
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Left singular vectors and all singular values of `m`, ordered descending.
pub fn left_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    // A tall thin factor keeps the SVD small for wide snapshot matrices.
    let (n, k) = m.shape();
    if k > 2 * n {
        let r_t = m.transpose().qr().r(); // n x n, with m = R^T Q^T
        let svd = nalgebra::SVD::new(r_t.transpose(), true, false);
        (svd.u.expect("requested U"), svd.singular_values)
    } else {
        let svd = nalgebra::SVD::new(m.clone(), true, false);
        (svd.u.expect("requested U"), svd.singular_values)
    }
}

/// 2-norm condition number of a symmetric positive semidefinite matrix.
pub fn spd_condition(g: &DMatrix<f64>) -> f64 {
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve the symmetric positive definite system `G X = B`.
pub fn solve_spd(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match g.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => g
            .clone()
            .lu()
            .solve(b)
            .ok_or(SromError::IllConditioned { condition: f64::INFINITY }),
    }
}
