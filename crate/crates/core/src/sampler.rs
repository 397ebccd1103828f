//! Stochastic projection matrices: anchor logarithms at the global basis,
//! Dirichlet concentration from a small QP on the simplex, and sampling by
//! convex combination in the tangent space followed by the exponential map.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{Result, SromError};
use crate::linalg::frobenius_inner;
use crate::stiefel::{riemann_exp, riemann_log, StiefelPoint, TangentVector};

pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-6;

/// `H_ij = tr(log(Phi_i)^T log(Phi_j))` with logarithms taken at `global`.
pub fn gram_matrix(anchors: &[StiefelPoint], global: &StiefelPoint) -> Result<(DMatrix<f64>, Vec<TangentVector>)> {
    let logs = anchors
        .par_iter()
        .enumerate()
        .map(|(i, a)| riemann_log(global, a).map_err(|e| e.in_anchor(i)))
        .collect::<Result<Vec<_>>>()?;
    let m = logs.len();
    let mut h = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = frobenius_inner(logs[i].matrix(), logs[j].matrix());
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok((h, logs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub alpha: DVector<f64>,
    pub objective: f64,
    /// KKT violation relative to `max(1, ||H||)`.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Equality-constrained step on the free set: minimize
/// `(a + p)^T H (a + p)` subject to `sum p = 0`, `p_i = 0` off the free set.
fn free_step(h: &DMatrix<f64>, alpha: &DVector<f64>, free: &[usize]) -> DVector<f64> {
    let m = alpha.len();
    let k = free.len();
    let g = h * alpha * 2.0;
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = 2.0 * h[(i, j)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        rhs[a] = -g[i];
    }
    // Minimum-norm solve: H may be singular on the free set.
    let sol = kkt
        .svd(true, true)
        .solve(&rhs, 1e-13)
        .unwrap_or_else(|_| DVector::zeros(k + 1));
    let mut p = DVector::zeros(m);
    for (a, &i) in free.iter().enumerate() {
        p[i] = sol[a];
    }
    p
}

/// Multiplier of `sum alpha = 1` from the free components, and the bound
/// multipliers `g_i + nu` on the active set.
fn multipliers(h: &DMatrix<f64>, alpha: &DVector<f64>, active: &[bool]) -> (f64, DVector<f64>) {
    let g = h * alpha * 2.0;
    let free: Vec<usize> = (0..alpha.len()).filter(|&i| !active[i]).collect();
    let nu = if free.is_empty() {
        -g.min()
    } else {
        -free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
    };
    (nu, g.map(|v| v + nu))
}

fn kkt_residual(h: &DMatrix<f64>, alpha: &DVector<f64>, active: &[bool], floor: f64) -> f64 {
    let (_, lam) = multipliers(h, alpha, active);
    let scale = h.norm().max(1.0);
    let mut worst: f64 = (alpha.sum() - 1.0).abs();
    for i in 0..alpha.len() {
        worst = worst.max((floor - alpha[i]).max(0.0));
        if active[i] {
            worst = worst.max((-lam[i]).max(0.0) / scale);
        } else {
            worst = worst.max(lam[i].abs() / scale);
        }
    }
    worst
}

/// `argmin alpha^T H alpha` over `sum alpha = 1`, `alpha_i >= floor`, by a
/// primal active-set method started from the uniform vector.
pub fn solve_concentration_detailed(h: &DMatrix<f64>, floor: f64) -> Result<QpSolution> {
    let m = h.nrows();
    if m == 0 || h.ncols() != m {
        return Err(SromError::ShapeMismatch(format!("Gram matrix {:?}", h.shape())));
    }
    if (h - h.transpose()).norm() > 1e-10 * h.norm().max(1.0) {
        return Err(SromError::InvalidArgument("Gram matrix is not symmetric".into()));
    }
    if !(floor >= 0.0) || floor * m as f64 > 1.0 {
        return Err(SromError::InfeasibleQp);
    }
    let h = (h + h.transpose()) * 0.5;
    let mut alpha = DVector::from_element(m, 1.0 / m as f64);
    let mut active = vec![false; m];
    let tol = 1e-14 * h.norm().max(1.0);
    let max_iter = 10 * m + 50;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let free: Vec<usize> = (0..m).filter(|&i| !active[i]).collect();
        let p = free_step(&h, &alpha, &free);
        if p.norm() <= 1e-13 {
            let (_, lam) = multipliers(&h, &alpha, &active);
            let release = (0..m)
                .filter(|&i| active[i] && lam[i] < -tol)
                .min_by(|&a, &b| lam[a].total_cmp(&lam[b]));
            match release {
                Some(i) => active[i] = false,
                None => break,
            }
            continue;
        }
        // Longest step keeping every free component above the floor.
        let mut t = 1.0;
        let mut blocking = None;
        for &i in &free {
            if p[i] < 0.0 {
                let ti = (alpha[i] - floor) / -p[i];
                if ti < t {
                    t = ti;
                    blocking = Some(i);
                }
            }
        }
        alpha.axpy(t, &p, 1.0);
        if let Some(i) = blocking {
            alpha[i] = floor;
            active[i] = true;
        }
    }
    // Remove roundoff drift from the equality constraint on the free part.
    let free: Vec<usize> = (0..m).filter(|&i| !active[i]).collect();
    if !free.is_empty() {
        let excess = (alpha.sum() - 1.0) / free.len() as f64;
        for &i in &free {
            alpha[i] -= excess;
        }
    }
    if alpha.iter().any(|&a| a < floor - 1e-12) {
        return Err(SromError::InfeasibleQp);
    }
    let kkt = kkt_residual(&h, &alpha, &active, floor);
    Ok(QpSolution {
        objective: alpha.dot(&(&h * &alpha)),
        alpha,
        kkt_residual: kkt,
        iterations,
    })
}

pub fn solve_concentration(h: &DMatrix<f64>) -> Result<DVector<f64>> {
    solve_concentration_detailed(h, DEFAULT_ALPHA_FLOOR).map(|s| s.alpha)
}

/// Random stream for one sample: the seed selects the generator and the
/// sample index selects the stream, so draws do not depend on the order in
/// which samples are produced.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One Dirichlet draw by normalized Gamma variates, computed in log space so
/// very small concentrations do not underflow to an all-zero vector.
pub fn dirichlet_draw(alpha: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a >= 1.0 {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng).ln()
            } else {
                // G(a) = G(a + 1) U^(1/a)
                let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng).ln();
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g + u.ln() / a
            }
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    DVector::from_iterator(w.len(), w.iter().map(|v| v / total))
}

pub fn sample_dirichlet(alpha: &DVector<f64>, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(SromError::InvalidArgument("Dirichlet concentrations must be positive".into()));
    }
    Ok((0..n)
        .map(|j| dirichlet_draw(alpha, &mut sample_rng(seed, j as u64)))
        .collect())
}

/// Zero-based index of the largest weight; ties go to the lowest index.
pub fn select_operator_index(p: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct DirichletModel {
    pub alpha: DVector<f64>,
    pub h: DMatrix<f64>,
    pub anchor_logs: Vec<TangentVector>,
    pub base: StiefelPoint,
    pub qp: QpSolution,
}

impl DirichletModel {
    pub fn new(anchors: &[StiefelPoint], global: &StiefelPoint, floor: f64) -> Result<Self> {
        let (h, anchor_logs) = gram_matrix(anchors, global)?;
        let qp = solve_concentration_detailed(&h, floor)?;
        Ok(Self {
            alpha: qp.alpha.clone(),
            h,
            anchor_logs,
            base: global.clone(),
            qp,
        })
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    /// Smallest eigenvalue of `H`.
    pub fn min_eigenvalue(&self) -> f64 {
        self.h.clone().symmetric_eigenvalues().min()
    }

    pub fn mean_anchor_log_norm(&self) -> f64 {
        self.anchor_logs.iter().map(|t| t.norm()).sum::<f64>() / self.m() as f64
    }
}

/// `exp_base(sum_i p_i log_base(anchor_i))`.
pub fn sample_projection(p: &DVector<f64>, model: &DirichletModel) -> Result<StiefelPoint> {
    if p.len() != model.m() {
        return Err(SromError::ShapeMismatch(format!(
            "{} weights for {} anchors",
            p.len(),
            model.m()
        )));
    }
    let delta = TangentVector::combine(p.as_slice(), &model.anchor_logs)?;
    riemann_exp(&model.base, &delta)
}

#[derive(Debug, Clone)]
pub struct StochasticSample {
    pub index: usize,
    pub seed: u64,
    pub p: DVector<f64>,
    pub phi: StiefelPoint,
    /// Zero-based anchor whose operators drive this sample.
    pub operator_index: usize,
}

/// Samples `0..n` of the stochastic projection matrix.
pub fn generate_samples(model: &DirichletModel, n: usize, seed: u64) -> Result<Vec<StochasticSample>> {
    (0..n)
        .into_par_iter()
        .map(|index| {
            let p = dirichlet_draw(&model.alpha, &mut sample_rng(seed, index as u64));
            let phi = sample_projection(&p, model).map_err(|e| e.in_sample(index))?;
            Ok(StochasticSample {
                index,
                seed,
                operator_index: select_operator_index(&p),
                p,
                phi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::thin_qr;

    #[test]
    fn qp_examples() {
        let a = solve_concentration(&DMatrix::identity(3, 3)).unwrap();
        for v in a.iter() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-10);
        }
        let sol = solve_concentration_detailed(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])), 1e-6).unwrap();
        assert!((sol.alpha[0] - 0.8).abs() <= 1e-10 && (sol.alpha[1] - 0.2).abs() <= 1e-10);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn qp_with_active_bound() {
        // A zero row makes its weight free of cost; the others sit at the floor.
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0, 3.0]));
        let sol = solve_concentration_detailed(&h, 1e-6).unwrap();
        assert!((sol.alpha[1] - 1e-6).abs() < 1e-15 && (sol.alpha[2] - 1e-6).abs() < 1e-15);
        assert!((sol.alpha.sum() - 1.0).abs() < 1e-14);
        assert!(sol.kkt_residual <= 1e-8);
        // Strong coupling pushes one weight to the floor.
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let sol = solve_concentration_detailed(&h, 1e-6).unwrap();
        assert!((sol.alpha[1] - 1e-6).abs() < 1e-15, "{}", sol.alpha);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn qp_rejects_bad_input() {
        assert!(matches!(
            solve_concentration_detailed(&DMatrix::identity(3, 3), 0.5),
            Err(SromError::InfeasibleQp)
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(solve_concentration(&asym).is_err());
    }

    #[test]
    fn operator_index_examples() {
        assert_eq!(select_operator_index(&DVector::from_vec(vec![0.2, 0.5, 0.3])) + 1, 2);
        assert_eq!(select_operator_index(&DVector::from_vec(vec![0.0, 0.0, 1.0])) + 1, 3);
        assert_eq!(select_operator_index(&DVector::from_vec(vec![0.5, 0.5])) + 1, 1);
    }

    #[test]
    fn dirichlet_basics() {
        let one = sample_dirichlet(&DVector::from_element(1, 0.7), 5, 1).unwrap();
        assert!(one.iter().all(|p| p[0] == 1.0));
        let alpha = DVector::from_vec(vec![1e-6, 0.3, 2.5]);
        for p in sample_dirichlet(&alpha, 200, 3).unwrap() {
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.sum() - 1.0).abs() <= 1e-12);
        }
        let a = sample_dirichlet(&alpha, 20, 9).unwrap();
        let b = sample_dirichlet(&alpha, 20, 9).unwrap();
        assert_eq!(a, b);
        // Stream per index: sample 7 is the same whether or not 0..7 were drawn.
        let alone = dirichlet_draw(&alpha, &mut sample_rng(9, 7));
        assert_eq!(alone, a[7]);
        assert!(sample_dirichlet(&DVector::from_vec(vec![1.0, 0.0]), 1, 0).is_err());
    }

    fn random_point(n: usize, p: usize, rng: &mut ChaCha8Rng) -> StiefelPoint {
        let m = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        StiefelPoint::new(thin_qr(&m).0, None).unwrap()
    }

    fn near(base: &StiefelPoint, norm: f64, rng: &mut ChaCha8Rng) -> StiefelPoint {
        let (n, p) = base.shape();
        let t = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let t = TangentVector::project(&t, base.clone());
        riemann_exp(base, &t.scaled(norm / t.norm())).unwrap()
    }

    #[test]
    fn gram_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_point(6, 2, &mut rng);
        let a = near(&base, 0.3, &mut rng);
        let b = near(&base, 0.4, &mut rng);
        let (h, logs) = gram_matrix(&[a.clone(), b.clone(), base.clone()], &base).unwrap();
        let la = riemann_log(&base, &a).unwrap();
        let lb = riemann_log(&base, &b).unwrap();
        assert!((h[(0, 1)] - (la.matrix().transpose() * lb.matrix()).trace()).abs() < 1e-12);
        assert!((h[(0, 0)] - la.norm().powi(2)).abs() < 1e-12);
        assert!(h.row(2).norm() < 1e-12 && h.column(2).norm() < 1e-12);
        assert_eq!(logs.len(), 3);
    }

    #[test]
    fn one_hot_and_identical_anchor_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_point(12, 3, &mut rng);
        let anchors: Vec<_> = (0..3).map(|_| near(&base, 0.4, &mut rng)).collect();
        let model = DirichletModel::new(&anchors, &base, 1e-6).unwrap();
        for (i, anchor) in anchors.iter().enumerate() {
            let mut p = DVector::zeros(3);
            p[i] = 1.0;
            let phi = sample_projection(&p, &model).unwrap();
            assert!((phi.matrix() - anchor.matrix()).norm() <= 1e-8);
        }
        let same = vec![anchors[0].clone(); 3];
        let model = DirichletModel::new(&same, &base, 1e-6).unwrap();
        let phi = sample_projection(&DVector::from_element(3, 1.0 / 3.0), &model).unwrap();
        assert!((phi.matrix() - anchors[0].matrix()).norm() <= 1e-8);
    }

    #[test]
    fn samples_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = random_point(10, 2, &mut rng);
        let anchors: Vec<_> = (0..3).map(|_| near(&base, 0.3, &mut rng)).collect();
        let model = DirichletModel::new(&anchors, &base, 1e-6).unwrap();
        let a = generate_samples(&model, 16, 42).unwrap();
        let b = generate_samples(&model, 16, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.p, y.p);
            assert_eq!(x.operator_index, y.operator_index);
            assert_eq!(x.phi.matrix(), y.phi.matrix());
        }
        assert!(model.min_eigenvalue() >= -1e-10);
    }
}
