//! Training scenarios, operator-distance matrices, basis clustering, anchor
//! selection and the global projection matrix.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SromError};
use crate::fom::SnapshotMatrix;
use crate::latent::{select_gamma, PodModes, PolyRepresentation, ProjectionBasis};
use crate::ode::OdeOptions;
use crate::opinf::{
    grid_search_regularization, time_derivatives_segmented, FeatureSpecGhat, GridCandidate, ReducedOperators,
    RegressionProblem, TrainingErrorEvaluator,
};
use crate::stiefel::{geodesic_distance, karcher_mean, ConstraintMatrix, StiefelPoint};

/// How the training subsets of the parameter grid are enumerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CombinationSpec {
    /// Explicit subsets of grid indices.
    Explicit { subsets: Vec<Vec<usize>> },
    /// Every subset with size in `min..=max`.
    Sizes { min: usize, max: usize },
    /// Both grid endpoints plus every interior subset with size in `min..=max`.
    Endpoints { min: usize, max: usize },
}

impl Default for CombinationSpec {
    fn default() -> Self {
        CombinationSpec::Endpoints { min: 3, max: 4 }
    }
}

impl CombinationSpec {
    pub fn subsets(&self, n_grid: usize) -> Result<Vec<Vec<usize>>> {
        let subsets = match self {
            CombinationSpec::Explicit { subsets } => subsets.clone(),
            CombinationSpec::Sizes { min, max } => subsets_of_sizes(&(0..n_grid).collect::<Vec<_>>(), *min, *max),
            CombinationSpec::Endpoints { min, max } => {
                if n_grid < 2 {
                    return Err(SromError::InvalidArgument("endpoint combinations need two grid points".into()));
                }
                let interior: Vec<usize> = (1..n_grid - 1).collect();
                subsets_of_sizes(&interior, *min, *max)
                    .into_iter()
                    .map(|mid| {
                        let mut s = vec![0];
                        s.extend(mid);
                        s.push(n_grid - 1);
                        s
                    })
                    .collect()
            }
        };
        if subsets.is_empty() {
            return Err(SromError::InvalidArgument("combination spec yields no subsets".into()));
        }
        for s in &subsets {
            if s.is_empty() {
                return Err(SromError::InvalidArgument("empty training subset".into()));
            }
            if let Some(&i) = s.iter().find(|&&i| i >= n_grid) {
                return Err(SromError::InvalidArgument(format!(
                    "subset index {i} outside a grid of {n_grid}"
                )));
            }
        }
        Ok(subsets)
    }
}

/// All subsets of `items` with size in `min..=max`, by size then
/// lexicographically.
pub fn subsets_of_sizes(items: &[usize], min: usize, max: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], size: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, size, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in min.max(1)..=max.min(items.len()) {
        rec(items, size, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// Concatenate the selected trajectories and center them.
pub fn scenario_snapshots(library: &[SnapshotMatrix], subset: &[usize]) -> Result<SnapshotMatrix> {
    let parts = subset
        .iter()
        .map(|&i| {
            library
                .get(i)
                .ok_or_else(|| SromError::InvalidArgument(format!("no trajectory with index {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnapshotMatrix::concatenate(&parts)?.centered())
}

#[derive(Debug, Clone)]
pub struct ScenarioSettings {
    pub r: usize,
    pub q: usize,
    pub p: usize,
    pub gamma_grid: Vec<f64>,
    pub ghat: FeatureSpecGhat,
    pub lambda_grid: Vec<[f64; 3]>,
    /// Relative slack on the training error when picking regularization.
    pub selection_tolerance: f64,
    pub ode: OdeOptions,
    /// Reference basis for POD sign alignment.
    pub reference: Option<Arc<DMatrix<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: usize,
    pub mu_indices: Vec<usize>,
    pub mu_set: Vec<f64>,
    pub rep: PolyRepresentation,
    pub ops: ReducedOperators,
    /// Relative state error of the learned model on its own training data.
    pub training_error: f64,
    pub candidates: Vec<GridCandidate>,
}

impl Scenario {
    pub fn basis(&self) -> &ProjectionBasis {
        &self.rep.basis
    }

    pub fn snapshots(&self, library: &[SnapshotMatrix]) -> Result<SnapshotMatrix> {
        scenario_snapshots(library, &self.mu_indices)
    }

    /// `[V_r V_bar]` as a point on the (constrained) Stiefel manifold.
    pub fn stiefel_point(&self, constraint: Option<Arc<ConstraintMatrix>>) -> Result<StiefelPoint> {
        StiefelPoint::new(self.rep.basis.full(), constraint)
    }
}

/// Learn the representation and operators of one scenario from its centered
/// snapshots and precomputed POD modes.
pub fn build_scenario_from_modes(
    id: usize,
    mu_indices: &[usize],
    mu_grid: &[f64],
    snapshots: &SnapshotMatrix,
    modes: &PodModes,
    settings: &ScenarioSettings,
) -> Result<Scenario> {
    let run = || -> Result<Scenario> {
        let basis = modes.basis(settings.r, settings.q)?;
        let rep = select_gamma(snapshots, &basis, settings.p, &settings.gamma_grid)?;
        let s_hat = basis.v_r.tr_mul(&snapshots.data);
        let dt = snapshots.times[1] - snapshots.times[0];
        let ds_hat = time_derivatives_segmented(&s_hat, dt, &snapshots.segments)?;
        let spec = FeatureSpecGhat {
            r: settings.r,
            p: settings.p,
            ..settings.ghat.clone()
        };
        let problem = RegressionProblem::new(&s_hat, &ds_hat, &spec)?;
        let evaluator = TrainingErrorEvaluator::new(&rep, snapshots, settings.ode)?;
        let outcome = grid_search_regularization(&problem, &settings.lambda_grid, settings.selection_tolerance, |ops| evaluator.evaluate(ops))?;
        Ok(Scenario {
            id,
            mu_indices: mu_indices.to_vec(),
            mu_set: mu_indices.iter().map(|&i| mu_grid[i]).collect(),
            rep,
            ops: outcome.operators,
            training_error: outcome.error,
            candidates: outcome.candidates,
        })
    };
    if snapshots.n_snapshots() < 2 {
        return Err(SromError::TooFewSamples {
            needed: 2,
            got: snapshots.n_snapshots(),
        }
        .in_scenario(id));
    }
    run().map_err(|e| e.in_scenario(id))
}

pub fn build_scenario(
    id: usize,
    mu_grid: &[f64],
    library: &[SnapshotMatrix],
    subset: &[usize],
    settings: &ScenarioSettings,
) -> Result<Scenario> {
    let snaps = scenario_snapshots(library, subset).map_err(|e| e.in_scenario(id))?;
    let mut modes = PodModes::compute(&snaps);
    if let Some(reference) = &settings.reference {
        modes.align_signs(reference);
    }
    build_scenario_from_modes(id, subset, mu_grid, &snaps, &modes, settings)
}

/// One scenario per subset; ids follow the subset order.
pub fn build_scenarios(
    mu_grid: &[f64],
    library: &[SnapshotMatrix],
    subsets: &[Vec<usize>],
    settings: &ScenarioSettings,
) -> Result<Vec<Scenario>> {
    subsets
        .par_iter()
        .enumerate()
        .map(|(id, subset)| build_scenario(id, mu_grid, library, subset, settings))
        .collect()
}

pub const OPERATOR_NAMES: [&str; 4] = ["c", "A", "H", "P"];

/// Pairwise Frobenius distances between scenario operators, one matrix per
/// operator in the order of [`OPERATOR_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDistances {
    pub matrices: [DMatrix<f64>; 4],
}

impl OperatorDistances {
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        OPERATOR_NAMES.iter().position(|&n| n == name).map(|i| &self.matrices[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &DMatrix<f64>)> {
        OPERATOR_NAMES.iter().copied().zip(self.matrices.iter())
    }

    pub fn normalized(&self) -> Self {
        Self {
            matrices: self.matrices.clone().map(|d| normalize_distance(&d)),
        }
    }

    pub fn total(&self) -> DMatrix<f64> {
        self.matrices.iter().skip(1).fold(self.matrices[0].clone(), |acc, d| acc + d)
    }
}

pub fn operator_distance_matrices(ops: &[&ReducedOperators]) -> Result<OperatorDistances> {
    let n = ops.len();
    if let Some(first) = ops.first() {
        for o in ops {
            o.validate()?;
            if o.r() != first.r() || o.p_hat.ncols() != first.p_hat.ncols() {
                return Err(SromError::ShapeMismatch(format!(
                    "operators with r = {}, d = {} and r = {}, d = {}",
                    first.r(),
                    first.p_hat.ncols(),
                    o.r(),
                    o.p_hat.ncols()
                )));
            }
        }
    }
    let mut matrices: [DMatrix<f64>; 4] = std::array::from_fn(|_| DMatrix::zeros(n, n));
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (ops[i], ops[j]);
            let d = [
                (&a.c_hat - &b.c_hat).norm(),
                (&a.a_hat - &b.a_hat).norm(),
                (&a.h_hat - &b.h_hat).norm(),
                (&a.p_hat - &b.p_hat).norm(),
            ];
            for (m, v) in matrices.iter_mut().zip(d) {
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    Ok(OperatorDistances { matrices })
}

/// `D / (max D - min D)`; the zero matrix when the range is below `1e-14`.
pub fn normalize_distance(d: &DMatrix<f64>) -> DMatrix<f64> {
    if d.is_empty() {
        return d.clone();
    }
    let range = d.max() - d.min();
    if range < 1e-14 {
        DMatrix::zeros(d.nrows(), d.ncols())
    } else {
        d / range
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterStrategy {
    #[default]
    SpectralEmbedKmeans,
    RiemannianKmeans,
}

/// Number of clusters: `"auto"` or a fixed integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterCount {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for ClusterCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClusterCount::Auto => s.serialize_str("auto"),
            ClusterCount::Fixed(m) => s.serialize_u64(*m as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(m) => Ok(ClusterCount::Fixed(m as usize)),
            Repr::Str(s) if s == "auto" => Ok(ClusterCount::Auto),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected \"auto\" or an integer, got {s:?}"))),
        }
    }
}

impl std::str::FromStr for ClusterCount {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(ClusterCount::Auto);
        }
        s.parse().map(ClusterCount::Fixed).map_err(|_| format!("expected \"auto\" or an integer, got {s:?}"))
    }
}

pub const AUTO_CLUSTER_COUNTS: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterOptions {
    pub strategy: ClusterStrategy,
    pub count: ClusterCount,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Permit fixed counts below 3 (degenerate runs and tests).
    pub allow_small_m: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            strategy: ClusterStrategy::default(),
            count: ClusterCount::Auto,
            seed: 0,
            restarts: 10,
            max_iter: 100,
            allow_small_m: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Zero-based cluster label per point, numbered by first appearance.
    pub labels: Vec<usize>,
    pub m: usize,
    pub silhouette: f64,
    pub geodesic_distances: DMatrix<f64>,
}

/// Symmetric matrix of pairwise geodesic distances.
pub fn geodesic_distance_matrix(points: &[StiefelPoint]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| geodesic_distance(&points[i], &points[j]).map_err(|e| e.in_pair(i, j)))
        .collect::<Result<Vec<f64>>>()?;
    let mut d = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        d[(i, j)] = v;
        d[(j, i)] = v;
    }
    Ok(d)
}

/// Renumber labels in order of first appearance.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = Vec::<(usize, usize)>::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect()
}

/// Mean silhouette coefficient from a precomputed distance matrix; points in
/// singleton clusters contribute zero.
pub fn silhouette(d: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    let m = labels.iter().copied().max().map_or(0, |l| l + 1);
    if n == 0 || m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d[(i, j)];
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..m)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// k-means++ seeding from a squared-distance oracle.
fn kmeanspp_seeds(n: usize, m: usize, dist2: impl Fn(usize, usize) -> f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut seeds = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, seeds[0])).collect();
    while seeds.len() < m {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            (0..n).find(|i| !seeds.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        seeds.push(next);
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(dist2(i, next));
        }
    }
    seeds
}

/// Lloyd's algorithm on the rows of `x` with k-means++ seeding and restarts;
/// the lowest-inertia run wins.
pub fn lloyd_kmeans(x: &DMatrix<f64>, m: usize, seed: u64, restarts: usize, max_iter: usize) -> Vec<usize> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_d2 = |i: usize, c: &DVector<f64>| (x.row(i).transpose() - c).norm_squared();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeanspp_seeds(n, m, |i, j| (x.row(i) - x.row(j)).norm_squared(), &mut rng);
        let mut centers: Vec<DVector<f64>> = seeds.iter().map(|&s| x.row(s).transpose()).collect();
        let mut labels = vec![usize::MAX; n];
        for _ in 0..max_iter {
            let new: Vec<usize> = (0..n)
                .map(|i| {
                    (0..m)
                        .min_by(|&a, &b| row_d2(i, &centers[a]).total_cmp(&row_d2(i, &centers[b])))
                        .unwrap()
                })
                .collect();
            if new == labels {
                break;
            }
            labels = new;
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                if !members.is_empty() {
                    *center = members.iter().map(|&i| x.row(i).transpose()).sum::<DVector<f64>>()
                        / members.len() as f64;
                }
            }
        }
        let inertia: f64 = (0..n).map(|i| row_d2(i, &centers[labels[i]])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    canonical_labels(&best.map(|(_, l)| l).unwrap_or_default())
}

/// Normalized spectral embedding of a distance matrix into `m` dimensions
/// (Gaussian affinity with median bandwidth, rows scaled to unit length).
pub fn spectral_embedding(d: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = d.nrows();
    let mut off: Vec<f64> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).filter(|&v| v > 0.0).collect();
    off.sort_by(f64::total_cmp);
    let sigma = if off.is_empty() { 1.0 } else { off[off.len() / 2] };
    let w = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (-d[(i, j)].powi(2) / (2.0 * sigma * sigma)).exp()
        }
    });
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum().max(f64::MIN_POSITIVE)).collect();
    let l = DMatrix::from_fn(n, n, |i, j| w[(i, j)] / (deg[i] * deg[j]).sqrt());
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = m.min(n);
    let mut emb = DMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, order[c])]);
    for mut row in emb.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    emb
}

fn riemannian_kmeans(points: &[StiefelPoint], d: &DMatrix<f64>, m: usize, opts: &ClusterOptions) -> Result<Vec<usize>> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seeds = kmeanspp_seeds(n, m, |i, j| d[(i, j)].powi(2), &mut rng);
    let mut centroids: Vec<StiefelPoint> = seeds.iter().map(|&s| points[s].clone()).collect();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..opts.max_iter {
        let mut new = Vec::with_capacity(n);
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = geodesic_distance(centroid, p).map_err(|e| e.in_pair(c, i))?;
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            new.push(best.0);
        }
        if new == labels {
            break;
        }
        labels = new;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<StiefelPoint> = (0..n).filter(|&i| labels[i] == c).map(|i| points[i].clone()).collect();
            if !members.is_empty() {
                *centroid = karcher_mean(&members, 1e-8, 50)?;
            }
        }
    }
    Ok(canonical_labels(&labels))
}

fn cluster_fixed(points: &[StiefelPoint], d: &DMatrix<f64>, m: usize, opts: &ClusterOptions) -> Result<Vec<usize>> {
    if m == 1 {
        return Ok(vec![0; points.len()]);
    }
    match opts.strategy {
        ClusterStrategy::SpectralEmbedKmeans => {
            Ok(lloyd_kmeans(&spectral_embedding(d, m), m, opts.seed, opts.restarts, opts.max_iter))
        }
        ClusterStrategy::RiemannianKmeans => riemannian_kmeans(points, d, m, opts),
    }
}

/// Cluster projection bases by geodesic distance.
pub fn cluster_bases(points: &[StiefelPoint], opts: &ClusterOptions) -> Result<Clustering> {
    let n = points.len();
    let d = geodesic_distance_matrix(points)?;
    let candidates: Vec<usize> = match opts.count {
        ClusterCount::Fixed(m) => {
            if m == 0 || (m < 3 && !opts.allow_small_m) {
                return Err(SromError::InvalidArgument(format!("need at least 3 clusters, got {m}")));
            }
            vec![m]
        }
        ClusterCount::Auto => AUTO_CLUSTER_COUNTS.iter().copied().filter(|&m| m <= n).collect(),
    };
    if candidates.is_empty() || candidates[0] > n {
        return Err(SromError::TooFewSamples {
            needed: candidates.first().copied().unwrap_or(AUTO_CLUSTER_COUNTS[0]),
            got: n,
        });
    }
    let mut best: Option<Clustering> = None;
    for m in candidates {
        let labels = cluster_fixed(points, &d, m, opts)?;
        let m_found = labels.iter().copied().max().map_or(0, |l| l + 1);
        if m_found < m {
            log::warn!("clustering into {m} groups produced only {m_found} nonempty clusters");
        }
        let score = silhouette(&d, &labels);
        if best.as_ref().is_none_or(|b| score > b.silhouette) {
            best = Some(Clustering {
                labels,
                m,
                silhouette: score,
                geodesic_distances: d.clone(),
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Per cluster, the member minimizing the summed normalized operator
/// distance to the other members; ties go to the lowest index. Returned in
/// cluster order.
pub fn select_anchors(labels: &[usize], m: usize, normalized: &OperatorDistances) -> Result<Vec<usize>> {
    let total = normalized.total();
    if total.nrows() != labels.len() {
        return Err(SromError::ShapeMismatch(format!(
            "{} labels for {} scenarios",
            labels.len(),
            total.nrows()
        )));
    }
    (0..m)
        .map(|c| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let mut best: Option<(usize, f64)> = None;
            for &j in &members {
                let score: f64 = members.iter().map(|&k| total[(j, k)]).sum();
                if best.is_none_or(|(_, b)| score < b) {
                    best = Some((j, score));
                }
            }
            best.map(|(j, _)| j).ok_or(SromError::EmptyCluster(c + 1))
        })
        .collect()
}

/// Truncated-SVD basis of the concatenated anchor snapshots.
#[derive(Debug, Clone)]
pub struct GlobalBasis {
    pub point: StiefelPoint,
    pub s_ref: DVector<f64>,
    pub singular_values: DVector<f64>,
    pub r: usize,
}

impl GlobalBasis {
    pub fn projection_basis(&self) -> Result<ProjectionBasis> {
        ProjectionBasis::from_full(self.point.matrix(), self.r, self.singular_values.clone())
    }
}

pub fn build_global_basis(
    anchors: &[&SnapshotMatrix],
    r: usize,
    q: usize,
    constraint: Option<Arc<ConstraintMatrix>>,
    reference: Option<&DMatrix<f64>>,
) -> Result<GlobalBasis> {
    if anchors.is_empty() {
        return Err(SromError::InvalidArgument("no anchors given".into()));
    }
    let snaps = SnapshotMatrix::concatenate(anchors)?.centered();
    let mut modes = PodModes::compute(&snaps);
    if let Some(reference) = reference {
        modes.align_signs(reference);
    }
    let basis = modes.basis(r, q)?;
    Ok(GlobalBasis {
        point: StiefelPoint::new(basis.full(), constraint)?,
        s_ref: snaps.s_ref,
        singular_values: modes.singular_values,
        r,
    })
}

/// The anchors (as scenario indices, in cluster order), the global basis and
/// the clustering that produced them.
#[derive(Debug, Clone)]
pub struct AnchorEnsemble {
    pub anchors: Vec<usize>,
    pub global: GlobalBasis,
    pub m: usize,
    pub cluster_labels: Vec<usize>,
}
