//! Monte Carlo propagation of stochastic bases and pointwise ensemble
//! statistics (mean, coefficient of variation, percentile confidence band).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::Scenario;
use crate::error::{Result, SromError};
use crate::latent::feature_map_g_columns;
use crate::ode::OdeOptions;
use crate::opinf::integrate_rom;
use crate::sampler::StochasticSample;

/// Largest fraction of failed samples tolerated by a propagation run.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
const COV_MEAN_FLOOR: f64 = 1e-12;
const CI_WIDTH_FLOOR: f64 = 1e-12;

/// A propagated sample in factored form: the field is
/// `s_ref + phi * coefficients`, with `coefficients = [s_hat; Xi g(s_hat)]`.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub index: usize,
    pub operator_index: usize,
    pub phi: DMatrix<f64>,
    pub coefficients: DMatrix<f64>,
}

impl LatentTrajectory {
    pub fn reconstruct(&self, s_ref: &DVector<f64>) -> DMatrix<f64> {
        self.reconstruct_columns(s_ref, 0, self.coefficients.ncols())
    }

    fn reconstruct_columns(&self, s_ref: &DVector<f64>, start: usize, len: usize) -> DMatrix<f64> {
        let mut out = &self.phi * self.coefficients.columns(start, len);
        for mut col in out.column_iter_mut() {
            col += s_ref;
        }
        out
    }

    pub fn n_times(&self) -> usize {
        self.coefficients.ncols()
    }
}

/// Integrate one sample with the operators and `Xi` of its selected anchor,
/// encoding and decoding with the sampled basis around `s_ref`.
pub fn propagate_latent(
    sample: &StochasticSample,
    anchors: &[&Scenario],
    s_ref: &DVector<f64>,
    s0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<LatentTrajectory> {
    let anchor = anchors.get(sample.operator_index).ok_or_else(|| {
        SromError::InvalidArgument(format!(
            "sample selects anchor {} of {}",
            sample.operator_index + 1,
            anchors.len()
        ))
    })?;
    let r = anchor.ops.r();
    let q = anchor.rep.q();
    let phi = sample.phi.matrix();
    if phi.ncols() != r + q || phi.nrows() != s0.len() || s_ref.len() != s0.len() {
        return Err(SromError::ShapeMismatch(format!(
            "sample basis {:?} for r = {r}, q = {q}, state length {}",
            phi.shape(),
            s0.len()
        )));
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(SromError::NonFinite);
    }
    let v_r = phi.columns(0, r);
    let s_hat0 = v_r.tr_mul(&(s0 - s_ref));
    let run = || -> Result<LatentTrajectory> {
        let s_hat = integrate_rom(&anchor.ops, &s_hat0, t_eval, opts)?;
        let enriched = &anchor.rep.xi * feature_map_g_columns(&s_hat, anchor.rep.p);
        let mut coefficients = DMatrix::zeros(r + q, s_hat.ncols());
        coefficients.rows_mut(0, r).copy_from(&s_hat);
        coefficients.rows_mut(r, q).copy_from(&enriched);
        Ok(LatentTrajectory {
            index: sample.index,
            operator_index: sample.operator_index,
            phi: phi.clone(),
            coefficients,
        })
    };
    run().map_err(|e| e.in_sample(sample.index))
}

/// Full-state trajectory (`N x k`) of one sample.
pub fn propagate_sample(
    sample: &StochasticSample,
    anchors: &[&Scenario],
    s_ref: &DVector<f64>,
    s0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<DMatrix<f64>> {
    propagate_latent(sample, anchors, s_ref, s0, t_eval, opts).map(|t| t.reconstruct(s_ref))
}

/// Deterministic reduced model of one scenario, in its own basis and
/// reference state.
pub fn deterministic_trajectory(
    scenario: &Scenario,
    s0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<DMatrix<f64>> {
    let s_hat0 = scenario.rep.encode(s0);
    let s_hat = integrate_rom(&scenario.ops, &s_hat0, t_eval, opts)?;
    Ok(scenario.rep.decode_columns(&s_hat))
}

#[derive(Debug)]
pub struct PropagationOutcome {
    pub trajectories: Vec<LatentTrajectory>,
    /// Failed sample indices with their errors.
    pub failures: Vec<(usize, SromError)>,
}

/// Propagate every sample. Failed samples are recorded; the run errors when
/// more than [`MAX_FAILURE_FRACTION`] of them fail.
pub fn propagate_all(
    samples: &[StochasticSample],
    anchors: &[&Scenario],
    s_ref: &DVector<f64>,
    s0: &DVector<f64>,
    t_eval: &[f64],
    opts: &OdeOptions,
) -> Result<PropagationOutcome> {
    let results: Vec<Result<LatentTrajectory>> = samples
        .par_iter()
        .map(|s| propagate_latent(s, anchors, s_ref, s0, t_eval, opts))
        .collect();
    let mut trajectories = Vec::new();
    let mut failures = Vec::new();
    for (s, res) in samples.iter().zip(results) {
        match res {
            Ok(t) => trajectories.push(t),
            Err(e) => {
                log::warn!("sample {} failed: {e}", s.index);
                failures.push((s.index, e));
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * samples.len() as f64 {
        return Err(SromError::TooManyFailures {
            failed: failures.len(),
            total: samples.len(),
        });
    }
    Ok(PropagationOutcome {
        trajectories,
        failures,
    })
}

/// Pointwise statistics over the ensemble. `cov` is zero and `cov_defined`
/// false where `|mean| <= 1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct UqEnsembleResult {
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub cov_defined: DMatrix<bool>,
    pub q_lower: DMatrix<f64>,
    pub q_upper: DMatrix<f64>,
    pub ci_width: DMatrix<f64>,
    pub confidence: f64,
    pub n_samples: usize,
}

/// Linear interpolation between order statistics of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct PointStats {
    mean: f64,
    std: f64,
    lower: f64,
    upper: f64,
}

/// Statistics of one grid point; `values` is reordered in place.
fn point_stats(values: &mut [f64], q_lo: f64, q_hi: f64) -> PointStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    values.sort_unstable_by(f64::total_cmp);
    PointStats {
        mean,
        std: var.sqrt(),
        lower: quantile_sorted(values, q_lo),
        upper: quantile_sorted(values, q_hi),
    }
}

struct StatsBuilder {
    result: UqEnsembleResult,
    q_lo: f64,
    q_hi: f64,
}

impl StatsBuilder {
    fn new(n: usize, k: usize, n_samples: usize, confidence: f64) -> Result<Self> {
        if n_samples < 2 {
            return Err(SromError::TooFewSamples { needed: 2, got: n_samples });
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(SromError::InvalidArgument(format!("confidence {confidence} outside (0, 1)")));
        }
        let z = || DMatrix::zeros(n, k);
        Ok(Self {
            result: UqEnsembleResult {
                mean: z(),
                std: z(),
                cov: z(),
                cov_defined: DMatrix::from_element(n, k, false),
                q_lower: z(),
                q_upper: z(),
                ci_width: z(),
                confidence,
                n_samples,
            },
            q_lo: (1.0 - confidence) / 2.0,
            q_hi: (1.0 + confidence) / 2.0,
        })
    }

    /// Fill the columns starting at `offset` from per-sample blocks.
    fn fill(&mut self, blocks: &[DMatrix<f64>], offset: usize) {
        let (n, k) = blocks[0].shape();
        let (q_lo, q_hi) = (self.q_lo, self.q_hi);
        let columns: Vec<Vec<PointStats>> = (0..k)
            .into_par_iter()
            .map(|j| {
                let mut values = vec![0.0; blocks.len()];
                (0..n)
                    .map(|i| {
                        for (v, b) in values.iter_mut().zip(blocks) {
                            *v = b[(i, j)];
                        }
                        point_stats(&mut values, q_lo, q_hi)
                    })
                    .collect()
            })
            .collect();
        let r = &mut self.result;
        for (j, col) in columns.into_iter().enumerate() {
            for (i, st) in col.into_iter().enumerate() {
                let idx = (i, offset + j);
                r.mean[idx] = st.mean;
                r.std[idx] = st.std;
                r.q_lower[idx] = st.lower;
                r.q_upper[idx] = st.upper;
                r.ci_width[idx] = st.upper - st.lower;
                if st.mean.abs() > COV_MEAN_FLOOR {
                    r.cov[idx] = st.std / st.mean.abs();
                    r.cov_defined[idx] = true;
                }
            }
        }
    }
}

/// Statistics of full-state trajectories (each `N x k`).
pub fn ensemble_statistics(trajectories: &[DMatrix<f64>], confidence: f64) -> Result<UqEnsembleResult> {
    let first = trajectories.first().ok_or(SromError::TooFewSamples { needed: 2, got: 0 })?;
    let (n, k) = first.shape();
    if trajectories.iter().any(|t| t.shape() != (n, k)) {
        return Err(SromError::ShapeMismatch("trajectories differ in shape".into()));
    }
    let mut builder = StatsBuilder::new(n, k, trajectories.len(), confidence)?;
    builder.fill(trajectories, 0);
    Ok(builder.result)
}

/// Same statistics as [`ensemble_statistics`] on factored trajectories,
/// reconstructing `block` time columns at a time to bound memory.
pub fn latent_ensemble_statistics(
    trajectories: &[LatentTrajectory],
    s_ref: &DVector<f64>,
    confidence: f64,
    block: usize,
) -> Result<UqEnsembleResult> {
    let first = trajectories.first().ok_or(SromError::TooFewSamples { needed: 2, got: 0 })?;
    let (n, k) = (s_ref.len(), first.n_times());
    if trajectories.iter().any(|t| t.n_times() != k || t.phi.nrows() != n) {
        return Err(SromError::ShapeMismatch("trajectories differ in shape".into()));
    }
    let mut builder = StatsBuilder::new(n, k, trajectories.len(), confidence)?;
    let block = block.max(1);
    let mut start = 0;
    while start < k {
        let len = block.min(k - start);
        let blocks: Vec<DMatrix<f64>> = trajectories
            .par_iter()
            .map(|t| t.reconstruct_columns(s_ref, start, len))
            .collect();
        builder.fill(&blocks, start);
        start += len;
    }
    Ok(builder.result)
}

/// `(QoI - mean) / (0.5 * ci_width)`, undefined (and zero) where the band
/// width is at most `1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct CiDeviation {
    pub values: DMatrix<f64>,
    pub defined: DMatrix<bool>,
}

impl CiDeviation {
    /// Fraction of defined points with `|delta| <= bound`.
    pub fn fraction_within(&self, bound: f64) -> f64 {
        let mut defined = 0usize;
        let mut inside = 0usize;
        for (v, d) in self.values.iter().zip(self.defined.iter()) {
            if *d {
                defined += 1;
                if v.abs() <= bound {
                    inside += 1;
                }
            }
        }
        if defined == 0 {
            0.0
        } else {
            inside as f64 / defined as f64
        }
    }
}

pub fn deviation_from_ci(qoi: &DMatrix<f64>, stats: &UqEnsembleResult) -> Result<CiDeviation> {
    if qoi.shape() != stats.mean.shape() {
        return Err(SromError::ShapeMismatch(format!(
            "field {:?} vs statistics {:?}",
            qoi.shape(),
            stats.mean.shape()
        )));
    }
    let (n, k) = qoi.shape();
    let mut values = DMatrix::zeros(n, k);
    let mut defined = DMatrix::from_element(n, k, false);
    for j in 0..k {
        for i in 0..n {
            let w = stats.ci_width[(i, j)];
            if w > CI_WIDTH_FLOOR {
                values[(i, j)] = (qoi[(i, j)] - stats.mean[(i, j)]) / (0.5 * w);
                defined[(i, j)] = true;
            }
        }
    }
    Ok(CiDeviation { values, defined })
}
