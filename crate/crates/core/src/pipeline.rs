//! End-to-end driver. Each stage reads the artifacts of the previous ones,
//! writes its own under the output directory and records their SHA-256 in
//! `manifest.json`, so stages can be rerun or resumed individually.
//!
//! Layout of the output directory:
//!
//! ```text
//! config.toml  manifest.json  report.json
//! fom/         x_grid.bin times.bin mu_XX.bin
//! scenarios/   reference.bin rank.json index.json NNN/{basis,sigma,xi,s_ref,c,A,H,P}.bin
//! anchors/     geodesic.bin dist_{c,A,H,P}.bin global_{basis,s_ref,sigma}.bin anchors.json
//! sampling/    H.bin alpha.bin p.bin samples.json summary.json
//! propagation/ {mean,std,cov,cov_defined,q_lower,q_upper,ci_width}.bin
//!              envelope_final.csv summary.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, RankChoice};
use crate::ensemble::{
    build_global_basis, build_scenario_from_modes, cluster_bases, operator_distance_matrices, scenario_snapshots,
    select_anchors, AnchorEnsemble, Clustering, GlobalBasis, OperatorDistances, Scenario, ScenarioSettings,
    OPERATOR_NAMES,
};
use crate::error::{Result, SromError};
use crate::fom::{assemble_initial_state, simulate, SnapshotMatrix};
use crate::io::{create_dir, file_sha256, read_json, read_matrix, write_csv, write_json, write_matrix};
use crate::latent::{min_rank_for_threshold, select_rank, PodModes, PolyRepresentation, ProjectionBasis, RankRule};
use crate::opinf::{FeatureSpecGhat, GridCandidate, ReducedOperators};
use crate::sampler::{
    sample_dirichlet, sample_projection, select_operator_index, solve_concentration_detailed, DirichletModel,
    StochasticSample,
};
use crate::stiefel::{tangent_mean_residual, ConstraintMatrix, StiefelPoint};
use crate::uq::{
    deterministic_trajectory, deviation_from_ci, latent_ensemble_statistics, propagate_all, LatentTrajectory,
    UqEnsembleResult,
};

pub const STAGES: [&str; 6] = ["simulate", "scenarios", "anchors", "sample", "propagate", "report"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SOFTWARE: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub clustering: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Relative path -> SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub sample: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub stages: Vec<StageRecord>,
    pub failures: Vec<FailureRecord>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            software: SOFTWARE.to_string(),
            config: config.clone(),
            seeds: Seeds {
                clustering: config.clustering.seed,
                sampling: config.sampling.seed,
            },
            stages: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        read_json(out.join(MANIFEST_FILE))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(out.join(MANIFEST_FILE), self)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Replace the record of a stage, dropping the records (and failures)
    /// of every later stage since they no longer match.
    fn record(&mut self, record: StageRecord) {
        let pos = STAGES.iter().position(|s| *s == record.name).unwrap_or(STAGES.len());
        let later = |name: &str| STAGES.iter().position(|s| *s == name).is_some_and(|p| p >= pos);
        self.stages.retain(|s| !later(&s.name));
        self.failures.retain(|f| !later(&f.stage));
        self.stages.push(record);
    }

    fn require(&self, name: &'static str) -> Result<&StageRecord> {
        self.stage(name)
            .ok_or_else(|| SromError::InvalidArgument(format!("stage `{name}` has not been run")))
    }

    /// Recompute the checksum of every recorded artifact; returns the paths
    /// whose contents changed or disappeared.
    pub fn verify(&self, out: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for stage in &self.stages {
            for (rel, sum) in &stage.artifacts {
                if file_sha256(out.join(rel)).ok().as_ref() != Some(sum) {
                    bad.push(rel.clone());
                }
            }
        }
        bad
    }
}

/// Writes artifacts below the output directory and remembers their checksums.
struct Artifacts<'a> {
    out: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> Artifacts<'a> {
    fn new(out: &'a Path) -> Self {
        Self {
            out,
            files: BTreeMap::new(),
        }
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        Ok(path)
    }

    fn finish(&mut self, rel: &str, path: &Path) -> Result<()> {
        self.files.insert(rel.to_string(), file_sha256(path)?);
        Ok(())
    }

    fn matrix(&mut self, rel: &str, m: &DMatrix<f64>) -> Result<()> {
        let path = self.path(rel)?;
        write_matrix(&path, m)?;
        self.finish(rel, &path)
    }

    fn vector(&mut self, rel: &str, v: &DVector<f64>) -> Result<()> {
        self.matrix(rel, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.path(rel)?;
        write_json(&path, value)?;
        self.finish(rel, &path)
    }

    fn csv(&mut self, rel: &str, m: &DMatrix<f64>) -> Result<()> {
        let path = self.path(rel)?;
        write_csv(&path, m)?;
        self.finish(rel, &path)
    }

    fn into_record(self, name: &str, started: Instant) -> StageRecord {
        StageRecord {
            name: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
            artifacts: self.files,
        }
    }
}

fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(SromError::ShapeMismatch(format!("expected a column, got {:?}", m.shape())));
    }
    Ok(m.column(0).into_owned())
}

/// Start a run: validate, create the directory, write the config echo and a
/// fresh manifest.
pub fn init_run(config: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    config.validate()?;
    create_dir(out)?;
    write_config(config, out)?;
    let manifest = RunManifest::new(config);
    manifest.save(out)?;
    Ok(manifest)
}

fn write_config(config: &PipelineConfig, out: &Path) -> Result<()> {
    let text = config.to_toml_string()?;
    let path = out.join("config.toml");
    std::fs::write(&path, text).map_err(|e| SromError::io(&path, e))
}

/// Point an existing run at a changed configuration; stages run afterwards
/// use it, earlier artifacts are kept as they are.
pub fn update_config(manifest: &mut RunManifest, config: &PipelineConfig, out: &Path) -> Result<()> {
    config.validate()?;
    if manifest.config != *config {
        write_config(config, out)?;
        manifest.config = config.clone();
        manifest.seeds = Seeds {
            clustering: config.clustering.seed,
            sampling: config.sampling.seed,
        };
        manifest.save(out)?;
    }
    Ok(())
}

fn staged<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

// ---------------------------------------------------------------- simulate

pub fn simulate_library(config: &PipelineConfig) -> Result<Vec<SnapshotMatrix>> {
    config
        .fom
        .mu_list
        .par_iter()
        .map(|&mu| simulate(&config.fom.fom_config(mu)))
        .collect()
}

pub fn stage_simulate(config: &PipelineConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<SnapshotMatrix>> {
    staged("simulate", || {
        let started = Instant::now();
        let library = simulate_library(config)?;
        let mut art = Artifacts::new(out);
        art.vector("fom/x_grid.bin", &library[0].x_grid)?;
        art.vector("fom/times.bin", &library[0].times)?;
        for (i, snaps) in library.iter().enumerate() {
            art.matrix(&format!("fom/mu_{i:02}.bin"), &snaps.data)?;
        }
        manifest.record(art.into_record("simulate", started));
        manifest.save(out)?;
        Ok(library)
    })
}

pub fn load_library(config: &PipelineConfig, out: &Path) -> Result<Vec<SnapshotMatrix>> {
    let x = read_vector(out.join("fom/x_grid.bin"))?;
    let t = read_vector(out.join("fom/times.bin"))?;
    (0..config.fom.mu_list.len())
        .map(|i| SnapshotMatrix::new(read_matrix(out.join(format!("fom/mu_{i:02}.bin")))?, x.clone(), t.clone()))
        .collect()
}

// ---------------------------------------------------------------- scenarios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub r: usize,
    pub q: usize,
    /// False when `r` came from the configuration.
    pub selected: bool,
    pub rule: RankRule,
    pub threshold: f64,
    pub r_every_scenario: Option<usize>,
    pub r_any_scenario: Option<usize>,
    /// Smallest rank meeting the threshold, per scenario.
    pub per_scenario: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct ScenarioStage {
    /// POD modes of the full library; every basis is sign-aligned to it.
    pub reference: Arc<DMatrix<f64>>,
    pub rank: RankReport,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioRecord {
    id: usize,
    mu_indices: Vec<usize>,
    mu_set: Vec<f64>,
    r: usize,
    q: usize,
    p: usize,
    gamma: f64,
    lambdas: [f64; 3],
    training_error: f64,
    ghat: FeatureSpecGhat,
    candidates: Vec<GridCandidate>,
}

fn ghat_spec(config: &PipelineConfig, r: usize) -> FeatureSpecGhat {
    FeatureSpecGhat {
        r,
        p: config.opinf.p,
        degrees: config.opinf.degrees(),
        dictionary: config.opinf.ghat_dictionary,
    }
}

pub fn compute_scenarios(config: &PipelineConfig, library: &[SnapshotMatrix]) -> Result<ScenarioStage> {
    let mu_grid = &config.fom.mu_list;
    let subsets = config.scenarios.subsets(mu_grid.len())?;
    let all: Vec<usize> = (0..mu_grid.len()).collect();
    let reference = Arc::new(PodModes::compute(&scenario_snapshots(library, &all)?).modes);

    let modes: Vec<PodModes> = subsets
        .par_iter()
        .enumerate()
        .map(|(id, subset)| {
            let snaps = scenario_snapshots(library, subset).map_err(|e| e.in_scenario(id))?;
            let mut modes = PodModes::compute(&snaps);
            modes.align_signs(&reference);
            Ok(modes)
        })
        .collect::<Result<_>>()?;

    let spectra: Vec<DVector<f64>> = modes.iter().map(|m| m.singular_values.clone()).collect();
    let ranks = &config.ranks;
    let r_every = select_rank(&spectra, ranks.energy_threshold, RankRule::EveryScenario).ok();
    let r_any = select_rank(&spectra, ranks.energy_threshold, RankRule::AnyScenario).ok();
    let r = match ranks.r {
        RankChoice::Fixed(r) => r,
        RankChoice::Auto => select_rank(&spectra, ranks.energy_threshold, ranks.rule)?,
    };
    let rank = RankReport {
        r,
        q: ranks.q,
        selected: ranks.r == RankChoice::Auto,
        rule: ranks.rule,
        threshold: ranks.energy_threshold,
        r_every_scenario: r_every,
        r_any_scenario: r_any,
        per_scenario: spectra
            .iter()
            .map(|s| min_rank_for_threshold(s, ranks.energy_threshold))
            .collect(),
    };
    log::info!("r = {r} ({} scenarios)", subsets.len());

    let settings = ScenarioSettings {
        r,
        q: ranks.q,
        p: config.opinf.p,
        gamma_grid: config.opinf.gamma_grid.clone(),
        ghat: ghat_spec(config, r),
        lambda_grid: config.opinf.grid(),
        selection_tolerance: config.opinf.selection_tolerance,
        ode: config.opinf.ode(),
        reference: Some(reference.clone()),
    };
    let scenarios = subsets
        .par_iter()
        .zip(modes.par_iter())
        .enumerate()
        .map(|(id, (subset, modes))| {
            let snaps = scenario_snapshots(library, subset).map_err(|e| e.in_scenario(id))?;
            let scenario = build_scenario_from_modes(id, subset, mu_grid, &snaps, modes, &settings)?;
            log::debug!(
                "scenario {id} {:?}: gamma {:.0e}, lambdas {:?}, error {:.4}",
                scenario.mu_set,
                scenario.rep.gamma,
                scenario.ops.lambdas,
                scenario.training_error
            );
            Ok(scenario)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ScenarioStage {
        reference,
        rank,
        scenarios,
    })
}

fn save_scenarios(stage: &ScenarioStage, art: &mut Artifacts) -> Result<()> {
    art.matrix("scenarios/reference.bin", &stage.reference)?;
    art.json("scenarios/rank.json", &stage.rank)?;
    let mut index = Vec::new();
    for s in &stage.scenarios {
        let dir = format!("scenarios/{:03}", s.id);
        art.matrix(&format!("{dir}/basis.bin"), &s.rep.basis.full())?;
        art.vector(&format!("{dir}/sigma.bin"), &s.rep.basis.singular_values)?;
        art.matrix(&format!("{dir}/xi.bin"), &s.rep.xi)?;
        art.vector(&format!("{dir}/s_ref.bin"), &s.rep.s_ref)?;
        art.vector(&format!("{dir}/c.bin"), &s.ops.c_hat)?;
        art.matrix(&format!("{dir}/A.bin"), &s.ops.a_hat)?;
        art.matrix(&format!("{dir}/H.bin"), &s.ops.h_hat)?;
        art.matrix(&format!("{dir}/P.bin"), &s.ops.p_hat)?;
        index.push(ScenarioRecord {
            id: s.id,
            mu_indices: s.mu_indices.clone(),
            mu_set: s.mu_set.clone(),
            r: s.rep.r(),
            q: s.rep.q(),
            p: s.rep.p,
            gamma: s.rep.gamma,
            lambdas: s.ops.lambdas,
            training_error: s.training_error,
            ghat: s.ops.spec.clone(),
            candidates: s.candidates.clone(),
        });
    }
    art.json("scenarios/index.json", &index)
}

pub fn stage_scenarios(
    config: &PipelineConfig,
    library: &[SnapshotMatrix],
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<ScenarioStage> {
    staged("scenarios", || {
        let started = Instant::now();
        let stage = compute_scenarios(config, library)?;
        let mut art = Artifacts::new(out);
        save_scenarios(&stage, &mut art)?;
        manifest.record(art.into_record("scenarios", started));
        manifest.save(out)?;
        Ok(stage)
    })
}

pub fn load_scenarios(out: &Path) -> Result<ScenarioStage> {
    let reference = Arc::new(read_matrix(out.join("scenarios/reference.bin"))?);
    let rank: RankReport = read_json(out.join("scenarios/rank.json"))?;
    let index: Vec<ScenarioRecord> = read_json(out.join("scenarios/index.json"))?;
    let scenarios = index
        .into_iter()
        .map(|rec| {
            let dir = out.join(format!("scenarios/{:03}", rec.id));
            let basis = ProjectionBasis::from_full(
                &read_matrix(dir.join("basis.bin"))?,
                rec.r,
                read_vector(dir.join("sigma.bin"))?,
            )?;
            let rep = PolyRepresentation {
                basis,
                xi: read_matrix(dir.join("xi.bin"))?,
                p: rec.p,
                gamma: rec.gamma,
                s_ref: read_vector(dir.join("s_ref.bin"))?,
            };
            rep.validate()?;
            let ops = ReducedOperators {
                c_hat: read_vector(dir.join("c.bin"))?,
                a_hat: read_matrix(dir.join("A.bin"))?,
                h_hat: read_matrix(dir.join("H.bin"))?,
                p_hat: read_matrix(dir.join("P.bin"))?,
                spec: rec.ghat,
                lambdas: rec.lambdas,
            };
            ops.validate()?;
            Ok(Scenario {
                id: rec.id,
                mu_indices: rec.mu_indices,
                mu_set: rec.mu_set,
                rep,
                ops,
                training_error: rec.training_error,
                candidates: rec.candidates,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioStage {
        reference,
        rank,
        scenarios,
    })
}

// ---------------------------------------------------------------- anchors

#[derive(Debug, Clone)]
pub struct AnchorStage {
    pub constraint: Arc<ConstraintMatrix>,
    pub distances: OperatorDistances,
    pub clustering: Clustering,
    pub ensemble: AnchorEnsemble,
}

impl AnchorStage {
    pub fn anchor_scenarios<'a>(&self, scenarios: &'a [Scenario]) -> Vec<&'a Scenario> {
        self.ensemble.anchors.iter().map(|&i| &scenarios[i]).collect()
    }

    pub fn anchor_points(&self, scenarios: &[Scenario]) -> Result<Vec<StiefelPoint>> {
        self.ensemble
            .anchors
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                scenarios[i]
                    .stiefel_point(Some(self.constraint.clone()))
                    .map_err(|e| e.in_anchor(a + 1))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnchorRecord {
    /// Scenario ids, one per cluster.
    anchors: Vec<usize>,
    m: usize,
    labels: Vec<usize>,
    silhouette: f64,
    r: usize,
}

pub fn compute_anchors(
    config: &PipelineConfig,
    library: &[SnapshotMatrix],
    stage: &ScenarioStage,
) -> Result<AnchorStage> {
    let scenarios = &stage.scenarios;
    let n = scenarios.first().map(|s| s.rep.basis.n_states()).ok_or(SromError::TooFewSamples {
        needed: 1,
        got: 0,
    })?;
    let constraint = Arc::new(ConstraintMatrix::dirichlet_endpoints(n));
    let points = scenarios
        .iter()
        .map(|s| s.stiefel_point(Some(constraint.clone())).map_err(|e| e.in_scenario(s.id)))
        .collect::<Result<Vec<_>>>()?;
    let clustering = cluster_bases(&points, &config.clustering.options())?;
    log::info!("m = {} (silhouette {:.3})", clustering.m, clustering.silhouette);
    let ops: Vec<&ReducedOperators> = scenarios.iter().map(|s| &s.ops).collect();
    let distances = operator_distance_matrices(&ops)?;
    let anchors = select_anchors(&clustering.labels, clustering.m, &distances.normalized())?;
    let anchor_snaps = anchors
        .iter()
        .map(|&i| {
            let parts: Vec<&SnapshotMatrix> = scenarios[i].mu_indices.iter().map(|&k| &library[k]).collect();
            SnapshotMatrix::concatenate(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SnapshotMatrix> = anchor_snaps.iter().collect();
    let global = build_global_basis(
        &refs,
        stage.rank.r,
        stage.rank.q,
        Some(constraint.clone()),
        Some(&stage.reference),
    )?;
    Ok(AnchorStage {
        constraint,
        distances,
        ensemble: AnchorEnsemble {
            anchors,
            global,
            m: clustering.m,
            cluster_labels: clustering.labels.clone(),
        },
        clustering,
    })
}

pub fn stage_anchors(
    config: &PipelineConfig,
    library: &[SnapshotMatrix],
    scenarios: &ScenarioStage,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<AnchorStage> {
    staged("anchors", || {
        let started = Instant::now();
        let stage = compute_anchors(config, library, scenarios)?;
        let mut art = Artifacts::new(out);
        art.matrix("anchors/geodesic.bin", &stage.clustering.geodesic_distances)?;
        for (name, d) in stage.distances.iter() {
            art.matrix(&format!("anchors/dist_{name}.bin"), d)?;
        }
        let global = &stage.ensemble.global;
        art.matrix("anchors/global_basis.bin", global.point.matrix())?;
        art.vector("anchors/global_s_ref.bin", &global.s_ref)?;
        art.vector("anchors/global_sigma.bin", &global.singular_values)?;
        art.json(
            "anchors/anchors.json",
            &AnchorRecord {
                anchors: stage.ensemble.anchors.clone(),
                m: stage.ensemble.m,
                labels: stage.ensemble.cluster_labels.clone(),
                silhouette: stage.clustering.silhouette,
                r: global.r,
            },
        )?;
        manifest.record(art.into_record("anchors", started));
        manifest.save(out)?;
        Ok(stage)
    })
}

pub fn load_anchors(out: &Path) -> Result<AnchorStage> {
    let rec: AnchorRecord = read_json(out.join("anchors/anchors.json"))?;
    let basis = read_matrix(out.join("anchors/global_basis.bin"))?;
    let constraint = Arc::new(ConstraintMatrix::dirichlet_endpoints(basis.nrows()));
    let mut matrices = Vec::new();
    for name in OPERATOR_NAMES {
        matrices.push(read_matrix(out.join(format!("anchors/dist_{name}.bin")))?);
    }
    let matrices: [DMatrix<f64>; 4] = matrices
        .try_into()
        .map_err(|_| SromError::InvalidArgument("expected four distance matrices".into()))?;
    let global = GlobalBasis {
        point: StiefelPoint::new(basis, Some(constraint.clone()))?,
        s_ref: read_vector(out.join("anchors/global_s_ref.bin"))?,
        singular_values: read_vector(out.join("anchors/global_sigma.bin"))?,
        r: rec.r,
    };
    Ok(AnchorStage {
        constraint,
        distances: OperatorDistances { matrices },
        clustering: Clustering {
            labels: rec.labels.clone(),
            m: rec.m,
            silhouette: rec.silhouette,
            geodesic_distances: read_matrix(out.join("anchors/geodesic.bin"))?,
        },
        ensemble: AnchorEnsemble {
            anchors: rec.anchors,
            global,
            m: rec.m,
            cluster_labels: rec.labels,
        },
    })
}

// ---------------------------------------------------------------- sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub p: Vec<f64>,
    /// One-based anchor whose operators drive the sample.
    pub anchor: usize,
}

/// Everything needed to regenerate the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub alpha: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub alpha: Vec<f64>,
    pub qp_objective: f64,
    pub qp_kkt_residual: f64,
    pub h_min_eigenvalue: f64,
    pub mean_anchor_log_norm: f64,
    /// `|| mean of log_{Phi*}(Phi_j) ||_F`, `None` if a logarithm failed.
    pub frechet_residual: Option<f64>,
    /// Samples per anchor.
    pub anchor_usage: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SampleStage {
    pub model: DirichletModel,
    pub samples: Vec<StochasticSample>,
    pub summary: SamplingSummary,
}

impl SampleStage {
    pub fn manifest(&self) -> SampleManifest {
        SampleManifest {
            seed: self.samples.first().map_or(0, |s| s.seed),
            alpha: self.model.alpha.iter().copied().collect(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    index: s.index,
                    p: s.p.iter().copied().collect(),
                    anchor: s.operator_index + 1,
                })
                .collect(),
        }
    }
}

fn p_matrix(samples: &[StochasticSample], m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(samples.len(), m, |i, j| samples[i].p[j])
}

fn sampling_summary(model: &DirichletModel, samples: &[StochasticSample]) -> SamplingSummary {
    let phis: Vec<StiefelPoint> = samples.iter().map(|s| s.phi.clone()).collect();
    let frechet_residual = match tangent_mean_residual(&model.base, &phis) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("Frechet-mean diagnostic unavailable: {e}");
            None
        }
    };
    let mut anchor_usage = vec![0; model.m()];
    for s in samples {
        anchor_usage[s.operator_index] += 1;
    }
    SamplingSummary {
        alpha: model.alpha.iter().copied().collect(),
        qp_objective: model.qp.objective,
        qp_kkt_residual: model.qp.kkt_residual,
        h_min_eigenvalue: model.min_eigenvalue(),
        mean_anchor_log_norm: model.mean_anchor_log_norm(),
        frechet_residual,
        anchor_usage,
    }
}

pub fn compute_samples(config: &PipelineConfig, scenarios: &[Scenario], anchors: &AnchorStage) -> Result<SampleStage> {
    let points = anchors.anchor_points(scenarios)?;
    let model = DirichletModel::new(&points, &anchors.ensemble.global.point, config.sampling.alpha_floor)?;
    log::info!("alpha = {:?}", model.alpha.as_slice());
    let samples = crate::sampler::generate_samples(&model, config.sampling.n_samples, config.sampling.seed)?;
    let summary = sampling_summary(&model, &samples);
    Ok(SampleStage {
        model,
        samples,
        summary,
    })
}

pub fn stage_sample(
    config: &PipelineConfig,
    scenarios: &[Scenario],
    anchors: &AnchorStage,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<SampleStage> {
    staged("sample", || {
        let started = Instant::now();
        let stage = compute_samples(config, scenarios, anchors)?;
        let mut art = Artifacts::new(out);
        art.matrix("sampling/H.bin", &stage.model.h)?;
        art.vector("sampling/alpha.bin", &stage.model.alpha)?;
        art.matrix("sampling/p.bin", &p_matrix(&stage.samples, stage.model.m()))?;
        art.json("sampling/samples.json", &stage.manifest())?;
        art.json("sampling/summary.json", &stage.summary)?;
        manifest.record(art.into_record("sample", started));
        manifest.save(out)?;
        Ok(stage)
    })
}

/// Rebuild the samples from the stored weights; the projection matrices
/// are recomputed from the anchors.
pub fn load_samples(scenarios: &[Scenario], anchors: &AnchorStage, out: &Path) -> Result<SampleStage> {
    let points = anchors.anchor_points(scenarios)?;
    let floor = RunManifest::load(out)?.config.sampling.alpha_floor;
    let model = DirichletModel::new(&points, &anchors.ensemble.global.point, floor)?;
    let stored: SampleManifest = read_json(out.join("sampling/samples.json"))?;
    let summary: SamplingSummary = read_json(out.join("sampling/summary.json"))?;
    let samples = stored
        .samples
        .par_iter()
        .map(|rec| {
            let p = DVector::from_vec(rec.p.clone());
            let phi = sample_projection(&p, &model).map_err(|e| e.in_sample(rec.index))?;
            Ok(StochasticSample {
                index: rec.index,
                seed: stored.seed,
                p,
                phi,
                operator_index: rec.anchor - 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleStage {
        model,
        samples,
        summary,
    })
}

// ---------------------------------------------------------------- propagate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorCheck {
    /// One-based anchor number.
    pub anchor: usize,
    pub scenario: usize,
    pub mu_set: Vec<f64>,
    /// Fraction of space-time points with `|Delta_CI| <= 1`.
    pub fraction_within_ci: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCheck {
    pub fraction_within_ci: f64,
    /// `||truth - mean||_F / ||truth||_F`.
    pub mean_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub test_mu: f64,
    pub n_times: usize,
    pub n_samples: usize,
    pub n_succeeded: usize,
    pub failures: Vec<FailureRecord>,
    pub confidence: f64,
    pub statistics: bool,
    pub anchor_checks: Vec<AnchorCheck>,
    pub truth: Option<TruthCheck>,
}

#[derive(Debug, Clone)]
pub struct PropagationStage {
    pub times: Vec<f64>,
    pub initial_state: DVector<f64>,
    pub trajectories: Vec<LatentTrajectory>,
    /// `None` with fewer than two successful samples.
    pub stats: Option<UqEnsembleResult>,
    /// Full-order solution at the test parameter on the output times.
    pub truth: DMatrix<f64>,
    pub summary: PropagationSummary,
}

pub fn compute_propagation(
    config: &PipelineConfig,
    scenarios: &[Scenario],
    anchors: &AnchorStage,
    sampling: &SampleStage,
) -> Result<PropagationStage> {
    let prop = &config.propagation;
    let times = config.propagation_times();
    let mut fom = config.fom.fom_config(prop.test_mu);
    fom.t_final = prop.t_final;
    let s0 = assemble_initial_state(prop.test_mu, &fom.grid());
    let anchor_scenarios = anchors.anchor_scenarios(scenarios);
    let s_ref = &anchors.ensemble.global.s_ref;
    let ode = prop.ode();

    let outcome = propagate_all(&sampling.samples, &anchor_scenarios, s_ref, &s0, &times, &ode)?;
    let failures: Vec<FailureRecord> = outcome
        .failures
        .iter()
        .map(|(i, e)| FailureRecord {
            stage: "propagate".into(),
            sample: Some(*i),
            message: e.to_string(),
        })
        .collect();
    let stats = if outcome.trajectories.len() >= 2 {
        Some(latent_ensemble_statistics(
            &outcome.trajectories,
            s_ref,
            prop.confidence,
            prop.stats_block,
        )?)
    } else {
        log::warn!("fewer than two propagated samples; skipping statistics");
        None
    };

    let full = simulate(&fom)?;
    let stride = prop.output_stride;
    let truth = DMatrix::from_fn(full.n_states(), times.len(), |i, j| full.data[(i, j * stride)]);

    let anchor_checks = anchor_scenarios
        .iter()
        .enumerate()
        .map(|(a, sc)| {
            let res = deterministic_trajectory(sc, &s0, &times, &ode).and_then(|traj| match &stats {
                Some(st) => deviation_from_ci(&traj, st).map(|d| Some(d.fraction_within(1.0))),
                None => Ok(None),
            });
            let (fraction_within_ci, error) = match res {
                Ok(f) => (f, None),
                Err(e) => (None, Some(e.to_string())),
            };
            AnchorCheck {
                anchor: a + 1,
                scenario: sc.id,
                mu_set: sc.mu_set.clone(),
                fraction_within_ci,
                error,
            }
        })
        .collect();
    let truth_check = match &stats {
        Some(st) => Some(TruthCheck {
            fraction_within_ci: deviation_from_ci(&truth, st)?.fraction_within(1.0),
            mean_relative_error: (&truth - &st.mean).norm() / truth.norm(),
        }),
        None => None,
    };
    let summary = PropagationSummary {
        test_mu: prop.test_mu,
        n_times: times.len(),
        n_samples: sampling.samples.len(),
        n_succeeded: outcome.trajectories.len(),
        failures,
        confidence: prop.confidence,
        statistics: stats.is_some(),
        anchor_checks,
        truth: truth_check,
    };
    Ok(PropagationStage {
        times,
        initial_state: s0,
        trajectories: outcome.trajectories,
        stats,
        truth,
        summary,
    })
}

pub fn stage_propagate(
    config: &PipelineConfig,
    scenarios: &[Scenario],
    anchors: &AnchorStage,
    sampling: &SampleStage,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<PropagationStage> {
    staged("propagate", || {
        let started = Instant::now();
        let stage = compute_propagation(config, scenarios, anchors, sampling)?;
        let mut art = Artifacts::new(out);
        if let Some(st) = &stage.stats {
            art.matrix("propagation/mean.bin", &st.mean)?;
            art.matrix("propagation/std.bin", &st.std)?;
            art.matrix("propagation/cov.bin", &st.cov)?;
            art.matrix("propagation/cov_defined.bin", &st.cov_defined.map(|b| if b { 1.0 } else { 0.0 }))?;
            art.matrix("propagation/q_lower.bin", &st.q_lower)?;
            art.matrix("propagation/q_upper.bin", &st.q_upper)?;
            art.matrix("propagation/ci_width.bin", &st.ci_width)?;
            let last = stage.times.len() - 1;
            let x = config.fom.fom_config(config.propagation.test_mu).grid();
            let envelope = DMatrix::from_fn(x.len(), 5, |i, j| match j {
                0 => x[i],
                1 => st.mean[(i, last)],
                2 => st.q_lower[(i, last)],
                3 => st.q_upper[(i, last)],
                _ => stage.truth[(i, last)],
            });
            art.csv("propagation/envelope_final.csv", &envelope)?;
        }
        art.matrix("propagation/truth.bin", &stage.truth)?;
        art.json("propagation/summary.json", &stage.summary)?;
        manifest.record(art.into_record("propagate", started));
        manifest.failures.extend(stage.summary.failures.iter().cloned());
        manifest.save(out)?;
        Ok(stage)
    })
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    pub anchor: usize,
    pub scenario: usize,
    pub mu_set: Vec<f64>,
    pub training_error: f64,
}

/// Machine-readable summary of a run, assembled from its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub software: String,
    pub rank: RankReport,
    pub n_scenarios: usize,
    pub training_error_range: [f64; 2],
    pub m: usize,
    pub silhouette: f64,
    pub anchors: Vec<AnchorSummary>,
    pub sampling: SamplingSummary,
    pub propagation: PropagationSummary,
    pub sample_manifest_sha256: String,
    pub stage_seconds: BTreeMap<String, f64>,
}

pub fn build_report(out: &Path) -> Result<RunSummary> {
    let manifest = RunManifest::load(out)?;
    let sample_sha = manifest
        .require("sample")?
        .artifacts
        .get("sampling/samples.json")
        .cloned()
        .ok_or_else(|| SromError::InvalidArgument("sample manifest missing from run manifest".into()))?;
    manifest.require("propagate")?;
    let rank: RankReport = read_json(out.join("scenarios/rank.json"))?;
    let index: Vec<ScenarioRecord> = read_json(out.join("scenarios/index.json"))?;
    let anchors: AnchorRecord = read_json(out.join("anchors/anchors.json"))?;
    let errors = index.iter().map(|s| s.training_error);
    let range = [
        errors.clone().fold(f64::INFINITY, f64::min),
        errors.fold(f64::NEG_INFINITY, f64::max),
    ];
    Ok(RunSummary {
        software: manifest.software.clone(),
        rank,
        n_scenarios: index.len(),
        training_error_range: range,
        m: anchors.m,
        silhouette: anchors.silhouette,
        anchors: anchors
            .anchors
            .iter()
            .enumerate()
            .map(|(a, &i)| AnchorSummary {
                anchor: a + 1,
                scenario: i,
                mu_set: index[i].mu_set.clone(),
                training_error: index[i].training_error,
            })
            .collect(),
        sampling: read_json(out.join("sampling/summary.json"))?,
        propagation: read_json(out.join("propagation/summary.json"))?,
        sample_manifest_sha256: sample_sha,
        stage_seconds: manifest.stages.iter().map(|s| (s.name.clone(), s.seconds)).collect(),
    })
}

pub fn stage_report(out: &Path, manifest: &mut RunManifest) -> Result<RunSummary> {
    staged("report", || {
        let started = Instant::now();
        let summary = build_report(out)?;
        let mut art = Artifacts::new(out);
        art.json("report.json", &summary)?;
        manifest.record(art.into_record("report", started));
        manifest.save(out)?;
        Ok(summary)
    })
}

// ---------------------------------------------------------------- run

#[derive(Debug)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub library: Vec<SnapshotMatrix>,
    pub scenarios: ScenarioStage,
    pub anchors: AnchorStage,
    pub sampling: SampleStage,
    pub propagation: PropagationStage,
    pub summary: RunSummary,
    pub manifest: RunManifest,
}

/// Run every stage in order, writing artifacts to `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineRun> {
    let mut manifest = init_run(config, out)?;
    let library = stage_simulate(config, out, &mut manifest)?;
    let scenarios = stage_scenarios(config, &library, out, &mut manifest)?;
    let anchors = stage_anchors(config, &library, &scenarios, out, &mut manifest)?;
    let sampling = stage_sample(config, &scenarios.scenarios, &anchors, out, &mut manifest)?;
    let propagation = stage_propagate(config, &scenarios.scenarios, &anchors, &sampling, out, &mut manifest)?;
    let summary = stage_report(out, &mut manifest)?;
    Ok(PipelineRun {
        config: config.clone(),
        library,
        scenarios,
        anchors,
        sampling,
        propagation,
        summary,
        manifest,
    })
}

// ---------------------------------------------------------------- replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub n_samples: usize,
    /// Artifacts whose checksum no longer matches the manifest.
    pub modified_artifacts: Vec<String>,
    pub h_matches: bool,
    pub alpha_matches: bool,
    pub p_matches: bool,
    pub operator_indices_match: bool,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.modified_artifacts.is_empty()
            && self.h_matches
            && self.alpha_matches
            && self.p_matches
            && self.operator_indices_match
    }
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Recompute `H`, `alpha`, the Dirichlet weights and the operator indices
/// from the stored anchors and the manifest seed, and compare bitwise with
/// the stored sampling artifacts.
pub fn replay(out: &Path) -> Result<ReplayReport> {
    let manifest = RunManifest::load(out)?;
    manifest.require("sample")?;
    let modified_artifacts = manifest.verify(out);
    let scenarios = load_scenarios(out)?;
    let anchors = load_anchors(out)?;
    let points = anchors.anchor_points(&scenarios.scenarios)?;
    let model = DirichletModel::new(
        &points,
        &anchors.ensemble.global.point,
        manifest.config.sampling.alpha_floor,
    )?;
    let stored_h = read_matrix(out.join("sampling/H.bin"))?;
    let stored_alpha = read_vector(out.join("sampling/alpha.bin"))?;
    let stored_p = read_matrix(out.join("sampling/p.bin"))?;
    let stored: SampleManifest = read_json(out.join("sampling/samples.json"))?;

    // Sampling from the stored alpha isolates the draw from the QP.
    let alpha = solve_concentration_detailed(&stored_h, manifest.config.sampling.alpha_floor)?.alpha;
    let draws = sample_dirichlet(&stored_alpha, stored.samples.len(), manifest.seeds.sampling)?;
    let p = DMatrix::from_fn(draws.len(), stored_alpha.len(), |i, j| draws[i][j]);
    let indices: Vec<usize> = draws.iter().map(|d| select_operator_index(d) + 1).collect();
    Ok(ReplayReport {
        n_samples: draws.len(),
        modified_artifacts,
        h_matches: model.h.shape() == stored_h.shape() && bitwise_eq(model.h.as_slice(), stored_h.as_slice()),
        alpha_matches: bitwise_eq(alpha.as_slice(), stored_alpha.as_slice())
            && bitwise_eq(model.alpha.as_slice(), stored_alpha.as_slice()),
        p_matches: p.shape() == stored_p.shape()
            && bitwise_eq(p.as_slice(), stored_p.as_slice())
            && stored.samples.iter().zip(&draws).all(|(s, d)| bitwise_eq(&s.p, d.as_slice())),
        operator_indices_match: stored.samples.iter().map(|s| s.anchor).eq(indices.iter().copied()),
    })
}
