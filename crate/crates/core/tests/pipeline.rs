use std::path::Path;

use srom_core::config::{PipelineConfig, RankChoice};
use srom_core::ensemble::{ClusterCount, CombinationSpec};
use srom_core::error::SromError;
use srom_core::io::{read_matrix, write_matrix};
use srom_core::pipeline::*;
use srom_core::uq::deterministic_trajectory;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.fom.n_elements = 64;
    cfg.fom.t_final = 0.5;
    cfg.fom.mu_list = vec![0.6, 0.7, 0.8, 0.9, 1.0, 1.1];
    cfg.scenarios = CombinationSpec::Explicit {
        subsets: (0..6).map(|skip| (0..6).filter(|&i| i != skip).collect()).collect(),
    };
    cfg.ranks.r = RankChoice::Fixed(3);
    cfg.ranks.q = 2;
    cfg.clustering.m = ClusterCount::Fixed(3);
    cfg.sampling.n_samples = 40;
    cfg.propagation.test_mu = 0.85;
    cfg.propagation.t_final = 0.5;
    cfg.propagation.output_stride = 5;
    cfg
}

#[test]
fn small_run_persists_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config();
    let run = run_pipeline(&cfg, out).unwrap();

    assert_eq!(run.scenarios.scenarios.len(), 6);
    assert_eq!(run.anchors.ensemble.anchors.len(), 3);
    assert_eq!(run.sampling.samples.len(), 40);
    assert!(run.propagation.stats.is_some());
    assert_eq!(run.propagation.times.len(), 101);
    let names: Vec<_> = run.manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, STAGES);
    assert!(run.manifest.verify(out).is_empty());
    assert_eq!(RunManifest::load(out).unwrap(), run.manifest);

    // Every stage reloads into equivalent objects.
    let library = load_library(&cfg, out).unwrap();
    assert_eq!(library, run.library);
    let scenarios = load_scenarios(out).unwrap();
    assert_eq!(scenarios.rank, run.scenarios.rank);
    for (a, b) in scenarios.scenarios.iter().zip(&run.scenarios.scenarios) {
        assert_eq!(a.rep, b.rep);
        assert_eq!(a.ops, b.ops);
        assert_eq!(a.mu_set, b.mu_set);
    }
    let anchors = load_anchors(out).unwrap();
    assert_eq!(anchors.ensemble.anchors, run.anchors.ensemble.anchors);
    assert_eq!(anchors.clustering, run.anchors.clustering);
    let sampling = load_samples(&scenarios.scenarios, &anchors, out).unwrap();
    assert_eq!(sampling.manifest(), run.sampling.manifest());
    for (a, b) in sampling.samples.iter().zip(&run.sampling.samples) {
        assert_eq!(a.phi.matrix(), b.phi.matrix());
    }

    let report = replay(out).unwrap();
    assert!(report.ok(), "{report:?}");
    assert_eq!(report.n_samples, 40);

    // Tampering is detected.
    let alpha_path = out.join("sampling/alpha.bin");
    let mut alpha = read_matrix(&alpha_path).unwrap();
    alpha[0] += 1e-9;
    write_matrix(&alpha_path, &alpha).unwrap();
    let report = replay(out).unwrap();
    assert!(!report.alpha_matches);
    assert_eq!(report.modified_artifacts, vec!["sampling/alpha.bin".to_string()]);
}

#[test]
fn stages_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config();
    let full = run_pipeline(&cfg, &out.join("full")).unwrap();

    let staged = out.join("staged");
    let mut manifest = init_run(&cfg, &staged).unwrap();
    stage_simulate(&cfg, &staged, &mut manifest).unwrap();
    let library = load_library(&cfg, &staged).unwrap();
    stage_scenarios(&cfg, &library, &staged, &mut manifest).unwrap();
    let scenarios = load_scenarios(&staged).unwrap();
    stage_anchors(&cfg, &library, &scenarios, &staged, &mut manifest).unwrap();
    let anchors = load_anchors(&staged).unwrap();
    stage_sample(&cfg, &scenarios.scenarios, &anchors, &staged, &mut manifest).unwrap();
    let sampling = load_samples(&scenarios.scenarios, &anchors, &staged).unwrap();
    stage_propagate(&cfg, &scenarios.scenarios, &anchors, &sampling, &staged, &mut manifest).unwrap();
    let summary = stage_report(&staged, &mut manifest).unwrap();

    let sums = |root: &Path, m: &RunManifest| {
        assert!(m.verify(root).is_empty());
        m.stages
            .iter()
            .filter(|s| s.name != "report")
            .map(|s| s.artifacts.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(sums(&staged, &manifest), sums(&out.join("full"), &full.manifest));
    assert_eq!(summary.sample_manifest_sha256, full.summary.sample_manifest_sha256);
}

#[test]
fn rerunning_a_stage_drops_later_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let run = run_pipeline(&cfg, dir.path()).unwrap();
    let mut manifest = run.manifest.clone();
    stage_anchors(&cfg, &run.library, &run.scenarios, dir.path(), &mut manifest).unwrap();
    let names: Vec<_> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["simulate", "scenarios", "anchors"]);
    assert!(matches!(replay(dir.path()), Err(SromError::InvalidArgument(_))));
}

#[test]
fn single_scenario_run_matches_deterministic_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.scenarios = CombinationSpec::Explicit { subsets: vec![vec![1, 3, 4]] };
    cfg.clustering.m = ClusterCount::Fixed(1);
    cfg.clustering.allow_small_m = true;
    cfg.sampling.n_samples = 1;
    let run = run_pipeline(&cfg, dir.path()).unwrap();
    assert!(run.propagation.stats.is_none());
    assert_eq!(run.sampling.model.alpha.as_slice(), &[1.0]);

    let scenario = &run.scenarios.scenarios[0];
    let expected = deterministic_trajectory(
        scenario,
        &run.propagation.initial_state,
        &run.propagation.times,
        &cfg.propagation.ode(),
    )
    .unwrap();
    let got = run.propagation.trajectories[0].reconstruct(&run.anchors.ensemble.global.s_ref);
    let rel = (&got - &expected).norm() / expected.norm();
    assert!(rel < 1e-8, "relative difference {rel:e}");
}

#[test]
fn stage_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.ranks.r = RankChoice::Fixed(40);
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, SromError::Stage { stage: "scenarios", .. }), "{err}");
    assert!(matches!(err.root(), SromError::RankDeficient { .. }));
    // Earlier artifacts are kept for a resume.
    let manifest = RunManifest::load(dir.path()).unwrap();
    assert!(manifest.stage("simulate").is_some());
    assert!(manifest.verify(dir.path()).is_empty());
}
