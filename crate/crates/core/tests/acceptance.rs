//! Acceptance checks against the Burgers reference setup. Each criterion is a
//! separate test that writes one `PASS`/`FAIL` line to stderr (uncaptured, so
//! the lines are visible in a plain `cargo test` run). Soft criteria are
//! reported but never fail the test.
//!
//! The default pipeline run is shared between tests and takes a few minutes.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srom_core::config::{PipelineConfig, RankChoice};
use srom_core::ensemble::{build_scenario, scenario_snapshots, ClusterCount, CombinationSpec, ScenarioSettings};
use srom_core::latent::{energy_error, select_gamma, snapshot_energy_captured, PodModes, PolyRepresentation};
use srom_core::linalg::thin_qr;
use srom_core::opinf::{rom_rhs, time_derivatives, FeatureSpecGhat, ReducedOperators, RegressionProblem};
use srom_core::pipeline::*;
use srom_core::sampler::{sample_dirichlet, solve_concentration};
use srom_core::stiefel::{riemann_exp, riemann_log, StiefelPoint, TangentVector};

struct Shared {
    _dir: tempfile::TempDir,
    out: std::path::PathBuf,
    run: PipelineRun,
    seconds: f64,
}

fn shared() -> &'static Shared {
    static RUN: OnceLock<Shared> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_path_buf();
        let start = Instant::now();
        let run = run_pipeline(&PipelineConfig::default(), &out).expect("default pipeline run");
        Shared {
            _dir: dir,
            out,
            run,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn report(id: &str, gated: bool, pass: bool, detail: String) {
    let verdict = match (pass, gated) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (soft)",
    };
    let kind = if gated { "gated" } else { "reported" };
    let line = format!("[acceptance] {id:<5} {verdict:<11} [{kind}] {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    if gated {
        assert!(pass, "{id}: {detail}");
    }
}

fn all_mu_settings(run: &PipelineRun, r: usize, q: usize) -> ScenarioSettings {
    let cfg = &run.config;
    ScenarioSettings {
        r,
        q,
        p: cfg.opinf.p,
        gamma_grid: cfg.opinf.gamma_grid.clone(),
        ghat: FeatureSpecGhat {
            r,
            p: cfg.opinf.p,
            degrees: cfg.opinf.degrees(),
            dictionary: cfg.opinf.ghat_dictionary,
        },
        lambda_grid: cfg.opinf.grid(),
        selection_tolerance: cfg.opinf.selection_tolerance,
        ode: cfg.opinf.ode(),
        reference: Some(run.scenarios.reference.clone()),
    }
}

fn all_mu(run: &PipelineRun) -> Vec<usize> {
    (0..run.config.fom.mu_list.len()).collect()
}

#[test]
fn ac1_rank_selection() {
    let s = shared();
    let rank = &s.run.scenarios.rank;
    let setup: f64 = s
        .run
        .manifest
        .stages
        .iter()
        .filter(|st| st.name == "simulate" || st.name == "scenarios")
        .map(|st| st.seconds)
        .sum();
    report(
        "AC1",
        true,
        rank.r == 7 && setup < 600.0,
        format!(
            "r = {} (expected 7; every-scenario rule gives {:?}), {} scenarios, simulate+scenarios {setup:.0} s (budget 600 s), full run {:.0} s",
            rank.r,
            rank.r_every_scenario,
            s.run.scenarios.scenarios.len(),
            s.seconds
        ),
    );
}

#[test]
fn ac2_energy_capture() {
    let run = &shared().run;
    let snaps = scenario_snapshots(&run.library, &all_mu(run)).unwrap();
    let modes = PodModes::compute(&snaps);
    let captured = 1.0 - energy_error(&modes.singular_values, 8);
    report(
        "AC2",
        true,
        captured >= 0.95 - 0.01,
        format!("r = 8 POD of all trajectories captures {:.2}% (target 95% +/- 1 pp)", 100.0 * captured),
    );
}

#[test]
fn ac3_enrichment_increment() {
    let run = &shared().run;
    let snaps = scenario_snapshots(&run.library, &all_mu(run)).unwrap();
    let mut modes = PodModes::compute(&snaps);
    modes.align_signs(&run.scenarios.reference);
    let basis = modes.basis(8, 8).unwrap();
    let p = run.config.opinf.p;
    let linear = PolyRepresentation::linear(basis.clone(), p, snaps.s_ref.clone());
    let poly = select_gamma(&snaps, &basis, p, &run.config.opinf.gamma_grid).unwrap();
    let e_lin = snapshot_energy_captured(&linear, &snaps);
    let e_poly = snapshot_energy_captured(&poly, &snaps);
    let inc = 100.0 * (e_poly - e_lin);
    report(
        "AC3",
        false,
        (inc - 2.1).abs() <= 1.0,
        format!(
            "r = 8, q = 8: linear {:.2}%, enriched {:.2}% (gamma {:.0e}), increment {inc:.2} pp (target 2.1 +/- 1.0 pp)",
            100.0 * e_lin,
            100.0 * e_poly,
            poly.gamma
        ),
    );
}

#[test]
fn ac4_deterministic_rom_accuracy() {
    let run = &shared().run;
    let settings = all_mu_settings(run, 7, 8);
    let scenario = build_scenario(0, &run.config.fom.mu_list, &run.library, &all_mu(run), &settings).unwrap();
    let [lo, hi] = run.summary.training_error_range;
    report(
        "AC4",
        true,
        scenario.training_error < 5e-2,
        format!(
            "all-trajectory r = 7, q = 8 ROM training error {:.4} (lambdas {:?}, gamma {:.0e}); ensemble range [{lo:.4}, {hi:.4}]; threshold 5e-2",
            scenario.training_error, scenario.ops.lambdas, scenario.rep.gamma
        ),
    );
}

#[test]
fn ac5_geometry() {
    let samples = &shared().run.sampling.samples;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let base = StiefelPoint::new(thin_qr(&a).0, None).unwrap();
        let raw = DMatrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let dir = TangentVector::project(&raw, base.clone());
        let norm = rng.random_range(0.01..=0.5);
        let delta = dir.scaled(norm / dir.norm());
        let target = riemann_exp(&base, &delta).unwrap();
        let back = riemann_log(&base, &target).unwrap();
        worst = worst.max((back.matrix() - delta.matrix()).norm());
    }
    let orth = samples.iter().map(|s| s.phi.orthonormality_residual()).fold(0.0, f64::max);
    let cons = samples.iter().map(|s| s.phi.constraint_residual()).fold(0.0, f64::max);
    let has_constraint = samples.iter().all(|s| s.phi.constraint().is_some());
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "AC5",
        true,
        worst <= 1e-8 && samples.len() == 1000 && has_constraint && orth <= 1e-10 && cons <= 1e-8 && elapsed < 120.0,
        format!(
            "St(20,4) exp/log max error {worst:.2e} over 100 seeds; {} samples: orthonormality {orth:.2e}, constraint {cons:.2e}; {elapsed:.1} s",
            samples.len()
        ),
    );
}

#[test]
fn ac6_dirichlet_and_qp() {
    let eye = solve_concentration(&DMatrix::identity(3, 3)).unwrap();
    let e1 = (eye - DVector::from_element(3, 1.0 / 3.0)).amax();
    let diag = solve_concentration(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]))).unwrap();
    let e2 = (diag - DVector::from_vec(vec![0.8, 0.2])).amax();

    let run = &shared().run;
    let alpha = run.sampling.model.alpha.clone();
    let a0 = alpha.sum();
    let n = 100_000;
    let draws = sample_dirichlet(&alpha, n, 99).unwrap();
    let mean = draws.iter().fold(DVector::zeros(alpha.len()), |acc, p| acc + p) / n as f64;
    let z = (0..alpha.len())
        .map(|i| {
            let m = alpha[i] / a0;
            let var = m * (1.0 - m) / (a0 + 1.0);
            (mean[i] - m).abs() / (var / n as f64).sqrt()
        })
        .fold(0.0, f64::max);
    let sum_err = (a0 - 1.0).abs();
    report(
        "AC6",
        true,
        e1 <= 1e-10 && e2 <= 1e-10 && z <= 3.0 && sum_err <= 1e-10,
        format!(
            "H = I error {e1:.1e}; H = diag(1,4) error {e2:.1e}; Dirichlet mean max |z| {z:.2} (n = 1e5); |sum alpha - 1| {sum_err:.1e}"
        ),
    );
    let mut sorted: Vec<f64> = alpha.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    report(
        "AC6b",
        false,
        true,
        format!(
            "alpha {:?} (sorted {:.4?}) vs published (0.5394, 0.2423, 0.2183); anchors depend on the scenario enumeration",
            alpha.as_slice().iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            sorted
        ),
    );
}

#[test]
fn ac7_frechet_mean() {
    let summary = &shared().run.sampling.summary;
    let bound = 0.1 * summary.mean_anchor_log_norm;
    let pass = summary.frechet_residual.is_some_and(|r| r <= bound);
    report(
        "AC7",
        true,
        pass,
        format!(
            "tangent mean residual {:?} vs 0.1 x mean anchor log norm = {bound:.4}",
            summary.frechet_residual
        ),
    );
}

fn planted(r: usize, seed: u64) -> ReducedOperators {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = ReducedOperators::zeros(FeatureSpecGhat::new(r, 2));
    ops.c_hat = DVector::from_fn(r, |_, _| rng.random_range(-0.5..0.5));
    ops.a_hat = DMatrix::from_fn(r, r, |i, j| if i == j { -1.0 } else { rng.random_range(-0.3..0.3) });
    let mut h = DMatrix::from_fn(r, r * r, |_, _| rng.random_range(-0.3..0.3));
    for a in 0..r {
        for b in 0..a {
            let avg = (h.column(a * r + b) + h.column(b * r + a)) * 0.5;
            h.set_column(a * r + b, &avg);
            h.set_column(b * r + a, &avg);
        }
    }
    ops.h_hat = h;
    ops.p_hat = DMatrix::from_fn(r, ops.spec.len(), |_, _| rng.random_range(-0.1..0.1));
    ops
}

#[test]
fn ac8_oracle_recovery() {
    let mut worst = 0.0f64;
    for (r, seed) in [(2, 1u64), (3, 2), (4, 3)] {
        let truth = planted(r, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let k = 600;
        let s = DMatrix::from_fn(r, k, |_, _| rng.random_range(-1.0..1.0));
        let ds = DMatrix::from_fn(r, k, |i, j| rom_rhs(&s.column(j).into_owned(), &truth)[i]);
        let ops = RegressionProblem::new(&s, &ds, &truth.spec).unwrap().solve([0.0; 3]).unwrap();
        let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm();
        worst = worst
            .max((&ops.c_hat - &truth.c_hat).norm() / truth.c_hat.norm())
            .max(rel(&ops.a_hat, &truth.a_hat))
            .max(rel(&ops.h_hat, &truth.h_hat))
            .max(rel(&ops.p_hat, &truth.p_hat));
    }
    // Observed order of the derivative stencil on sin(t) over [0, 2].
    let max_err = |k: usize| {
        let dt = 2.0 / (k - 1) as f64;
        let x = DMatrix::from_fn(1, k, |_, j| (j as f64 * dt).sin());
        let d = time_derivatives(&x, dt).unwrap();
        (0..k).map(|j| (d[(0, j)] - (j as f64 * dt).cos()).abs()).fold(0.0, f64::max)
    };
    let order = (max_err(41) / max_err(81)).log2();
    report(
        "AC8",
        true,
        worst <= 1e-6 && (3.5..=4.5).contains(&order),
        format!("planted operator max relative error {worst:.2e}; derivative stencil order {order:.2}"),
    );
}

#[test]
fn ac9_uq_envelope() {
    let summary = &shared().run.propagation.summary;
    let fractions: Vec<Option<f64>> = summary.anchor_checks.iter().map(|c| c.fraction_within_ci).collect();
    let pass = !fractions.is_empty() && fractions.iter().all(|f| f.is_some_and(|f| f >= 0.8));
    report(
        "AC9",
        false,
        pass,
        format!(
            "anchor fractions within CI {:?} (target >= 0.8); {}/{} samples propagated; full-order truth within CI {:?}",
            fractions
                .iter()
                .map(|f| f.map(|f| (f * 1e3).round() / 1e3))
                .collect::<Vec<_>>(),
            summary.n_succeeded,
            summary.n_samples,
            summary.truth.as_ref().map(|t| (t.fraction_within_ci * 1e3).round() / 1e3)
        ),
    );
}

fn reduced_config() -> PipelineConfig {
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
    cfg.sampling.n_samples = 200;
    cfg.propagation.test_mu = 0.85;
    cfg.propagation.t_final = 0.5;
    cfg.propagation.output_stride = 5;
    cfg
}

fn artifact_sums(manifest: &RunManifest, stage: &str) -> std::collections::BTreeMap<String, String> {
    manifest.stage(stage).map(|s| s.artifacts.clone()).unwrap_or_default()
}

#[test]
fn ac10_reproducibility() {
    let cfg = reduced_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&cfg, a.path()).unwrap();
    let rb = run_pipeline(&cfg, b.path()).unwrap();
    let manifest_a = serde_json::to_vec(&ra.sampling.manifest()).unwrap();
    let manifest_b = serde_json::to_vec(&rb.sampling.manifest()).unwrap();
    let reduced_ok = manifest_a == manifest_b
        && ra.propagation.stats.is_some()
        && ra.propagation.stats == rb.propagation.stats
        && artifact_sums(&ra.manifest, "sample") == artifact_sums(&rb.manifest, "sample")
        && artifact_sums(&ra.manifest, "propagate") == artifact_sums(&rb.manifest, "propagate");

    // Rerun sampling and propagation on top of the shared default run.
    let s = shared();
    let run = &s.run;
    let mut manifest = run.manifest.clone();
    let sampling = stage_sample(&run.config, &run.scenarios.scenarios, &run.anchors, &s.out, &mut manifest).unwrap();
    let propagation =
        stage_propagate(&run.config, &run.scenarios.scenarios, &run.anchors, &sampling, &s.out, &mut manifest).unwrap();
    let default_ok = sampling.manifest() == run.sampling.manifest()
        && propagation.stats == run.propagation.stats
        && artifact_sums(&manifest, "sample") == artifact_sums(&run.manifest, "sample")
        && artifact_sums(&manifest, "propagate") == artifact_sums(&run.manifest, "propagate");
    report(
        "AC10",
        true,
        reduced_ok && default_ok,
        format!(
            "reduced config twice: identical manifests and statistics = {reduced_ok}; default run resample + repropagate identical = {default_ok}"
        ),
    );
}

