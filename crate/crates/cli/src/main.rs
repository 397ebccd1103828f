use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use srom_core::config::RankChoice;
use srom_core::ensemble::ClusterCount;
use srom_core::pipeline::{self, RunManifest};
use srom_core::{PipelineConfig, SromError};

/// Stochastic reduced-order models for the viscous Burgers equation.
///
/// Every command writes its artifacts below the output directory and prints
/// a JSON summary on stdout. Exit status: 0 on success, 2 for configuration
/// errors, 3 when a stage fails.
#[derive(Parser, Debug)]
#[command(name = "srom", version)]
struct Cli {
    /// TOML configuration file. Stage commands fall back to the run's own
    /// configuration, `run` and `simulate` to the built-in defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(short, long, global = true, env = "SROM_OUT_DIR", default_value = "srom-out")]
    out: PathBuf,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run every stage.
    Run,
    /// Solve the full-order model for every training parameter.
    Simulate,
    /// Learn bases and operators for each training scenario.
    Scenarios,
    /// Cluster the scenario bases, pick anchors and the global basis.
    Anchors,
    /// Fit the Dirichlet model and draw projection-matrix samples.
    Sample,
    /// Propagate the samples at the test parameter and compute statistics.
    Propagate,
    /// Summarize a finished run.
    Report,
    /// Regenerate the sampling stage from the manifest and compare bitwise.
    Replay,
    /// Print the resolved configuration.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Simulate => "simulate",
            Command::Scenarios => "scenarios",
            Command::Anchors => "anchors",
            Command::Sample => "sample",
            Command::Propagate => "propagate",
            Command::Report => "report",
            Command::Replay => "replay",
            Command::Config => "config",
        }
    }

    fn starts_run(self) -> bool {
        matches!(self, Command::Run | Command::Simulate)
    }
}

/// Flags mirroring configuration keys; they take precedence over the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    n_elements: Option<usize>,
    #[arg(long, global = true)]
    reynolds: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    t_final: Option<f64>,
    /// Comma-separated training parameters.
    #[arg(long, global = true, value_delimiter = ',')]
    mu_list: Option<Vec<f64>>,
    /// Reduced dimension, or `auto`.
    #[arg(long, global = true)]
    r: Option<RankChoice>,
    #[arg(long, global = true)]
    q: Option<usize>,
    #[arg(long, global = true)]
    energy_threshold: Option<f64>,
    #[arg(long, global = true)]
    p: Option<usize>,
    /// Number of clusters, or `auto`.
    #[arg(long, global = true)]
    m: Option<ClusterCount>,
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    /// Sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    test_mu: Option<f64>,
    #[arg(long, global = true)]
    confidence: Option<f64>,
    /// Set any configuration key, e.g. `--set opinf.selection_tolerance=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

impl Overrides {
    fn is_empty(&self) -> bool {
        self.entries().is_empty() && self.set.is_empty()
    }

    fn entries(&self) -> Vec<(&'static str, toml::Value)> {
        let mut out = Vec::new();
        let mut put = |key, v: Option<toml::Value>| {
            if let Some(v) = v {
                out.push((key, v));
            }
        };
        let int = |v: usize| toml::Value::Integer(v as i64);
        put("fom.n_elements", self.n_elements.map(int));
        put("fom.reynolds", self.reynolds.map(toml::Value::Float));
        put("fom.dt", self.dt.map(toml::Value::Float));
        put("fom.t_final", self.t_final.map(toml::Value::Float));
        put(
            "fom.mu_list",
            self.mu_list
                .as_ref()
                .map(|l| toml::Value::Array(l.iter().map(|&v| toml::Value::Float(v)).collect())),
        );
        put(
            "ranks.r",
            self.r.map(|r| match r {
                RankChoice::Auto => toml::Value::String("auto".into()),
                RankChoice::Fixed(r) => int(r),
            }),
        );
        put("ranks.q", self.q.map(int));
        put("ranks.energy_threshold", self.energy_threshold.map(toml::Value::Float));
        put("opinf.p", self.p.map(int));
        put(
            "clustering.m",
            self.m.map(|m| match m {
                ClusterCount::Auto => toml::Value::String("auto".into()),
                ClusterCount::Fixed(m) => int(m),
            }),
        );
        put("sampling.n_samples", self.n_samples.map(int));
        put("sampling.seed", self.seed.map(|s| toml::Value::Integer(s as i64)));
        put("propagation.test_mu", self.test_mu.map(toml::Value::Float));
        put("propagation.confidence", self.confidence.map(toml::Value::Float));
        out
    }

    fn apply(&self, config: &PipelineConfig) -> Result<PipelineConfig, SromError> {
        let bad = |msg: String| SromError::Config(msg);
        let mut tree = toml::Value::try_from(config).map_err(|e| bad(e.to_string()))?;
        for (key, value) in self.entries() {
            set_key(&mut tree, key, value)?;
        }
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("`--set {item}`: expected KEY=VALUE")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_key(&mut tree, key.trim(), value)?;
        }
        let text = toml::to_string(&tree).map_err(|e| bad(e.to_string()))?;
        PipelineConfig::from_toml_str(&text)
    }
}

fn set_key(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), SromError> {
    let mut node = tree;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| SromError::Config(format!("`{key}` does not name a configuration key")))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(SromError::Config("empty configuration key".into()))
}

struct Failure {
    code: u8,
    stage: Option<String>,
    error: anyhow::Error,
}

impl From<SromError> for Failure {
    fn from(e: SromError) -> Self {
        let code = if matches!(e.root(), SromError::Config(_)) { 2 } else { 3 };
        let stage = match &e {
            SromError::Stage { stage, .. } => Some(stage.to_string()),
            _ => None,
        };
        Failure {
            code,
            stage,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<SromError>() {
            Some(e) if matches!(e.root(), SromError::Config(_)) => 2,
            _ => 3,
        };
        Failure {
            code,
            stage: None,
            error,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<(PipelineConfig, Option<RunManifest>), Failure> {
    let existing = if cli.command.starts_run() {
        None
    } else if cli.command == Command::Config {
        RunManifest::load(&cli.out).ok()
    } else {
        Some(RunManifest::load(&cli.out).map_err(|e| Failure {
            code: 3,
            stage: None,
            error: anyhow!(e).context(format!(
                "no run found in {} (start one with `srom simulate` or `srom run`)",
                cli.out.display()
            )),
        })?)
    };
    let base = match (&cli.config, &existing) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(manifest)) => manifest.config.clone(),
        (None, None) => PipelineConfig::default(),
    };
    let config = if cli.overrides.is_empty() {
        base.validate()?;
        base
    } else {
        cli.overrides.apply(&base)?
    };
    Ok((config, existing))
}

fn stage_summary(cmd: Command, out: &Path, config: &PipelineConfig, manifest: Option<RunManifest>) -> Result<Value, Failure> {
    use pipeline::*;
    let tag = |name: &'static str| move |e: SromError| e.in_stage(name);
    let mut manifest = match manifest {
        Some(mut m) => {
            update_config(&mut m, config, out)?;
            m
        }
        None => init_run(config, out)?,
    };
    Ok(match cmd {
        Command::Run => {
            drop(manifest);
            let run = run_pipeline(config, out)?;
            to_json(&run.summary)
        }
        Command::Simulate => {
            let library = stage_simulate(config, out, &mut manifest)?;
            json!({
                "trajectories": library.len(),
                "states": library[0].n_states(),
                "snapshots_per_trajectory": library[0].n_snapshots(),
            })
        }
        Command::Scenarios => {
            let library = load_library(config, out).map_err(tag("scenarios"))?;
            let stage = stage_scenarios(config, &library, out, &mut manifest)?;
            let errors: Vec<f64> = stage.scenarios.iter().map(|s| s.training_error).collect();
            json!({
                "rank": stage.rank,
                "scenarios": stage.scenarios.len(),
                "training_error_min": errors.iter().copied().fold(f64::INFINITY, f64::min),
                "training_error_max": errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        }
        Command::Anchors => {
            let library = load_library(config, out).map_err(tag("anchors"))?;
            let scenarios = load_scenarios(out).map_err(tag("anchors"))?;
            let stage = stage_anchors(config, &library, &scenarios, out, &mut manifest)?;
            let anchors: Vec<Value> = stage
                .anchor_scenarios(&scenarios.scenarios)
                .iter()
                .enumerate()
                .map(|(a, s)| json!({"anchor": a + 1, "scenario": s.id, "mu_set": s.mu_set}))
                .collect();
            json!({
                "m": stage.ensemble.m,
                "silhouette": stage.clustering.silhouette,
                "anchors": anchors,
            })
        }
        Command::Sample => {
            let scenarios = load_scenarios(out).map_err(tag("sample"))?;
            let anchors = load_anchors(out).map_err(tag("sample"))?;
            let stage = stage_sample(config, &scenarios.scenarios, &anchors, out, &mut manifest)?;
            to_json(&stage.summary)
        }
        Command::Propagate => {
            let scenarios = load_scenarios(out).map_err(tag("propagate"))?;
            let anchors = load_anchors(out).map_err(tag("propagate"))?;
            let sampling = load_samples(&scenarios.scenarios, &anchors, out).map_err(tag("propagate"))?;
            let stage = stage_propagate(config, &scenarios.scenarios, &anchors, &sampling, out, &mut manifest)?;
            to_json(&stage.summary)
        }
        Command::Report => to_json(&stage_report(out, &mut manifest)?),
        Command::Replay | Command::Config => unreachable!("handled before stages"),
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap_or(Value::Null)
}

fn execute(cli: &Cli) -> Result<Value, Failure> {
    let (config, manifest) = resolve_config(cli)?;
    match cli.command {
        Command::Config => {
            let text = config.to_toml_string()?;
            Ok(toml::from_str::<Value>(&text).context("re-reading configuration")?)
        }
        Command::Replay => {
            let report = pipeline::replay(&cli.out).map_err(|e| e.in_stage("replay"))?;
            if report.ok() {
                Ok(serde_json::to_value(&report).context("serializing replay report")?)
            } else {
                Err(Failure {
                    code: 3,
                    stage: Some("replay".into()),
                    error: anyhow!(
                        "replay mismatch: {}",
                        serde_json::to_string(&report).unwrap_or_default()
                    ),
                })
            }
        }
        cmd => stage_summary(cmd, &cli.out, &config, manifest),
    }
}

/// The error chain, skipping causes whose text an outer message already
/// includes.
fn render(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let summary = match execute(&cli) {
        Ok(result) => {
            if cli.command == Command::Config {
                print!("{}", toml::to_string_pretty(&result).unwrap_or_default());
                return ExitCode::SUCCESS;
            }
            json!({
                "command": cli.command.name(),
                "status": "ok",
                "out": cli.out,
                "result": result,
            })
        }
        Err(f) => {
            let message = render(&f.error);
            log::error!("{message}");
            let summary = json!({
                "command": cli.command.name(),
                "status": "error",
                "exit_code": f.code,
                "stage": f.stage,
                "error": message,
            });
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            return ExitCode::from(f.code);
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
    ExitCode::SUCCESS
}
