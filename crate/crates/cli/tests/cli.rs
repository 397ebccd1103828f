use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[fom]
n_elements = 64
t_final = 0.5
mu_list = [0.6, 0.7, 0.8, 0.9, 1.0, 1.1]

[scenarios]
kind = "sizes"
min = 5
max = 5

[ranks]
r = 3
q = 2

[clustering]
m = 3

[sampling]
n_samples = 30

[propagation]
test_mu = 0.85
t_final = 0.5
output_stride = 5
"#;

fn srom(out: &Path, args: &[&str]) -> (Output, Value) {
    let output = Command::new(env!("CARGO_BIN_EXE_srom"))
        .args(args)
        .env("SROM_OUT_DIR", out)
        .env("RUST_LOG", "off")
        .output()
        .expect("run srom");
    let summary = serde_json::from_slice(&output.stdout).unwrap_or(Value::Null);
    (output, summary)
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path());
    let (output, summary) = srom(&out, &["-c", &cfg, "run", "--n-samples", "25"]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["result"]["rank"]["r"], 3);
    assert_eq!(summary["result"]["m"], 3);
    assert_eq!(summary["result"]["propagation"]["n_samples"], 25);
    assert!(out.join("propagation/envelope_final.csv").exists());

    let (output, summary) = srom(&out, &["replay"]);
    assert!(output.status.success());
    assert_eq!(summary["result"]["p_matches"], true);
    assert_eq!(summary["result"]["operator_indices_match"], true);

    std::fs::write(out.join("sampling/p.bin"), b"SROMMAT1").unwrap();
    let (output, summary) = srom(&out, &["replay"]);
    assert_eq!(output.status.code(), Some(3));
    assert_eq!(summary["stage"], "replay");
}

#[test]
fn stage_commands_chain_and_accept_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path());
    let (output, summary) = srom(&out, &["-c", &cfg, "simulate"]);
    assert!(output.status.success());
    assert_eq!(summary["result"]["trajectories"], 6);
    assert_eq!(summary["result"]["states"], 65);
    for stage in ["scenarios", "anchors", "sample"] {
        let (output, summary) = srom(&out, &[stage]);
        assert!(output.status.success(), "{stage}: {summary}");
    }
    // A flag changes the run's configuration for the stages that follow.
    let (output, _) = srom(&out, &["sample", "--seed", "99"]);
    assert!(output.status.success());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["sampling"], 99);
    assert_eq!(manifest["config"]["sampling"]["n_samples"], 30);
    let (output, summary) = srom(&out, &["propagate"]);
    assert!(output.status.success(), "{summary}");
    assert_eq!(summary["result"]["n_samples"], 30);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path());

    let (output, summary) = srom(&out, &["-c", &cfg, "simulate", "--set", "ranks.nonsense=1"]);
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(summary["status"], "error");
    let (output, _) = srom(&out, &["-c", &cfg, "simulate", "--m", "1"]);
    assert_eq!(output.status.code(), Some(2));
    let (output, _) = srom(&out, &["-c", "/nonexistent/config.toml", "simulate"]);
    assert_eq!(output.status.code(), Some(2));

    // No run in the directory yet.
    let (output, _) = srom(&out, &["anchors"]);
    assert_eq!(output.status.code(), Some(3));

    let (output, _) = srom(&out, &["-c", &cfg, "simulate"]);
    assert!(output.status.success());
    let (output, summary) = srom(&out, &["scenarios", "--r", "60"]);
    assert_eq!(output.status.code(), Some(3));
    assert_eq!(summary["stage"], "scenarios");
    assert!(summary["error"].as_str().unwrap().contains("numerical rank"));
}

#[test]
fn config_command_prints_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_srom"))
        .args(["config", "--q", "6"])
        .env("SROM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    let parsed: srom_core::PipelineConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed.ranks.q, 6);
    assert_eq!(parsed.fom.n_elements, 256);
    assert_eq!(parsed.sampling.n_samples, 1000);
}
