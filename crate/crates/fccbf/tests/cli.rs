//! Black-box checks of the `fccbf` binary: exit codes, overrides, and the
//! run -> verify round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn fccbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fccbf")).args(args).output().unwrap()
}

fn write_scenario(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("scenario.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const VALID: &str = r#"
schema_version = 1
name = "cli-check"
system = "single-integrator-2d"
t_f = 2.0
horizon = 2.0

[goal]
center = [0.0, 0.0]
radius = 1.0

[bounds]
lower = [-2.0, -2.0]
upper = [2.0, 2.0]

[controller]
kind = "fccbf"
r = "auto"
k = "auto"
safety_slope = 2.0
design_check = "initial-state"

[init]
kind = "fixed"
state = [-1.5, -0.5]

[sim]
dt = 0.01
"#;

#[test]
fn malformed_toml_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), "this is not toml [");
    let out = fccbf(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn negative_obstacle_radius_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let body = VALID.replace(
        "[bounds]",
        "[[obstacles]]\ncenter = [1.0, 1.0]\nradius = -0.5\n\n[bounds]",
    );
    let path = write_scenario(dir.path(), &body);
    let out = fccbf(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("radius"));
}

#[test]
fn zero_deadline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &VALID.replace("t_f = 2.0", "t_f = 0.0"));
    let out = fccbf(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_on_fixed_init_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), VALID);
    let out_dir = dir.path().join("out");
    let out = fccbf(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "stderr: {err}");
}

#[test]
fn run_then_verify_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let scenario = scenario_path("case_study_4obs.toml");
    let run =
        fccbf(&["run", scenario.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&run.stderr));

    let verify = fccbf(&["verify", out_dir.to_str().unwrap()]);
    assert_eq!(
        verify.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&verify.stderr)
    );
    assert!(String::from_utf8_lossy(&verify.stdout).contains("all checks passed"));
}

#[test]
fn verify_catches_tampered_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let scenario = scenario_path("clbf_compare_1obs.toml");
    let run =
        fccbf(&["run", scenario.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0));

    // Flip one digit of a state coordinate in the first run's CSV.
    let csv_path = out_dir.join("run_0.csv");
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let row: Vec<&str> = lines[300].split(',').collect();
    let mut tampered: Vec<String> = row.iter().map(|s| s.to_string()).collect();
    tampered[1] = format!("{}", row[1].parse::<f64>().unwrap() + 0.5);
    lines[300] = tampered.join(",");
    std::fs::write(&csv_path, lines.join("\n") + "\n").unwrap();

    let verify = fccbf(&["verify", out_dir.to_str().unwrap()]);
    assert_eq!(verify.status.code(), Some(1));
}

#[test]
fn dt_override_is_rejected_when_it_misses_the_deadline_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), VALID);
    let out = fccbf(&["run", path.to_str().unwrap(), "--dt", "0.3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn design_prints_the_interval() {
    let scenario = scenario_path("case_study_4obs.toml");
    let out = fccbf(&["design", scenario.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(record["interval"]["nonempty"].as_bool().unwrap());
    assert!(record["report"]["pointwise_pass"].as_bool().unwrap());
}
