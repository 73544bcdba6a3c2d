//! End-to-end tests of the `gpclf` binary: exit codes, diagnostics,
//! artifact determinism, and checkpoint resume.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpclf")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Tiny pendulum experiment: one episode, sub-second end to end.
fn pendulum_config(out_dir: &Path) -> String {
    format!(
        r#"benchmark = "pendulum"
seed = 3
output_dir = "{out}"

[plant]
mass = 2.0
length = 1.0

[nominal]
mass = 1.0
length = 1.0

[clf]
lambda = 0.5
q = [1.0, 1.0]
r = [1.0]

[controller]
u_max = [8.0]

[episodic]
c0 = 0.4
delta_c = 0.3
n_exploration = 3
rollout_steps = 8
rollout_dt = 0.02
candidate_pool_size = 12
total_episodes = 1
initial_rollouts = 3

[sim]
dt = 0.02
horizon = 0.5
x0 = [0.3, 0.0]
"#,
        out = out_dir.display()
    )
}

fn bicycle_config(out_dir: &Path) -> String {
    format!(
        r#"benchmark = "bicycle"
seed = 5
output_dir = "{out}"

[plant]
friction = 1.0
accel_gain = 1.5
steer_gain = 0.75

[nominal]
friction = 0.0
accel_gain = 1.0
steer_gain = 1.0

[clf]
lambda = 0.5
q = [1.0, 1.0, 1.0, 1.0]
r = [1.0, 1.0]

[controller]
u_max = [4.0, 2.0]

[episodic]
c0 = 0.3
delta_c = 0.2
n_exploration = 3
rollout_steps = 8
rollout_dt = 0.02
candidate_pool_size = 12
total_episodes = 1
initial_rollouts = 3

[sim]
dt = 0.02
horizon = 0.5
x0 = [0.0, 0.25, 2.0, 0.25, 0.25]
reference_speed = 2.0
"#,
        out = out_dir.display()
    )
}

const ARTIFACTS: [&str; 4] =
    ["clf_qp_nominal.csv", "clf_qp_plant.csv", "gp_clf_qp.csv", "gp_clf_socp.csv"];

#[test]
fn validate_accepts_good_config_and_enumerates_bad_one() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, pendulum_config(&dir.path().join("out"))).unwrap();
    let out = run_bin(&["validate", good.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok"));

    // Three independent problems must all be reported in one pass.
    let broken = pendulum_config(&dir.path().join("out"))
        .replace("lambda = 0.5\n", "")
        .replace("dt = 0.02", "dt = -0.02")
        .replace("u_max = [8.0]", "u_max = [8.0]\ntypo = 1");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, broken).unwrap();
    let out = run_bin(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("clf.lambda required"), "{err}");
    assert!(err.contains("sim.dt must be positive"), "{err}");
    assert!(err.contains("unknown key `typo` in [controller]"), "{err}");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = run_bin(&["run", "/nonexistent/nowhere.toml"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let out = run_bin(&["validate", "/nonexistent/nowhere.toml"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn run_writes_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    // The two configs differ only in output_dir, which must not leak into
    // any artifact byte.
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let cfg = dir.path().join(format!("{sub}.toml"));
        fs::write(&cfg, pendulum_config(&out_dir)).unwrap();
        let out = run_bin(&["run", cfg.to_str().unwrap(), "--dump-failed-solves"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push(out_dir);
    }
    for name in ARTIFACTS.iter().chain(&["report.txt", "failed_solves.txt"]) {
        let a = fs::read(outputs[0].join(name)).unwrap_or_else(|_| panic!("{name} written"));
        let b = fs::read(outputs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    for extra in ["checkpoint.json", "timing.txt"] {
        assert!(outputs[0].join(extra).exists(), "{extra} written");
    }
    let report = fs::read_to_string(outputs[0].join("report.txt")).unwrap();
    assert!(report.contains("benchmark = pendulum"));
    assert!(report.contains("[controller gp_clf_socp]"));
    assert!(report.contains("[episode 1]"));
}

#[test]
fn checkpoint_resume_reproduces_the_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, pendulum_config(&out_dir)).unwrap();

    let out = run_bin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut fresh = Vec::new();
    for name in ARTIFACTS.iter().chain(&["report.txt"]) {
        fresh.push((name, fs::read(out_dir.join(name)).unwrap()));
    }

    let ck = out_dir.join("checkpoint.json");
    let out = run_bin(&["run", cfg.to_str().unwrap(), "--load-checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for (name, bytes) in &fresh {
        let resumed = fs::read(out_dir.join(name)).unwrap();
        assert_eq!(&resumed, bytes, "{name} differs after checkpoint resume");
    }
}

#[test]
fn checkpoint_mismatch_is_refused_without_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, pendulum_config(&out_dir)).unwrap();
    let out = run_bin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // A different seed changes the fingerprint the checkpoint was tied to.
    let ck = out_dir.join("checkpoint.json");
    let args = ["run", cfg.to_str().unwrap(), "--load-checkpoint", ck.to_str().unwrap()];
    let out = run_bin(&[&args[..], &["--seed", "99"]].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fingerprint"), "{}", stderr(&out));

    let out = run_bin(&[&args[..], &["--seed", "99", "--allow-checkpoint-mismatch"]].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn bicycle_benchmark_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, bicycle_config(&out_dir)).unwrap();
    let out = run_bin(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ARTIFACTS {
        assert!(out_dir.join(name).exists(), "{name} written");
    }
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("benchmark = bicycle"));
    // Error coordinates: four state columns plus two inputs in the CSV.
    let csv = fs::read_to_string(out_dir.join("gp_clf_socp.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,x3,x4,u1,u2,V,status"));
}
