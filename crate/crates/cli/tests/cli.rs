use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use georls::io::load_estimate;
use georls::manifold::chordal_distance;
use tempfile::TempDir;

fn georls(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_georls"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn help_and_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&georls(&["--help"], dir.path())), 0);
    assert_eq!(code(&georls(&[], dir.path())), 1);
    assert_eq!(code(&georls(&["solve", "--bogus"], dir.path())), 1);
    assert_eq!(code(&georls(&["solve", "--repeat", "0"], dir.path())), 1);
    assert_eq!(code(&georls(&["solve", "--config", "missing.toml"], dir.path())), 1);
    assert_eq!(code(&georls(&["solve", "--gamma", "-1"], dir.path())), 1);
    fs::write(dir.path().join("bad.toml"), "no_such_key = 3\n").unwrap();
    assert_eq!(code(&georls(&["solve", "--config", "bad.toml"], dir.path())), 1);
}

#[test]
fn solve_writes_trace_and_echoes_config() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("small.toml"),
        "n = 12\nk = 4\nselector_rows = 5\nrho_deg = 30.0\n",
    )
    .unwrap();
    let out = georls(
        &[
            "solve",
            "--config",
            "small.toml",
            "--rho-deg",
            "15",
            "--out",
            "run",
            "--stationarity",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("rho_deg = 15.0"),
        "flag must override the file: {stderr}"
    );
    assert!(stderr.contains("n = 12"));

    let run = dir.path().join("run");
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("rho_deg = 15.0") && echoed.contains("k = 4"));
    assert_eq!(header(&run.join("trace.csv")), "iter,cost,gradnorm,lambda,boundary");
    assert!(run.join("solution.json").exists());
    assert!(run.join("stationarity.csv").exists());

    // The echoed config reproduces the run.
    let again = georls(&["solve", "--config", "run/config.toml", "--out", "rerun"], dir.path());
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read_to_string(run.join("trace.csv")).unwrap(),
        fs::read_to_string(dir.path().join("rerun/trace.csv")).unwrap()
    );
}

#[test]
fn iteration_budget_exhaustion_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("short.toml"), "max_iter = 2\n").unwrap();
    let out = georls(&["solve", "--config", "short.toml", "--out", "run"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(dir.path().join("run/trace.csv").exists());
}

#[test]
fn repeat_runs_land_in_seed_directories() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("small.toml"),
        "n = 10\nk = 3\nselector_rows = 4\ncenter = \"random\"\n",
    )
    .unwrap();
    let out = georls(
        &[
            "solve",
            "--config",
            "small.toml",
            "--seed",
            "5",
            "--repeat",
            "3",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    for seed in 5..8 {
        let cfg = fs::read_to_string(dir.path().join(format!("run/seed_{seed}/config.toml"))).unwrap();
        assert!(cfg.contains(&format!("seed = {seed}")));
    }
}

#[test]
fn identified_estimate_round_trips_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let out = georls(&["identify", "--sigma", "0", "--out", "id"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let id = dir.path().join("id");
    assert_eq!(header(&id.join("singular_values.csv")), "index,value");
    assert!(header(&id.join("identification.csv")).starts_with("t,w_1,w_2"));

    // Re-identifying from the persisted trajectory reproduces the subspace.
    let out = georls(
        &["identify", "--data", "id/identification.csv", "--out", "again"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = load_estimate(&id.join("estimate.json")).unwrap();
    let second = load_estimate(&dir.path().join("again/estimate.json")).unwrap();
    assert!(chordal_distance(&first.subspace, &second.subspace).unwrap() <= 1e-8);

    // The estimate drives a solve as its ball center.
    let out = georls(&["solve", "--estimate", "id/estimate.json", "--out", "s"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn too_little_data_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("t,w_1,w_2\n");
    for t in 1..=10 {
        csv.push_str(&format!("{t},{},{}\n", t as f64 * 0.1, (t * t) as f64));
    }
    fs::write(dir.path().join("short.csv"), csv).unwrap();
    let out = georls(&["identify", "--data", "short.csv", "--out", "id"], dir.path());
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn control_writes_closed_loop_logs() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("short.toml"),
        "system = \"double_integrator\"\nsteps = 30\ndata_len = 115\n",
    )
    .unwrap();
    let out = georls(
        &["control", "--config", "short.toml", "--seed", "3", "--out", "loop"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("loop");
    assert_eq!(
        header(&run.join("closed_loop.csv")),
        "t,u_1,y_1,r_1,lambda,iters,gradnorm,ytrue_1"
    );
    assert_eq!(header(&run.join("closed_loop_lambda.csv")), "t,lambda");
    assert_eq!(
        header(&run.join("nominal.csv")),
        "t,u_1,y_1,r_1,lambda,iters,gradnorm,ytrue_1"
    );
    let rows = fs::read_to_string(run.join("closed_loop.csv")).unwrap().lines().count();
    assert_eq!(rows, 31);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["robust"]["seed"], 3);
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let dir = TempDir::new().unwrap();
    let ok = georls(&["verify", "--instances", "8", "--out", "ok"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ok/verify.json")).unwrap()).unwrap();
    assert!(report.is_object());
    let echoed = fs::read_to_string(dir.path().join("ok/config.toml")).unwrap();
    assert!(echoed.contains("instances = 8") && echoed.contains("selectors = \"full\""));

    let bad = georls(
        &["verify", "--instances", "8", "--inject-fault", "--out", "bad"],
        dir.path(),
    );
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("[FAIL] gradient_vs_finite_diff"));
}

#[test]
fn bench_reports_timings() {
    let dir = TempDir::new().unwrap();
    let out = georls(&["bench", "--no-eig", "--out", "b"], dir.path());
    assert_eq!(code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/bench.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 37);
    assert!(report["wall_median_s"].as_f64().unwrap() > 0.0);
    assert_eq!(
        header(&dir.path().join("b/trace.csv")),
        "iter,cost,gradnorm,lambda,boundary"
    );
}
