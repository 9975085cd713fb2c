use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fastslq::config::Config;
use fastslq::solver::solve;

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fastslq-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastslq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn lti_solve_reports_the_library_cost() {
    let config_path = repo_config("lti.json");
    let out = scratch_dir("lti");
    let output = run(&["solve", "--config", path_str(&config_path), "--out", path_str(&out)]);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));

    let config = Config::load(&config_path).unwrap();
    let (problem, policy) = config.problem().unwrap();
    let expected = solve(&problem, policy, &config.solver).unwrap().report.final_cost();
    let report = json(&out.join("report.json"));
    assert_eq!(report["final_cost"].as_f64().unwrap().to_bits(), expected.to_bits());
    assert_eq!(report["converged"], true);

    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# fastslq-csv v1"));
    assert_eq!(lines.next(), Some("time,x0,x1,u0,mode"));
    assert!(lines.count() > 10);
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = scratch_dir("malformed");
    let bad = dir.join("bad.json");
    fs::write(&bad, "{ \"model\": ").unwrap();
    let output = run(&["solve", "--config", path_str(&bad), "--out", path_str(&dir)]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("invalid configuration"));

    let missing = run(&["mpc", "--config", path_str(&dir.join("absent.json"))]);
    assert_eq!(missing.status.code(), Some(1));
    let usage = run(&["solve"]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn iteration_budget_exhaustion_exits_with_two() {
    let dir = scratch_dir("budget");
    let config = dir.join("short.json");
    fs::write(
        &config,
        r#"{ "model": { "type": "planar", "num_phases": 2 }, "solver": { "max_iterations": 1 } }"#,
    )
    .unwrap();
    let output = run(&["solve", "--config", path_str(&config), "--out", path_str(&dir)]);
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(json(&dir.join("report.json"))["converged"], false);
}

#[test]
fn sequential_solves_do_not_depend_on_thread_count() {
    let config = repo_config("planar_trot.json");
    let mut csvs = Vec::new();
    for threads in ["1", "4"] {
        let out = scratch_dir(&format!("threads{threads}"));
        let output = run(&[
            "solve",
            "--config",
            path_str(&config),
            "--threads",
            threads,
            "--sequential-backward",
            "--out",
            path_str(&out),
        ]);
        assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
        let report = json(&out.join("report.json"));
        assert_eq!(report["threads"].as_u64().unwrap().to_string(), threads);
        assert_eq!(report["parallel_backward"], false);
        csvs.push(fs::read(out.join("trajectory.csv")).unwrap());
    }
    assert!(csvs[0] == csvs[1], "trajectory CSVs differ between 1 and 4 threads");
}

fn mpc_summary(name: &str, args: &[&str]) -> (serde_json::Value, String) {
    let out = scratch_dir(name);
    let mut all = vec!["mpc"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", path_str(&out)]);
    let output = run(&all);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let log = fs::read_to_string(out.join("closed_loop.csv")).unwrap();
    (json(&out.join("summary.json")), log)
}

#[test]
fn in_place_regulation_tracks_the_reference() {
    let config = repo_config("planar_trot.json");
    let (summary, log) = mpc_summary("regulation", &["--config", path_str(&config), "--duration", "2.4"]);
    assert_eq!(summary["completed"], true);
    assert!(summary["mean_rate_hz"].as_f64().unwrap() > 0.0);
    assert!(summary["max_tracking_error"].as_f64().unwrap() < 0.5);
    assert!(summary["final_cycle_mean_error"].as_f64().unwrap().abs() < 1e-2);
    assert!(log.starts_with("# fastslq-csv v1\ntime,x0,"));
}

#[test]
fn velocity_kick_reports_recovery() {
    let config = repo_config("planar_trot.json");
    let (summary, _) = mpc_summary(
        "kick",
        &["--config", path_str(&config), "--duration", "4.0", "--disturbance", "1.2:2:0.5", "--rate", "25"],
    );
    let recoveries = summary["recoveries"].as_array().unwrap();
    assert_eq!(recoveries.len(), 1);
    let recovery = &recoveries[0];
    assert_eq!(recovery["index"], 2);
    assert!(recovery["peak_deviation"].as_f64().unwrap() > 0.05);
    let time = recovery["recovery_time"].as_f64().expect("recovered");
    assert!(time > 0.0 && time <= 2.4, "recovery took {time} s");
}

#[test]
fn goto_task_reaches_the_goal() {
    let config = repo_config("planar_goto.json");
    let (summary, log) = mpc_summary("goto", &["--config", path_str(&config)]);
    assert_eq!(summary["completed"], true);
    let last = log.lines().last().unwrap();
    let com_x: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!((com_x - 1.0).abs() < 0.05, "final CoM x {com_x}");
}

#[test]
fn bench_writes_one_row_per_cell() {
    let config = repo_config("planar_trot.json");
    let out = scratch_dir("bench");
    let output = run(&[
        "bench",
        "--config",
        path_str(&config),
        "--threads",
        "1,2",
        "--partitions",
        "2",
        "--repeats",
        "3",
        "--warmup",
        "1",
        "--seed",
        "7",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("1 thread(s)") && stdout.contains("2 thread(s)"));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# fastslq-csv v1");
    assert_eq!(lines.len(), 4);
    let result: fastslq::bench::BenchResult =
        serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    for cell in &result.cells {
        assert!(cell.mean_hz > 0.0);
        assert_eq!(cell.samples, 3);
        assert!(cell.phase_sum_ms() <= 1.1 * cell.step_ms);
    }
}
