use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn penalty_mc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_penalty-mc"))
        .current_dir(dir)
        .env_remove("PENALTY_MC_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn validate_passes_and_writes_report() {
    let dir = TempDir::new().unwrap();
    let out = penalty_mc(
        dir.path(),
        &[
            "validate", "--paths", "20000", "--steps", "200", "--out", "v",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("v/report.csv")).unwrap();
    assert!(csv.starts_with("problem,n,dt,paths,component,estimate,stderr,exact,abs_error,sup_coupling_distance,wall_time_ms\n"));
    assert!(csv.lines().count() > 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "validate");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn inconsistent_exact_solution_fails_validation() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "problem = \"neumann-heat-interval\"\nseed = 0\n\n[grid]\nT = 2.0\n",
    );
    let out = penalty_mc(
        dir.path(),
        &[
            "validate", "--config", &config, "--paths", "2000", "--steps", "100",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("exact solution terminal condition"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let cases = [
        (
            "problem = \"neumann-heat-interval\"\nseed = 0\nn_schedule = [16, 4]\n",
            "n_schedule",
        ),
        (
            "problem = \"no-such-problem\"\nseed = 0\n",
            "no-such-problem",
        ),
        ("problem = \"neumann-heat-interval\"\nseed = \n", "line 2"),
        (
            "problem = \"neumann-heat-interval\"\nseed = 0\npaths = 0\n",
            "paths",
        ),
    ];
    for (text, needle) in cases {
        let config = write_config(dir.path(), text);
        let out = penalty_mc(dir.path(), &["converge", "--config", &config]);
        assert_eq!(out.status.code(), Some(2), "{text}: {}", stderr(&out));
        assert!(stderr(&out).contains(needle), "{text}: {}", stderr(&out));
    }
    let out = penalty_mc(dir.path(), &["converge", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_leaves_no_partial_report() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = penalty_mc(
        dir.path(),
        &[
            "converge",
            "--paths",
            "500",
            "--steps",
            "20",
            "--out",
            "blocker/out",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers, ["blocker"]);
}

fn converge_csv(dir: &Path, workers: &str) -> String {
    let out_dir = format!("w{workers}");
    let out = penalty_mc(
        dir,
        &[
            "converge",
            "--seed",
            "3",
            "--paths",
            "3000",
            "--steps",
            "50",
            "--workers",
            workers,
            "--out",
            &out_dir,
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    fs::read_to_string(dir.join(out_dir).join("report.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn converge_report_does_not_depend_on_worker_count() {
    let dir = TempDir::new().unwrap();
    let one = converge_csv(dir.path(), "1");
    assert_eq!(one.lines().count(), 6);
    assert_eq!(one, converge_csv(dir.path(), "4"));
}

#[test]
fn simulate_and_diagnose_write_their_files() {
    let dir = TempDir::new().unwrap();
    let out = penalty_mc(
        dir.path(),
        &[
            "simulate", "--paths", "3", "--steps", "10", "--out", "s", "--format", "json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let dump = fs::read_to_string(dir.path().join("s/paths_reflected.csv")).unwrap();
    assert!(dump.starts_with("time,path_id,x0,k\n"));
    assert_eq!(dump.lines().count(), 1 + 3 * 11);

    let out = penalty_mc(
        dir.path(),
        &["diagnose", "--paths", "500", "--steps", "20", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/diagnostics.json")).unwrap())
            .unwrap();
    assert!(body["diagnostics"].is_object());
    assert!(body["manifest"]["config_hash"].is_string());
}
