use std::path::Path;
use std::process::{Command, Output};

fn bunching(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bunching"))
        .args(args)
        .current_dir(dir)
        .env_remove("BUNCHING_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

const POLICY: &str = "[policy]
tau0 = 0.0
tau1 = 0.2
k = 2.0
k0 = 1.7
k1 = 2.3
support_lo = 0.8265
support_hi = 7.85

[test]
kappa = 6
ell = 3
";

#[test]
fn help_lists_configuration_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = bunching(&["--help"], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["[policy]", "[test]", "kappa", "[dgp]", "[partial_id.envelope]", "[power]", "gps-ci"] {
        assert!(text.contains(key), "help lacks {key}");
    }
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = bunching(&["--n", "500", "--seed", "9", "simulate"], dir.path());
    let b = bunching(&["--n", "500", "--seed", "9", "simulate"], dir.path());
    let c = bunching(&["--n", "500", "--seed", "10", "simulate"], dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().next(), Some("y,x1,t"));
    assert_eq!(text.lines().count(), 501);
}

#[test]
fn gps_test_writes_json_to_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), POLICY).unwrap();
    assert!(bunching(&["--n", "2000", "--seed", "3", "--output", "sim", "simulate"], p).status.success());
    let out = bunching(&["--config", "run.toml", "--data", "sim/simulate.csv", "--output", "res", "gps-test"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("res/gps-test.json")).unwrap()).unwrap();
    assert_eq!(json["theta"][0].as_f64(), Some(0.5));
    assert_eq!(json["n"].as_u64(), Some(2000));
    let stat = json["stat"].as_f64().unwrap();
    assert!(stat.is_finite() && stat >= 0.0);
    assert!((json["cv"].as_f64().unwrap() - 1.959964).abs() < 1e-5);
}

#[test]
fn grid_output_has_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), POLICY).unwrap();
    assert!(bunching(&["--n", "2000", "--seed", "3", "--output", ".", "simulate"], p).status.success());
    let out = bunching(&["--config", "run.toml", "--data", "simulate.csv", "--grid", "0.5,0.7", "gps-ci"], p);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("theta,mu_hat,sigma_hat,stat,cv,reject,chi_inv,flagged,error"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn power_output_ignores_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--n", "1500", "--reps", "3", "--kappa", "5", "--ell", "2", "--grid", "0.5", "power"];
    let one = bunching(&["--workers", "1"].iter().chain(&args).copied().collect::<Vec<_>>(), dir.path());
    let two = bunching(&["--workers", "2"].iter().chain(&args).copied().collect::<Vec<_>>(), dir.path());
    assert!(one.status.success());
    assert_eq!(one.stdout, two.stdout);
    assert!(stdout(&one).starts_with("theta,reps,reject_rate,mean_stat,fail_count\n"));
}

#[test]
fn data_and_configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(bunching(&["--data", "missing.csv", "gps-test"], p).status.code(), Some(2));
    assert_eq!(bunching(&["gps-test"], p).status.code(), Some(2));
    std::fs::write(p.join("bad.toml"), "sed = 1\n").unwrap();
    assert_eq!(bunching(&["--config", "bad.toml", "simulate"], p).status.code(), Some(2));
    std::fs::write(p.join("d.csv"), "y,t\n1.0,1\nfoo,1\n").unwrap();
    assert_eq!(bunching(&["--data", "d.csv", "gps-test"], p).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.toml"), POLICY).unwrap();
    assert!(bunching(&["--n", "2000", "--seed", "3", "--output", ".", "simulate"], p).status.success());
    let out = bunching(&["--config", "run.toml", "--data", "simulate.csv", "--theta", "0.3", "gps-test"], p);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
