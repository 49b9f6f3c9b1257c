use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offset-bf")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// A strong three-user drop that every user survives.
fn strong_generator() -> Value {
    json!({"n_users": 3, "n_antennas": 4, "cell_radius_km": 0.2, "shadowing_std_db": 0.0})
}

#[test]
fn design_writes_report_and_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", &json!({"generator": strong_generator(), "algorithm": "alg1", "r": 2.0, "seed": 4}));
    let out = run(dir.path(), &["design", "--config", &cfg, "--out", "rep.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "rep.json\n");
    let rep = read_json(&dir.path().join("rep.json"));
    assert_eq!(rep["report_kind"], "design");
    assert_eq!(rep["algorithm"], "alg1");
    assert_eq!(rep["selected_users"].as_array().unwrap().len(), 3);
    assert!(rep["design"]["rescheduled"].as_array().unwrap().is_empty());
    assert!(rep["design"]["total_power"].as_f64().unwrap() > 0.0);
    assert_eq!(rep["config"]["r"], 2.0);
    let csv = std::fs::read_to_string(dir.path().join("rep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "index,beta,r,mu_f,sigma_f,predicted_outage,dropped");
    assert_eq!(lines.len(), 4);
}

#[test]
fn report_reproduces_itself() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", &json!({"generator": strong_generator(), "delta": 0.05, "seed": 11, "out": "a.json"}));
    let first = run(dir.path(), &["montecarlo", "--config", &cfg, "--trials", "2000", "--algorithms", "zf"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let before = std::fs::read(dir.path().join("a.json")).unwrap();
    // The report carries the resolved config, including the overrides.
    let second = run(dir.path(), &["montecarlo", "--config", "a.json"]);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(std::fs::read(dir.path().join("a.json")).unwrap(), before);
    let rep = read_json(&dir.path().join("a.json"));
    assert_eq!(rep["config"]["trials"], 2000);
    assert_eq!(rep["algorithm"], "zf");
    assert_eq!(rep["outage"]["n_trials"], 2000);
}

#[test]
fn duplicate_channels_are_rescheduled() {
    let dir = TempDir::new().unwrap();
    let user = |h: Vec<[f64; 2]>| {
        json!({"h_true": h.clone(), "h_est": h, "sigma_e": 0.05, "noise_power": 1.0, "gamma": 4.0, "delta": 0.05})
    };
    let a = vec![[3.0, 0.0], [1.0, 1.0], [0.0, -2.0]];
    let b = vec![[0.5, 0.0], [-2.0, 0.5], [1.0, 3.0]];
    let scenario = json!({"n_antennas": 3, "users": [user(a.clone()), user(a), user(b)]});
    let sc = write(dir.path(), "sc.json", &scenario);
    let cfg = write(
        dir.path(),
        "cfg.json",
        &json!({"scenario_file": sc, "algorithm": "maxr_reschedule", "pt": 50.0, "selection_power": null}),
    );
    let out = run(dir.path(), &["design", "--config", &cfg, "--out", "rep.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rep = read_json(&dir.path().join("rep.json"));
    let dropped = rep["design"]["rescheduled"].as_array().unwrap();
    assert!(!dropped.is_empty());
    assert!(dropped.iter().all(|k| k.as_u64().unwrap() < 2), "{dropped:?}");
}

#[test]
fn malformed_scenario_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("sc.json"), "{\"n_antennas\": 3, \"users\": [").unwrap();
    let cfg = write(dir.path(), "cfg.json", &json!({"scenario_file": "sc.json"}));
    let out = run(dir.path(), &["design", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).is_empty());
    assert!(stderr(&out).contains("[parse]"), "{}", stderr(&out));
}

#[test]
fn malformed_config_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("cfg.json"), "{bad").unwrap();
    let out = run(dir.path(), &["design", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("[parse]"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["design", "--algorithms", "sdp"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("[config]"));
    let cfg = write(dir.path(), "cfg.json", &json!({"r": 2.0, "delta": 0.1}));
    let out = run(dir.path(), &["design", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["design", "--algorithms", "zf,mrt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_design_exits_with_two() {
    let dir = TempDir::new().unwrap();
    // Far users, a tiny budget: the max-r loading has negative powers.
    let cfg = write(
        dir.path(),
        "cfg.json",
        &json!({"generator": {"cell_radius_km": 3.2, "shadowing_std_db": 0.0, "n_users": 3, "n_antennas": 3},
                "algorithm": "maxr", "pt": 1e-6, "selection_power": null}),
    );
    let out = run(dir.path(), &["maxr", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("[design]"));
    assert!(stdout(&out).is_empty());
}

#[test]
fn maxr_reports_the_offset() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", &json!({"generator": strong_generator(), "pt": 10.0, "seed": 2}));
    let out = run(dir.path(), &["maxr", "--config", &cfg, "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rep = read_json(&dir.path().join("m.json"));
    assert_eq!(rep["algorithm"], "maxr");
    assert!(rep["max_r"].as_f64().unwrap() > 0.0);
    assert!((rep["design"]["total_power"].as_f64().unwrap() - 10.0).abs() < 1e-9);
}

fn sweep_rows(dir: &Path, cfg: &Value) -> Vec<Vec<String>> {
    let cfg = write(dir, "sweep.json", cfg);
    let out = run(dir, &["sweep", "--config", &cfg, "--out", "sweep.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "sweep.csv\n");
    std::fs::read_to_string(dir.join("sweep.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn sweep_shape_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({"algorithms": ["zf", "const_offset"], "r_grid": [1.0, 2.0, 3.0], "realizations": 100, "trials": 1000, "seed": 5});
    let rows = sweep_rows(dir.path(), &cfg);
    assert_eq!(rows[0].join(","), "algorithm,r,mean_power_W,mean_outage,stderr_outage,n_viable");
    assert_eq!(rows.len(), 1 + 3 * 2);
    for alg in ["zf", "const_offset"] {
        assert_eq!(rows.iter().filter(|r| r[0] == alg).count(), 3);
    }
    let first = std::fs::read(dir.path().join("sweep.csv")).unwrap();
    sweep_rows(dir.path(), &cfg);
    assert_eq!(std::fs::read(dir.path().join("sweep.csv")).unwrap(), first);
    let rep = read_json(&dir.path().join("sweep.json"));
    assert_eq!(rep["report_kind"], "sweep");
}

#[test]
fn sweep_without_uncertainty_has_no_outage() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({"generator": {"sigma_e": [0.0]}, "algorithms": ["zf"], "r_grid": [1.0, 2.0], "realizations": 30, "trials": 500});
    let rows = sweep_rows(dir.path(), &cfg);
    for row in &rows[1..] {
        if !row[3].is_empty() {
            assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
        }
    }
}
