use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dias::document::{summary_table, MetricsDocument};
use serde_json::{json, Value};
use tempfile::TempDir;

fn dias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dias")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn map_reduce(name: &str, priority: u32, map: usize, reduce: usize, rate: f64, timing: &str) -> Value {
    json!({
        "name": name,
        "priority": priority,
        "job": {
            "kind": "map_reduce",
            "map_tasks": {"point": map},
            "reduce_tasks": {"point": reduce},
            "setup_rate_per_s": rate,
            "map_rate_per_s": rate,
            "shuffle_rate_per_s": rate,
            "reduce_rate_per_s": rate
        },
        "timing": {"kind": timing}
    })
}

/// High and low classes of small jobs on two slots.
fn two_class(load: f64, horizon: f64) -> Value {
    json!({
        "name": "small",
        "slots": 2,
        "classes": [
            map_reduce("high", 2, 4, 1, 2.0, "deterministic"),
            map_reduce("low", 1, 10, 2, 1.0, "deterministic")
        ],
        "arrivals": {"kind": "marked_poisson", "rates_per_s": [1.0, 3.0]},
        "target_utilization": load,
        "policy": {"kind": "non_preemptive"},
        "horizon_s": horizon,
        "seed": 5
    })
}

#[test]
fn predict_small_job_mean() {
    let dir = TempDir::new().unwrap();
    for timing in ["exponential", "deterministic"] {
        let doc = json!({
            "slots": 2,
            "classes": [map_reduce("only", 1, 3, 1, 1.0, timing)],
            "arrivals": {"kind": "marked_poisson", "rates_per_s": [0.05]},
            "policy": {"kind": "non_preemptive"},
            "horizon_s": 1000.0
        });
        let path = write(&dir, "s.json", &doc);
        let o = dias(&["predict", "--scenario", s(&path)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        let mean = v["classes"][0]["mean_s"].as_f64().unwrap();
        assert!((mean - 5.0).abs() < 1e-9, "{timing}: {mean}");
        assert!((v["offered_load"].as_f64().unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(v["classes"][0]["scv"].is_null(), timing == "deterministic");
    }
}

#[test]
fn negative_rate_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let mut doc = two_class(0.5, 1000.0);
    doc["classes"][1]["job"]["map_rate_per_s"] = json!(-1.0);
    let path = write(&dir, "bad.json", &doc);
    let o = dias(&["validate", "--scenario", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("SCHEMA_RATE_NONPOSITIVE: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let mut doc = two_class(0.5, 1000.0);
    doc["speed"] = json!(3);
    let path = write(&dir, "bad.json", &doc);
    let o = dias(&["validate", "--scenario", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("SCHEMA_PARSE: "));
}

#[test]
fn overload_is_infeasible() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.json", &two_class(1.2, 1000.0));
    for cmd in ["validate", "simulate"] {
        let o = dias(&[cmd, "--scenario", s(&path)]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert!(stderr(&o).starts_with("INFEASIBLE_LOAD: "));
    }
}

#[test]
fn short_horizon_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let mut doc = two_class(0.5, 10.0);
    doc["arrivals"] = json!({"kind": "trace", "jobs": [{"time_s": 50.0, "class": 0}]});
    doc.as_object_mut().unwrap().remove("target_utilization");
    let path = write(&dir, "s.json", &doc);
    let o = dias(&["simulate", "--scenario", s(&path)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("HORIZON_TOO_SHORT: "));
}

#[test]
fn sweep_rows_and_monotone_execution() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.json", &two_class(0.8, 3000.0));
    let out = dir.path().join("sweep.csv");
    let o = dias(&[
        "sweep", "--scenario", s(&path), "--grid", "theta.low=0,0.1,0.2,0.4", "--runs", "3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(&header[1], "theta.low");
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    // 4 points x (2 classes x 4 metrics + 3 system metrics)
    assert_eq!(rows.len(), 4 * 11);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut seen = std::collections::HashSet::new();
    for row in &rows {
        assert!(seen.insert((row[1].to_string(), row[col("class")].to_string(), row[col("metric")].to_string())));
        assert_eq!(&row[col("seed")], "5");
        assert_eq!(row[col("scenario_hash")].len(), 64);
    }
    let exec: Vec<f64> = rows
        .iter()
        .filter(|r| &r[col("class")] == "low" && &r[col("metric")] == "mean_execution_s")
        .map(|r| r[col("mean")].parse().unwrap())
        .collect();
    assert_eq!(exec.len(), 4);
    assert!(exec.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{exec:?}");
    assert!(exec[3] < exec[0]);
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.json", &two_class(0.6, 1000.0));
    let args = [
        "sweep", "--scenario", s(&path), "--grid", "target_utilization=0.4,0.6", "--grid", "theta.low=0,0.4",
        "--runs", "4", "--format", "json",
    ];
    let a = dias(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_dias"))
        .args(args)
        .env("DIAS_THREADS", "1")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4 * 11);
    assert_eq!(v[0]["params"]["target_utilization"], "0.4");
}

#[test]
fn metrics_round_trip_through_report() {
    let dir = TempDir::new().unwrap();
    let mut doc = two_class(0.6, 2000.0);
    doc["classes"][0]["timing"] = json!({"kind": "exponential"});
    doc["policy"] = json!({"kind": "preemptive"});
    let path = write(&dir, "s.json", &doc);
    let out = dir.path().join("m.json");
    let events = dir.path().join("events.jsonl");
    let o = dias(&[
        "simulate", "--scenario", s(&path), "--runs", "3", "--seed", "9", "--out", s(&out), "--events", s(&events),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let m: MetricsDocument = serde_json::from_str(&text).unwrap();
    assert_eq!((m.runs, m.seed, m.policy.as_str()), (3, 9, "P"));
    assert_eq!(serde_json::to_string_pretty(&m).unwrap(), text);
    let report = dias(&["report", "--metrics", s(&out)]);
    assert!(report.status.success());
    assert_eq!(String::from_utf8(report.stdout).unwrap(), summary_table(&m));
    // one event line per job and run, tagged with the run's seed
    let lines: Vec<Value> = std::fs::read_to_string(&events)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    let seeds: std::collections::BTreeSet<u64> = lines.iter().map(|l| l["run_seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec![9, 10, 11]);
    assert!(lines.iter().all(|l| l["attempts"].is_array() && l["arrival"].is_number()));
}

#[test]
fn plan_reports_infeasibility_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.json", &two_class(0.6, 1000.0));
    let impossible = json!({
        "classes": [
            {"max_relative_error": 0.0, "max_mean_latency_s": 0.0},
            {"max_relative_error": 20.0}
        ],
        "latency_weight": 1.0,
        "accuracy_weight": 0.0
    });
    let t = write(&dir, "t.json", &impossible);
    let o = dias(&["plan", "--scenario", s(&path), "--targets", s(&t), "--grid", "theta=0,0.2", "--runs", "2"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("INFEASIBLE_TARGETS: "));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["feasible"], false);
    assert!(v["table"].as_array().unwrap().iter().all(|r| r["feasible"] == false));

    let easy = json!({
        "classes": [{"max_relative_error": 0.0}, {"max_relative_error": 20.0}],
        "latency_weight": 1.0,
        "accuracy_weight": 0.0
    });
    let t = write(&dir, "t2.json", &easy);
    let o = dias(&["plan", "--scenario", s(&path), "--targets", s(&t), "--grid", "theta=0,0.2", "--runs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["feasible"], true);
    // low class drops 20%: fewer tasks and a shorter response
    assert_eq!(v["chosen"]["theta"], json!([0.0, 0.2]));
    assert_eq!(v["chosen_policy"]["kind"], "differential_approx");
    assert_eq!(v["scenario_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn presets_validate() {
    let dir = TempDir::new().unwrap();
    let list = dias(&["preset"]);
    for name in String::from_utf8(list.stdout).unwrap().lines() {
        let out = dir.path().join(format!("{name}.json"));
        assert!(dias(&["preset", name, "--out", s(&out)]).status.success());
        let o = dias(&["validate", "--scenario", s(&out)]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
    assert_eq!(dias(&["preset", "nope"]).status.code(), Some(2));
}

#[test]
fn bad_grid_key_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "s.json", &two_class(0.6, 1000.0));
    let o = dias(&["sweep", "--scenario", s(&path), "--grid", "timeout_s.high=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("SCHEMA_GRID: "));
}
