use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridfreq"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/fixtures/{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_bundle_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture("tutorial_4bus");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "simulate",
            f.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in [
        "timeseries.csv",
        "equilibrium.json",
        "certification.json",
        "metadata.json",
        "plot.gp",
    ] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    let csv_a = std::fs::read(a.join("timeseries.csv")).unwrap();
    let csv_b = std::fs::read(b.join("timeseries.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("metadata.json")).unwrap()).unwrap();
    let rows = String::from_utf8(csv_a).unwrap().lines().count() - 1;
    assert_eq!(rows as u64, meta["samples"].as_u64().unwrap());
}

#[test]
fn batch_runs_into_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("GRIDFREQ_THREADS", "2")
        .args([
            "simulate",
            fixture("tutorial_4bus").to_str().unwrap(),
            fixture("observer_4bus").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("00_tutorial_4bus/timeseries.csv").is_file());
    assert!(dir.path().join("01_observer_4bus/timeseries.csv").is_file());
}

#[test]
fn schema_errors_exit_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("tutorial_4bus")).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        text.replacen("\"susceptance\": 10.0", "\"susceptance\": -1.0", 1),
    )
    .unwrap();
    let o = run(&["equilibrium", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/lines/0/susceptance"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_keys_rejected_unless_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("tutorial_4bus")).unwrap();
    let extra = dir.path().join("extra.json");
    std::fs::write(
        &extra,
        text.replacen(
            "\"base_mva\": 100,",
            "\"base_mva\": 100, \"comment\": \"x\",",
            1,
        ),
    )
    .unwrap();
    let o = run(&["oslc", extra.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/comment"));
    let o = run(&["--lenient", "oslc", extra.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn infeasible_dispatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("tutorial_4bus")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut v = v;
    for bus in v["buses"].as_array_mut().unwrap() {
        for role in ["supply", "demand"] {
            if let Some(d) = bus["devices"].get_mut(role) {
                d["bounds"] = serde_json::json!({"min": -0.1, "max": 0.1});
            }
        }
    }
    let path = dir.path().join("tight.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let o = run(&["oslc", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn oslc_reports_common_price() {
    let o = run(&["oslc", fixture("tutorial_4bus").to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // 1 p.u. shared by costs 1, 2, 4, 2: price 1 / (1 + 1/2 + 1/4 + 1/2)
    assert!((v["price"].as_f64().unwrap() - 4.0 / 9.0).abs() < 1e-9);
    assert_eq!(v["kkt"]["passed"], true);
}

#[test]
fn check_device_document() {
    let dir = tempfile::tempdir().unwrap();
    let dev = dir.path().join("dev.json");
    let doc = |k: f64| {
        format!(
            r#"{{"supply": {{"type": "second_order_turbine", "params": {{"k": {k}, "tau_a": 0.1, "tau_b": 10, "lambda_pc": 1}}}},
                "damping": {{"type": "linear", "params": {{"lambda": 1}}}}}}"#
        )
    };
    std::fs::write(&dev, doc(2.0)).unwrap();
    let o = run(&[
        "check",
        dev.to_str().unwrap(),
        "--eps1",
        "1e-3",
        "--eps2",
        "1e-3",
        "--mode",
        "a",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["feasible"], true);
}

#[test]
fn check_scenario_lists_every_bus() {
    let o = run(&[
        "check",
        fixture("tutorial_4bus").to_str().unwrap(),
        "--mode",
        "b",
        "--eps1",
        "0.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[test]
fn gen_network_is_deterministic() {
    let a = run(&[
        "gen-network",
        "--buses",
        "2",
        "--gen-fraction",
        "0.5",
        "--seed",
        "1",
    ]);
    let b = run(&[
        "gen-network",
        "--buses",
        "2",
        "--gen-fraction",
        "0.5",
        "--seed",
        "1",
    ]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["lines"].as_array().unwrap().len(), 1);
    let p = run(&["gen-network", "--preset", "synthetic140"]);
    let v: serde_json::Value = serde_json::from_slice(&p.stdout).unwrap();
    let buses = v["buses"].as_array().unwrap();
    assert_eq!(buses.len(), 140);
    assert_eq!(
        buses.iter().filter(|b| b["kind"] == "generator").count(),
        47
    );
    let bad = run(&["gen-network", "--buses", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn passivity_for_one_bus() {
    let f = fixture("tutorial_4bus");
    let o = run(&[
        "passivity",
        f.to_str().unwrap(),
        "--bus",
        "g1",
        "--trials",
        "5",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["trials"], 5);
    let o = run(&["passivity", f.to_str().unwrap(), "--bus", "zz"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn schema_matches_published_file() {
    let o = run(&["schema"]);
    assert!(o.status.success());
    let published = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schema/scenario.schema.json"),
    )
    .unwrap();
    assert_eq!(stdout(&o), published);
}
