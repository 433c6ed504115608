mod common;

use std::path::Path;
use std::process::Command;

use evplan::game::{load_stage_result, read_stage_csv, save_stage_result, stage_csv_string, ProviderOutcome, StageResult, STAGE_CSV_HEADER};
use evplan::{load_scenario, save_scenario, Error, Scenario};
use serde_json::{json, Value};

fn fixture_json(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(common::fixture(name)).unwrap()).unwrap()
}

fn parse(doc: &Value) -> evplan::Result<Scenario> {
    let dir = common::fixture("");
    Scenario::from_json(&doc.to_string(), &dir, Path::new("mutated.json"))
}

fn problems_after(edit: impl FnOnce(&mut Value)) -> Vec<String> {
    let mut doc = fixture_json("game3.json");
    edit(&mut doc);
    match parse(&doc) {
        Err(Error::Validation { problems }) => problems,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn toy_scenario_loads() {
    let s = load_scenario(&common::fixture("toy.json")).unwrap();
    assert_eq!((s.site_count(), s.agents.len(), s.providers.len()), (1, 1, 3));
    assert_eq!(s.grid.buses.len(), 2);
    assert!(s.problems().is_empty());
}

#[test]
fn scenarios_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["toy.json", "game3.json", "stages4.json"] {
        let s = load_scenario(&common::fixture(name)).unwrap();
        let path = dir.path().join(name);
        save_scenario(&s, &path).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), s, "{name}");
    }
}

#[test]
fn unknown_bus_names_the_site() {
    let problems = problems_after(|d| d["sites"][1]["bus"] = json!(77));
    assert!(problems.iter().any(|p| p.contains("centre") && p.contains("77")), "{problems:?}");
}

#[test]
fn each_invariant_is_enforced() {
    type Edit = fn(&mut Value);
    let cases: &[(&str, Edit)] = &[
        ("providers", |d| {
            d["providers"].as_array_mut().unwrap().pop();
        }),
        ("road node", |d| d["sites"][0]["road_node"] = json!(99)),
        ("duplicated", |d| d["sites"][1]["id"] = d["sites"][0]["id"].clone()),
        ("amenities", |d| d["sites"][0]["amenities"]["g"] = json!(2)),
        ("income", |d| d["agents"][0]["income"] = json!(0.0)),
        ("home", |d| d["agents"][0]["home"] = json!(42)),
        ("demand", |d| d["agents"][0]["demand_kwh"] = json!(1000.0)),
        ("no stages", |d| d["stages"] = json!([])),
        ("ev_count", |d| d["stages"] = json!([{"label": "a", "ev_count": 0}])),
        ("exceed", |d| d["stages"] = json!([{"label": "a", "ev_count": 8}, {"label": "b", "ev_count": 8}])),
        ("level_owner", |d| d["sites"][0]["level_owner"] = json!(5)),
        ("no EV agents", |d| d["agents"] = json!([])),
    ];
    for (needle, edit) in cases {
        let problems = problems_after(edit);
        assert!(problems.iter().any(|p| p.contains(needle)), "{needle}: {problems:?}");
    }
}

#[test]
fn malformed_documents_report_the_file() {
    let dir = common::fixture("");
    let err = Scenario::from_json("{ not json", &dir, Path::new("broken.json")).unwrap_err();
    assert_eq!(err.kind(), "parse");
    assert!(err.to_string().contains("broken.json"));
    assert!(matches!(load_scenario(Path::new("/nonexistent/scenario.json")), Err(Error::Parse { .. })));
}

fn outcome(provider: usize, policy: &str, price: Option<f64>, newly: &[&str]) -> ProviderOutcome {
    let policy: evplan::Placement = policy.parse().unwrap();
    ProviderOutcome {
        provider,
        name: format!("L{}", provider + 1),
        level: provider as u8 + 1,
        total_stations: policy.count(),
        policy,
        price,
        expected_utility: 1.25 * provider as f64 - 0.1,
        delay_prob: 0.125,
        delay_se: 0.01,
        coverage: 1.5,
        coverage_se: 0.2,
        newly_built: newly.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn stage_results_round_trip_through_csv() {
    let result = StageResult {
        label: "stage 2".into(),
        ev_count: 100,
        runs: 6,
        prices_converged: true,
        providers: vec![
            outcome(0, "110", Some(0.312_345_678_901), &["north", "centre"]),
            outcome(1, "000", None, &[]),
            outcome(2, "001", Some(0.5), &["south"]),
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage.csv");
    save_stage_result(&result, &path).unwrap();
    assert_eq!(load_stage_result(&path).unwrap(), result);

    let text = stage_csv_string(&[result.clone(), StageResult { label: "stage 3".into(), ..result.clone() }]).unwrap();
    assert_eq!(text.lines().next().unwrap(), STAGE_CSV_HEADER.join(","));
    let back = read_stage_csv(text.as_bytes()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], result);
}

#[test]
fn empty_stage_result_is_header_only() {
    let empty = StageResult { label: String::new(), ev_count: 0, runs: 0, prices_converged: true, providers: vec![] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    save_stage_result(&empty, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), STAGE_CSV_HEADER.join(",") + "\n");
    assert_eq!(load_stage_result(&path).unwrap(), empty);
}

// ---------------------------------------------------------------- command line

fn evplan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_evplan")).args(args).output().unwrap()
}

fn fixture_arg(name: &str) -> String {
    common::fixture(name).to_string_lossy().into_owned()
}

#[test]
fn cli_validate_succeeds() {
    let out = evplan(&["validate", "--scenario", &fixture_arg("game3.json")]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["valid"], json!(true));
    assert_eq!(report["sites"], json!(3));
}

#[test]
fn cli_usage_errors_exit_two() {
    let out = evplan(&["validate", "--scenario", &fixture_arg("toy.json"), "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(evplan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(evplan(&["--help"]).status.code(), Some(0));
}

#[test]
fn cli_domain_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = fixture_json("toy.json");
    doc["grid"]["tables"] = json!(common::fixture("grid2"));
    doc["sites"][0]["bus"] = json!(9);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = evplan(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["error"]["kind"], json!("validation"));
    assert!(report["error"]["message"].as_str().unwrap().contains("s0"));

    let out = evplan(&["validate", "--scenario", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_powerflow_without_stations_has_no_disturbance() {
    let out = evplan(&["powerflow", "--scenario", &fixture_arg("game3.json"), "--placement", "000|000|000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["disturbance"], json!(0.0));
    assert_eq!(report["converged"], json!(true));
}

#[test]
fn cli_plan_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = evplan(&["plan", "--scenario", &fixture_arg("stages4.json"), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let threads = tempfile::tempdir().unwrap();
    let out = evplan(&["--threads", "1", "plan", "--scenario", &fixture_arg("stages4.json"), "--out", threads.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(&name)).unwrap(), "{name:?}");
        assert_eq!(x, std::fs::read(threads.path().join(&name)).unwrap(), "{name:?}");
    }
}
