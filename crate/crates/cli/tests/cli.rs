use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCENARIOS: [&str; 5] = ["bo3_happy", "bo3_onchain", "bo3_staller", "failsafe-at-start", "two-step"];

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn graftsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graftsim")).args(args).current_dir(root()).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("graftsim-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(root().join("golden").join(name)).unwrap()
}

#[test]
fn run_matches_golden_traces_and_reports() {
    for name in SCENARIOS {
        let trace = scratch(&format!("{name}.trace.jsonl"));
        let report = scratch(&format!("{name}.report.json"));
        let scn = format!("scenarios/{name}.scn");
        let out = graftsim(&["run", &scn, "--trace", trace.to_str().unwrap(), "--report", report.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read_to_string(&trace).unwrap(), golden(&format!("{name}.trace.jsonl")), "{name} trace");
        assert_eq!(std::fs::read_to_string(&report).unwrap(), golden(&format!("{name}.report.json")), "{name} report");
    }
}

#[test]
fn run_prints_report_without_report_flag() {
    let out = graftsim(&["run", "scenarios/bo3_happy.scn"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("bo3_happy.report.json"));
}

#[test]
fn demo_matches_golden() {
    let out = graftsim(&["demo"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("demo.txt"));
}

#[test]
fn compare_reports_savings_and_delay() {
    let out = graftsim(&["compare", "scenarios/bo3_happy.scn", "scenarios/bo3_onchain.scn"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["fees_saved_vs_baseline"], 1);
    assert_eq!(report["onchain_tx_count"], 3);

    let out = graftsim(&["compare", "scenarios/failsafe-at-start.scn", "scenarios/bo3_onchain.scn"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["fees_saved_vs_baseline"], -2);
}

#[test]
fn compare_rejects_swapped_modes() {
    let out = graftsim(&["compare", "scenarios/bo3_onchain.scn", "scenarios/bo3_happy.scn"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_exit_codes() {
    let ok = graftsim(&["validate", "contracts/bo3.contract"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("15 nodes"));

    let cycle = scratch("cycle.contract");
    std::fs::write(
        &cycle,
        r#"{
  "participants": ["A", "B"],
  "deposits": {"A": 5, "B": 5},
  "fee": 1,
  "secrets": [],
  "nodes": {"name": "R", "children": [
    {"name": "X", "children": ["R"], "outputs": [{"to": "A", "share": 1}]},
    {"name": "Y", "outputs": [{"to": "B", "share": 1}]}
  ]}
}"#,
    )
    .unwrap();
    let bad = graftsim(&["validate", cycle.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("NotATree"));

    let missing = graftsim(&["validate", "contracts/no-such.contract"]);
    assert_eq!(missing.status.code(), Some(2));

    let garbled = scratch("garbled.contract");
    std::fs::write(&garbled, "{\"participants\": [").unwrap();
    assert_eq!(graftsim(&["validate", garbled.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn seed_override_changes_secrets_only() {
    let a = graftsim(&["run", "scenarios/bo3_happy.scn", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["onchain_txs"], serde_json::json!(["Head", "Init", "LWL"]));
}

#[test]
fn unknown_scenario_field_is_rejected() {
    let scn = scratch("typo.scn");
    let text = std::fs::read_to_string(root().join("scenarios/bo3_happy.scn")).unwrap();
    let text = text.replacen('{', "{\"patiense\": 3,", 1);
    std::fs::write(&scn, text).unwrap();
    let out = graftsim(&["run", scn.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
