use std::path::PathBuf;

use dcmon_core::scenario::{run_scenario, ScenarioSpec};

fn scenario_files() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_scenario_file_meets_its_expectations() {
    let files = scenario_files();
    assert!(files.len() >= 8);
    let mut failures = Vec::new();
    for path in files {
        let spec = ScenarioSpec::load(&path).unwrap();
        let report = run_scenario(&spec).unwrap();
        println!("{}", report.to_text());
        for a in report.assertions.iter().filter(|a| !a.passed) {
            failures.push(format!("{}: {} ({})", spec.name, a.name, a.detail));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
