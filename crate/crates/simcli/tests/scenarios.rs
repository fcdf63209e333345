use std::fs;

use simcli::acceptance::default_fixtures;
use simcli::runner::{run, run_file, RunOptions};
use simcli::scenario::{Scenario, ScenarioError};

fn fixtures() -> Vec<std::path::PathBuf> {
    let mut paths: Vec<_> = fs::read_dir(default_fixtures())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn every_fixture_passes() {
    let paths = fixtures();
    assert!(paths.len() >= 9);
    for path in paths {
        let report = run_file(&path, &RunOptions::default()).unwrap();
        let failures: Vec<_> = report.failures().collect();
        assert!(report.passed, "{}: {failures:?} {:?}", path.display(), report.roundtrip);
        assert!(report.steps.iter().all(|s| s.ok || report.assertions.iter().any(|a| a.check.contains("error"))));
    }
}

#[test]
fn reports_are_deterministic() {
    for name in ["comment_flow.scn", "convergence.scn", "pipeline.scn"] {
        let path = default_fixtures().join(name);
        let a = serde_json::to_string(&run_file(&path, &RunOptions::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&run_file(&path, &RunOptions::default()).unwrap()).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn seed_changes_random_edits() {
    let path = default_fixtures().join("convergence.scn");
    let a = run_file(&path, &RunOptions::default()).unwrap();
    let b = run_file(&path, &RunOptions { seed: Some(99), ..Default::default() }).unwrap();
    assert!(a.passed && b.passed);
    assert_ne!(a.final_text, b.final_text);
}

#[test]
fn empty_scenario_gives_an_empty_passing_report() {
    let s = Scenario::parse("blank", "# nothing here\n\n", None).unwrap();
    let r = run(&s, &RunOptions::default()).unwrap();
    assert!(r.passed);
    assert!(r.steps.is_empty() && r.assertions.is_empty() && r.events.is_empty());
    assert!(r.doc_id.is_none() && r.roundtrip.is_none());
}

#[test]
fn parse_errors_name_their_lines() {
    let text = "doc\nat 0:00 alice join\nat 0:01 alice dance\nat 0:00 alice save\nat 0:02 expect thread\n";
    match Scenario::parse("bad", text, None) {
        Err(ScenarioError::Parse(errors)) => {
            let lines: Vec<usize> = errors.iter().map(|e| e.line).collect();
            assert_eq!(lines, [3, 4, 5]);
        }
        other => panic!("expected parse errors, got {other:?}"),
    }
}

#[test]
fn failed_checks_are_reported_not_raised() {
    let text = "doc\nat 0:00 alice join\nat 0:01 alice type 0 \"abc\"\nat 0:02 expect text \"abd\"\nat 0:03 expect text abc\n";
    let r = run(&Scenario::parse("f", text, None).unwrap(), &RunOptions::default()).unwrap();
    assert!(!r.passed);
    let failed: Vec<usize> = r.failures().map(|f| f.line).collect();
    assert_eq!(failed, [4]);
}

#[test]
fn failed_steps_are_recorded() {
    let text = "doc\nat 0:00 alice join\nat 0:01 alice erase 0 5\nat 0:02 expect error range\nat 0:03 alice type 0 x\nat 0:04 expect ok\n";
    let r = run(&Scenario::parse("s", text, None).unwrap(), &RunOptions::default()).unwrap();
    assert!(r.passed, "{:?}", r.assertions);
    assert!(!r.steps[1].ok && r.steps[2].ok);
}
