//! Acceptance criteria, each reduced to a pass/fail line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cowrite::clock::Timestamp;
use cowrite::comments::MessageKind;
use cowrite::ids::{AgentId, TaskId, ThreadId};
use cowrite::session::DocumentState;
use cowrite::tasks::SegmentOutcome;
use cowrite::triggers::{Fired, TriggerKind};
use serde::Serialize;

use crate::exec::Exec;
use crate::runner::{self, thread_events, Report, RunOptions};
use crate::scenario::{Action, Scenario};
use crate::suites::{self, AnchorConfig, ContractConfig, ConvergenceConfig};

pub const CONVERGENCE_LIMIT: Duration = Duration::from_secs(60);
pub const TRIGGER_WALL_LIMIT: Duration = Duration::from_secs(5);
pub const INTERVAL: Duration = Duration::from_secs(5 * 60);
pub const INACTIVITY: Duration = Duration::from_secs(2 * 60);
pub const ASSIGN_GATE: f64 = 0.85;
pub const SEGMENT_GATE: f64 = 0.80;
pub const CONTRACT_GENERATIONS: usize = 100;
pub const ANCHOR_SCRIPTS: usize = 1000;

pub const TRIGGER_FIXTURES: [&str; 4] =
    ["triggers_interval.scn", "triggers_inactivity.scn", "triggers_presence.scn", "triggers_collab.scn"];

#[derive(Clone, Debug, Serialize)]
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Criterion {
    pub fn line(&self) -> String {
        format!("[{}] {} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.name, self.detail)
    }
}

pub fn default_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios")
}

fn criterion(id: u32, name: &'static str, result: Result<String, String>) -> Criterion {
    match result {
        Ok(detail) => Criterion { id, name, pass: true, detail },
        Err(detail) => Criterion { id, name, pass: false, detail },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_fixture(dir: &Path, name: &str) -> Result<(Scenario, Report), String> {
    let scenario = Scenario::load(&dir.join(name)).map_err(|e| e.to_string())?;
    let report = runner::run(&scenario, &RunOptions::default())?;
    Ok((scenario, report))
}

fn passed(name: &str, report: &Report) -> Result<(), String> {
    let failures: Vec<String> =
        report.failures().map(|f| format!("line {}: {}", f.line, f.detail.as_deref().unwrap_or(""))).collect();
    ensure(failures.is_empty(), || format!("{name}: {}", failures.join("; ")))
}

fn state(report: &Report) -> Result<&DocumentState, String> {
    report.state.as_ref().ok_or_else(|| format!("{}: no document", report.scenario))
}

fn label<'a>(report: &'a Report, label: &str) -> Result<&'a str, String> {
    report.labels.get(label).map(String::as_str).ok_or_else(|| format!("{}: label {label} not captured", report.scenario))
}

pub fn convergence(exec: Exec) -> Criterion {
    let config = ConvergenceConfig::default();
    let r = suites::convergence(config, exec);
    let result = (|| {
        ensure(config.replicas >= 5 && config.edits_per_replica >= 200 && config.permutations >= 20, || {
            format!("suite too small: {config:?}")
        })?;
        ensure(r.ops >= config.replicas * config.edits_per_replica, || format!("only {} ops", r.ops))?;
        ensure(r.identical, || format!("{} bodies differ", r.bodies))?;
        ensure(r.elapsed_ms < CONVERGENCE_LIMIT.as_millis(), || format!("took {} ms", r.elapsed_ms))?;
        Ok(format!("{} ops, {} bodies identical ({} chars), {} ms", r.ops, r.bodies, r.body_chars, r.elapsed_ms))
    })();
    criterion(1, "convergence", result)
}

pub fn anchors(exec: Exec) -> Criterion {
    let r = suites::anchors(AnchorConfig::default(), exec);
    let result = (|| {
        ensure(r.scripts == ANCHOR_SCRIPTS, || format!("{} scripts", r.scripts))?;
        ensure(r.live_checks > 0 && r.deleted_checks > 0, || "a case was never exercised".into())?;
        ensure(r.live_matches == r.live_checks, || {
            format!("{}/{} live spans match: {:?}", r.live_matches, r.live_checks, r.mismatches)
        })?;
        ensure(r.deleted_empty == r.deleted_checks, || {
            format!("{}/{} deleted spans empty: {:?}", r.deleted_empty, r.deleted_checks, r.mismatches)
        })?;
        Ok(format!(
            "{} scripts, {}/{} live spans match, {}/{} deleted spans empty",
            r.scripts, r.live_matches, r.live_checks, r.deleted_empty, r.deleted_checks
        ))
    })();
    criterion(2, "anchors", result)
}

pub fn thresholds(dir: &Path) -> Criterion {
    let result = (|| {
        let (_, report) = run_fixture(dir, "thresholds.scn")?;
        passed("thresholds.scn", &report)?;
        let st = state(&report)?;
        let default = st.agents.default_agent().agent_id.clone();
        let recommended = AgentId::new(label(&report, "rev")?);
        let mut seen = Vec::new();
        for (task, confidence) in [("low", 0.84), ("edge", 0.85), ("high", 0.86)] {
            let spec = st.tasks.get(&TaskId::new(label(&report, task)?)).map_err(|e| e.to_string())?;
            let d = spec.last_decision.as_ref().ok_or_else(|| format!("task {task} has no decision"))?;
            ensure(d.confidence_rate == confidence, || format!("task {task}: confidence {}", d.confidence_rate))?;
            let want = if confidence >= ASSIGN_GATE { &recommended } else { &default };
            ensure(&d.assigned == want, || format!("task {task} at {confidence}: assigned {}, want {want}", d.assigned))?;
            seen.push(format!("{confidence}->{}", if d.assigned == default { "default" } else { "recommended" }));
        }
        let runs = st.tasks.runs_of(&TaskId::new(label(&report, "high")?));
        let run = runs.first().ok_or("task high never ran")?;
        for confidence in [0.79, 0.80] {
            let seg = run
                .segments
                .iter()
                .find(|s| s.confidence_rate == confidence)
                .ok_or_else(|| format!("no segment at {confidence}"))?;
            let want = if confidence >= SEGMENT_GATE { SegmentOutcome::Accepted } else { SegmentOutcome::FilteredConfidence };
            ensure(seg.outcome == want, || format!("segment at {confidence}: {:?}", seg.outcome))?;
            seen.push(format!("{confidence}->{}", if want == SegmentOutcome::Accepted { "kept" } else { "discarded" }));
        }
        Ok(seen.join(" "))
    })();
    criterion(3, "thresholds", result)
}

/// Expected trigger firings worked out from a scenario's steps alone.
pub fn expected_fires(scenario: &Scenario) -> Result<Vec<Fired>, String> {
    let threshold = scenario.config.trigger.collab_edit_threshold.max(1);
    let mut online: BTreeSet<&str> = BTreeSet::new();
    let mut contributors: BTreeSet<&str> = BTreeSet::new();
    let mut interval: Option<Timestamp> = None;
    let mut quiet: Option<Timestamp> = None;
    let mut fired = Vec::new();
    let advance = |now: Timestamp, interval: &mut Option<Timestamp>, quiet: &mut Option<Timestamp>, fired: &mut Vec<Fired>| {
        while let Some(due) = interval.filter(|d| *d <= now) {
            fired.push(Fired { at: due, kind: TriggerKind::ShortIntervals });
            *interval = Some(due.saturating_add(INTERVAL));
        }
        if let Some(due) = quiet.filter(|d| *d <= now) {
            fired.push(Fired { at: due, kind: TriggerKind::Inactivity });
            *quiet = None;
        }
    };
    for step in &scenario.steps {
        advance(step.at, &mut interval, &mut quiet, &mut fired);
        let actor = step.actor.as_str();
        match &step.action {
            Action::Join => {
                if online.is_empty() && interval.is_none() {
                    interval = Some(step.at.saturating_add(INTERVAL));
                }
                online.insert(actor);
            }
            Action::Leave | Action::Disconnect => {
                if online.remove(actor) && online.is_empty() {
                    interval = None;
                    fired.push(Fired { at: step.at, kind: TriggerKind::AllOffline });
                }
            }
            Action::Type { .. } | Action::Erase { .. } => {
                quiet = Some(step.at.saturating_add(INACTIVITY));
                contributors.insert(actor);
                if contributors.len() >= threshold {
                    contributors.clear();
                    fired.push(Fired { at: step.at, kind: TriggerKind::CollaborativeEdits });
                }
            }
            Action::Comment { .. } | Action::Reply { .. } => quiet = Some(step.at.saturating_add(INACTIVITY)),
            Action::Save => fired.push(Fired { at: step.at, kind: TriggerKind::OnSave }),
            Action::RandomEdits { .. } | Action::Consume { .. } => {
                return Err(format!("line {}: step not modelled", step.line));
            }
            _ => {}
        }
    }
    fired.sort();
    Ok(fired)
}

fn show(fired: &[Fired]) -> String {
    fired.iter().map(|f| format!("{}@{}", f.kind, f.at)).collect::<Vec<_>>().join(",")
}

pub fn triggers(dir: &Path) -> Criterion {
    let result = (|| {
        let started = Instant::now();
        let mut total = 0;
        let mut interval_at = Vec::new();
        for name in TRIGGER_FIXTURES {
            let (scenario, report) = run_fixture(dir, name)?;
            passed(name, &report)?;
            let want = expected_fires(&scenario)?;
            let mut got = report.fired.clone();
            got.sort();
            ensure(got == want, || format!("{name}: fired {} want {}", show(&got), show(&want)))?;
            if name == "triggers_interval.scn" {
                interval_at = got.iter().filter(|f| f.kind == TriggerKind::ShortIntervals).map(|f| f.at).collect();
            }
            total += got.len();
        }
        let five = Timestamp::from_minutes(5);
        ensure(interval_at == [five, Timestamp::from_minutes(10)], || {
            format!("interval fired at {interval_at:?}")
        })?;
        let first = run_fixture(dir, TRIGGER_FIXTURES[0])?.1;
        let second = run_fixture(dir, TRIGGER_FIXTURES[0])?.1;
        ensure(first == second, || "interval fixture is not deterministic".into())?;
        let wall = started.elapsed();
        ensure(wall < TRIGGER_WALL_LIMIT, || format!("took {wall:?}"))?;
        Ok(format!("{total} firings match, interval at 5:00 and 10:00, {} ms wall", wall.as_millis()))
    })();
    criterion(4, "triggers", result)
}

pub fn pipeline(dir: &Path) -> Criterion {
    let result = (|| {
        let (_, report) = run_fixture(dir, "pipeline.scn")?;
        passed("pipeline.scn", &report)?;
        let st = state(&report)?;
        let task = TaskId::new(label(&report, "check")?);
        let runs = st.tasks.runs_of(&task);
        ensure(runs.len() == 1, || format!("{} runs", runs.len()))?;
        let run = runs[0];
        let from_run = st.doc.annotations.values().filter(|a| a.run_id.as_ref() == Some(&run.run_id)).count();
        ensure(from_run == 1, || format!("{from_run} annotations from the run"))?;
        let mine = st.comments.get(&ThreadId::new(label(&report, "mine")?)).map_err(|e| e.to_string())?;
        let notes: Vec<&str> =
            mine.messages.iter().filter(|m| m.kind == MessageKind::Notice).map(|m| m.body.as_str()).collect();
        ensure(notes.len() == 1 && notes[0].starts_with("Attempted to run task"), || format!("notices {notes:?}"))?;
        let outcomes: Vec<SegmentOutcome> = run.segments.iter().map(|s| s.outcome).collect();
        let want = [SegmentOutcome::Accepted, SegmentOutcome::FilteredConfidence, SegmentOutcome::FilteredOverlap];
        ensure(outcomes.len() == 3 && want.iter().all(|w| outcomes.contains(w)), || format!("outcomes {outcomes:?}"))?;
        Ok(format!("1 new annotation, 1 note on the overlapped thread, outcomes {outcomes:?}"))
    })();
    criterion(5, "pipeline", result)
}

pub const COMMENT_FLOW: [&str; 6] = ["thread_created", "user_message", "agent_typing", "agent_reply", "consumed", "approved"];

pub fn comment_flow(dir: &Path) -> Criterion {
    let result = (|| {
        let (_, report) = run_fixture(dir, "comment_flow.scn")?;
        passed("comment_flow.scn", &report)?;
        let st = state(&report)?;
        let thread = ThreadId::new(label(&report, "t1")?);
        let events = thread_events(&report.events, &thread);
        ensure(events == COMMENT_FLOW, || format!("events {events:?}"))?;
        let t = st.comments.get(&thread).map_err(|e| e.to_string())?;
        let reply = t
            .messages
            .iter()
            .find_map(|m| m.suggestion.as_ref().map(|s| s.proposed_text.clone()))
            .ok_or("no agent suggestion")?;
        let text = st.doc.text();
        ensure(text.contains(&reply), || format!("body {text:?} lacks {reply:?}"))?;
        let pending: usize = st.doc.annotations.values().map(|a| a.pending_regions.len()).sum();
        ensure(pending == 0, || format!("{pending} pending regions left"))?;
        ensure(t.resolved, || "thread not resolved".into())?;
        Ok(format!("events {}; body has the reply; no pending text; resolved", events.join(" ")))
    })();
    criterion(6, "comment flow", result)
}

pub fn contracts(exec: Exec) -> Criterion {
    let r = suites::contracts(ContractConfig::default(), exec);
    let result = (|| {
        for (name, t) in [("titles", &r.titles), ("suggestions", &r.suggestions), ("summaries", &r.summaries)] {
            ensure(t.generations == CONTRACT_GENERATIONS, || format!("{name}: {} generations", t.generations))?;
            ensure(t.all_pass(), || {
                format!("{name}: {}/{} compliant, {} as expected, {:?}", t.compliant, t.generations, t.as_expected, t.violations)
            })?;
        }
        Ok(format!("{CONTRACT_GENERATIONS} titles, suggestion batches and summaries within bounds"))
    })();
    criterion(7, "contracts", result)
}

pub fn roundtrip(dir: &Path) -> Criterion {
    let result = (|| {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| format!("{}: {e}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".scn"))
            .collect();
        names.sort();
        let mut checked = 0;
        for name in &names {
            let (_, report) = run_fixture(dir, name)?;
            if report.doc_id.is_none() {
                continue;
            }
            let rt = report.roundtrip.as_ref().ok_or_else(|| format!("{name}: no round trip"))?;
            ensure(rt.ok(), || format!("{name}: {rt:?}"))?;
            checked += 1;
        }
        ensure(checked > 0, || "no scenarios".into())?;
        Ok(format!("{checked} scenario states reload and replay deep-equal"))
    })();
    criterion(8, "persistence round trip", result)
}

pub fn run_all(fixtures: &Path, exec: Exec) -> Vec<Criterion> {
    vec![
        convergence(exec),
        anchors(exec),
        thresholds(fixtures),
        triggers(fixtures),
        pipeline(fixtures),
        comment_flow(fixtures),
        contracts(exec),
        roundtrip(fixtures),
    ]
}
