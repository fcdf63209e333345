use std::sync::Arc;
use std::time::Duration;

use cowrite::clock::{Timestamp, VirtualClock};
use cowrite::comments::{CommentError, ConsumeAction, MessageKind as ChatKind};
use cowrite::document::AnnotationState;
use cowrite::gateway::{Gateway, MockRule, MockScript, TemplateId};
use cowrite::hub::{Hub, HubOptions, JobMode};
use cowrite::ids::{AgentId, DocId, MessageId, TaskId, ThreadId, UserId};
use cowrite::session::{Command, SessionError};
use cowrite::sync::MessageKind;
use cowrite::tasks::{Interaction, SegmentOutcome, TaskDraft};
use cowrite::triggers::TriggerKind;
use serde_json::Value;

fn base_rules() -> Vec<MockRule> {
    vec![
        MockRule::text(TemplateId::Summary, "A careful co-author."),
        MockRule::text(TemplateId::TaskTitle, "Tighten wording"),
    ]
}

fn hub_with(mut rules: Vec<MockRule>, mode: JobMode) -> (Arc<Hub>, VirtualClock) {
    rules.extend(base_rules());
    let clock = VirtualClock::new();
    let options = HubOptions { job_mode: mode, ..HubOptions::default() };
    let hub = Hub::open(options, Arc::new(Gateway::mock(MockScript::from_rules(rules))), Arc::new(clock.clone())).unwrap();
    (hub, clock)
}

fn join(hub: &Arc<Hub>, doc: &DocId, code: &str, name: &str) -> UserId {
    let v = hub.join(doc, code, name).unwrap();
    UserId::new(v["user_id"].as_str().unwrap())
}

fn text(hub: &Hub, doc: &DocId) -> String {
    hub.with(doc, |s| s.state().doc.text()).unwrap()
}

fn id<T: for<'a> From<&'a str>>(v: &Value, field: &str) -> T {
    T::from(v[field].as_str().unwrap())
}

#[test]
fn mention_reply_consume_and_approve() {
    let (hub, _) = hub_with(vec![MockRule::text(TemplateId::AgentInit, "The results are clear.")], JobMode::Inline);
    let (doc, code) = hub.create_doc(Some("A short report".into())).unwrap();
    let alice = join(&hub, &doc, &code, "Alice");
    hub.execute(&doc, Command::EditText { user: alice.clone(), at: 0, delete: 0, insert: "Results are good.".into() })
        .unwrap();
    let created = hub
        .execute(&doc, Command::CreateThread { user: alice.clone(), start: 0, end: 17, body: "@aiAuthor rewrite".into() })
        .unwrap();
    let thread: ThreadId = id(&created, "thread");

    let (reply, kinds) = hub
        .with(&doc, |s| {
            let t = s.state().comments.get(&thread).unwrap().clone();
            (t.messages[1].clone(), s.events().iter().map(|e| e.kind).collect::<Vec<_>>())
        })
        .unwrap();
    assert_eq!(reply.suggestion.as_ref().unwrap().proposed_text, "The results are clear.");
    let typing = kinds.iter().position(|k| *k == MessageKind::AgentTyping).unwrap();
    let last_comment = kinds.iter().rposition(|k| *k == MessageKind::CommentEvent).unwrap();
    assert!(typing < last_comment);

    hub.execute(
        &doc,
        Command::Consume { user: alice.clone(), thread: thread.clone(), message: reply.message_id.clone(), action: ConsumeAction::Append },
    )
    .unwrap();
    assert_eq!(text(&hub, &doc), "Results are good.The results are clear.");
    let again = hub.execute(
        &doc,
        Command::Consume { user: alice.clone(), thread: thread.clone(), message: reply.message_id.clone(), action: ConsumeAction::Copy },
    );
    assert!(matches!(again, Err(SessionError::Comment(CommentError::AlreadyConsumed { .. }))));
    assert_eq!(hub.with(&doc, |s| s.state().doc.pending_elements().len()).unwrap(), 22);

    hub.execute(&doc, Command::Approve { user: alice.clone(), thread: thread.clone() }).unwrap();
    hub.with(&doc, |s| {
        assert!(s.state().doc.pending_elements().is_empty());
        assert!(s.state().comments.get(&thread).unwrap().resolved);
    })
    .unwrap();
    let second = hub.execute(&doc, Command::Approve { user: alice, thread }).unwrap();
    assert_eq!(second["changed"], false);
}

#[test]
fn deleting_an_annotation_drops_its_pending_text() {
    let (hub, _) = hub_with(vec![MockRule::text(TemplateId::AgentInit, "Better.")], JobMode::Inline);
    let (doc, code) = hub.create_doc(None).unwrap();
    let bob = join(&hub, &doc, &code, "Bob");
    hub.execute(&doc, Command::EditText { user: bob.clone(), at: 0, delete: 0, insert: "Good.".into() }).unwrap();
    let created =
        hub.execute(&doc, Command::CreateThread { user: bob.clone(), start: 0, end: 5, body: "@aiauthor".into() }).unwrap();
    let thread: ThreadId = id(&created, "thread");
    let msg = hub.with(&doc, |s| s.state().comments.get(&thread).unwrap().messages[1].message_id.clone()).unwrap();
    hub.execute(&doc, Command::Consume { user: bob.clone(), thread: thread.clone(), message: msg, action: ConsumeAction::Replace })
        .unwrap();
    assert_eq!(text(&hub, &doc), "Better.");
    hub.execute(&doc, Command::DeleteAnnotation { user: bob, thread }).unwrap();
    assert_eq!(text(&hub, &doc), "");
}

#[test]
fn replies_to_resolved_threads_are_discarded() {
    let (hub, _) = hub_with(vec![MockRule::text(TemplateId::AgentInit, "Late answer.")], JobMode::Manual);
    let (doc, code) = hub.create_doc(None).unwrap();
    hub.run_jobs(&doc);
    let u = join(&hub, &doc, &code, "Cy");
    hub.execute(&doc, Command::EditText { user: u.clone(), at: 0, delete: 0, insert: "Text.".into() }).unwrap();
    let created = hub.execute(&doc, Command::CreateThread { user: u.clone(), start: 0, end: 4, body: "@aiAuthor?".into() }).unwrap();
    let thread: ThreadId = id(&created, "thread");
    hub.execute(&doc, Command::Approve { user: u, thread: thread.clone() }).unwrap();
    assert_eq!(hub.run_jobs(&doc), 1);
    hub.with(&doc, |s| {
        assert_eq!(s.state().comments.get(&thread).unwrap().messages.len(), 1);
        let last = s.events().last().unwrap();
        assert_eq!(last.kind, MessageKind::Error);
    })
    .unwrap();
}

#[test]
fn failed_agent_leaves_a_notice() {
    let (hub, _) = hub_with(vec![MockRule::transport_error(TemplateId::AgentInit, "down")], JobMode::Inline);
    let (doc, code) = hub.create_doc(None).unwrap();
    let u = join(&hub, &doc, &code, "Dee");
    hub.execute(&doc, Command::EditText { user: u.clone(), at: 0, delete: 0, insert: "Text.".into() }).unwrap();
    let created = hub.execute(&doc, Command::CreateThread { user: u, start: 0, end: 4, body: "@aiAuthor?".into() }).unwrap();
    let thread: ThreadId = id(&created, "thread");
    hub.with(&doc, |s| {
        let t = s.state().comments.get(&thread).unwrap();
        assert_eq!(t.notices(), 1);
        assert!(t.messages.iter().all(|m| m.suggestion.is_none()));
        assert!(s.events().iter().any(|e| e.kind == MessageKind::Error));
    })
    .unwrap();
}

fn segments_json(items: &[(&str, &str, f64)]) -> String {
    let v: Vec<Value> = items
        .iter()
        .map(|(t, s, c)| serde_json::json!({"selected_text": t, "selected_text_sentence": s, "reason": "wordy", "confidence_rate": c}))
        .collect();
    serde_json::to_string(&v).unwrap()
}

#[test]
fn task_run_filters_and_annotates() {
    let body = "Alpha beta gamma. Delta epsilon zeta. Eta theta iota.";
    let segs = segments_json(&[
        ("Alpha beta", "Alpha beta gamma.", 0.95),
        ("Delta epsilon", "Delta epsilon zeta.", 0.5),
        ("theta", "Eta theta iota.", 0.9),
    ]);
    let (hub, _) = hub_with(
        vec![
            MockRule::text(TemplateId::SegmentSelect, segs),
            MockRule::text(TemplateId::AgentInit, "Rewritten."),
        ],
        JobMode::Inline,
    );
    let (doc, code) = hub.create_doc(None).unwrap();
    let u = join(&hub, &doc, &code, "Eve");
    hub.execute(&doc, Command::EditText { user: u.clone(), at: 0, delete: 0, insert: body.into() }).unwrap();
    // an existing comment on "theta"
    let existing = hub
        .execute(&doc, Command::CreateThread { user: u.clone(), start: 42, end: 47, body: "hmm".into() })
        .unwrap();
    let existing_thread: ThreadId = id(&existing, "thread");
    let default = AgentId::new(format!("{doc}-a0"));
    let created = hub
        .execute(
            &doc,
            Command::CreateTask {
                user: u.clone(),
                draft: TaskDraft {
                    description: "Tighten wording".into(),
                    assignee: Some(default),
                    interaction: Some(Interaction::Manual),
                    trigger: None,
                    shortcut: false,
                },
            },
        )
        .unwrap();
    let task = TaskId::new(created["task"]["task_id"].as_str().unwrap());
    hub.execute(&doc, Command::RunTask { user: u, task: task.clone() }).unwrap();
    hub.with(&doc, |s| {
        let runs = s.state().tasks.runs_of(&task);
        assert_eq!(runs.len(), 1);
        let outcomes: Vec<_> = runs[0].segments.iter().map(|r| r.outcome).collect();
        assert_eq!(
            outcomes,
            vec![SegmentOutcome::Accepted, SegmentOutcome::FilteredConfidence, SegmentOutcome::FilteredOverlap]
        );
        let annotation = runs[0].segments[0].annotation_id.clone().unwrap();
        let a = s.state().doc.annotation(&annotation).unwrap();
        assert_eq!(s.state().doc.anchor_text(&a.anchor).unwrap(), "Alpha beta");
        assert_eq!(a.run_id.as_ref(), Some(&runs[0].run_id));
        let note = s.state().comments.get(&existing_thread).unwrap();
        assert_eq!(note.messages.last().unwrap().kind, ChatKind::Notice);
    })
    .unwrap();
}

#[test]
fn interval_trigger_runs_autonomous_tasks_once_per_period() {
    let (hub, clock) = hub_with(vec![MockRule::text(TemplateId::SegmentSelect, "[]")], JobMode::Inline);
    let (doc, code) = hub.create_doc(None).unwrap();
    let u = join(&hub, &doc, &code, "Fay");
    let default = AgentId::new(format!("{doc}-a0"));
    hub.execute(
        &doc,
        Command::CreateTask {
            user: u.clone(),
            draft: TaskDraft {
                description: "Check tone".into(),
                assignee: Some(default),
                interaction: Some(Interaction::Autonomous),
                trigger: Some(TriggerKind::ShortIntervals),
                shortcut: false,
            },
        },
    )
    .unwrap();
    join(&hub, &doc, &code, "Gus");
    clock.advance(Duration::from_secs(299));
    hub.tick_all();
    assert!(hub.with(&doc, |s| s.fired().is_empty()).unwrap());
    clock.advance(Duration::from_secs(1));
    hub.tick_all();
    clock.advance(Duration::from_secs(300));
    hub.tick_all();
    hub.with(&doc, |s| {
        let at: Vec<Timestamp> = s.fired().iter().filter(|f| f.kind == TriggerKind::ShortIntervals).map(|f| f.at).collect();
        assert_eq!(at, vec![Timestamp::from_minutes(5), Timestamp::from_minutes(10)]);
        assert_eq!(s.state().tasks.runs().len(), 2);
    })
    .unwrap();
    hub.execute(&doc, Command::Leave { user: u }).unwrap();
}

#[test]
fn deleting_an_agent_moves_its_tasks_to_the_default() {
    let (hub, _) = hub_with(vec![], JobMode::Inline);
    let (doc, code) = hub.create_doc(None).unwrap();
    let u = join(&hub, &doc, &code, "Hal");
    let made = hub
        .execute(&doc, Command::InstantiatePreset { user: u.clone(), preset: "reviewer".into() })
        .unwrap();
    let agent = AgentId::new(made["agent"]["agent_id"].as_str().unwrap());
    let t = hub
        .execute(
            &doc,
            Command::CreateTask {
                user: u.clone(),
                draft: TaskDraft { description: "Review".into(), assignee: Some(agent.clone()), ..TaskDraft::default() },
            },
        )
        .unwrap();
    let task = TaskId::new(t["task"]["task_id"].as_str().unwrap());
    hub.execute(&doc, Command::DeleteAgent { user: u, agent }).unwrap();
    hub.with(&doc, |s| {
        let spec = s.state().tasks.get(&task).unwrap();
        assert_eq!(spec.assignee, cowrite::tasks::Assignee::Agent(AgentId::new(format!("{doc}-a0"))));
    })
    .unwrap();
}

#[test]
fn wrong_join_code_and_non_members_are_rejected() {
    let (hub, _) = hub_with(vec![], JobMode::Inline);
    let (doc, _) = hub.create_doc(None).unwrap();
    assert_eq!(hub.join(&doc, "nope", "Ivy"), Err(SessionError::InvalidJoinCode));
    let r = hub.execute(&doc, Command::Save { user: UserId::new("d1-u99") });
    assert!(matches!(r, Err(SessionError::NotMember(_))));
}

#[test]
fn restart_restores_state_and_pending_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let script = || {
        let mut rules = vec![MockRule::text(TemplateId::AgentInit, "Reply.")];
        rules.extend(base_rules());
        Arc::new(Gateway::mock(MockScript::from_rules(rules)))
    };
    let options = HubOptions { data_dir: Some(dir.path().to_path_buf()), job_mode: JobMode::Manual, ..HubOptions::default() };
    let clock = VirtualClock::new();
    let hub = Hub::open(options.clone(), script(), Arc::new(clock.clone())).unwrap();
    let (doc, code) = hub.create_doc(Some("goal".into())).unwrap();
    hub.run_jobs(&doc);
    let u = join(&hub, &doc, &code, "Jo");
    hub.execute(&doc, Command::EditText { user: u.clone(), at: 0, delete: 0, insert: "Some text.".into() }).unwrap();
    hub.execute(&doc, Command::Save { user: u.clone() }).unwrap();
    hub.execute(&doc, Command::CreateThread { user: u, start: 0, end: 4, body: "@aiAuthor".into() }).unwrap();
    let before = hub.state_hash(&doc).unwrap();
    drop(hub);

    let hub = Hub::open(options, script(), Arc::new(clock)).unwrap();
    assert_eq!(hub.state_hash(&doc).unwrap(), before);
    assert_eq!(hub.with(&doc, |s| s.queued()).unwrap(), 1);
    assert_eq!(hub.run_jobs(&doc), 1);
    let replies = hub
        .with(&doc, |s| s.state().comments.iter().map(|t| t.messages.len()).sum::<usize>())
        .unwrap();
    assert_eq!(replies, 2);
}

#[test]
fn log_replay_reproduces_the_state() {
    let (hub, _) = hub_with(vec![MockRule::text(TemplateId::AgentInit, "Reply.")], JobMode::Inline);
    let (doc, code) = hub.create_doc(None).unwrap();
    let u = join(&hub, &doc, &code, "Kim");
    hub.execute(&doc, Command::EditText { user: u.clone(), at: 0, delete: 0, insert: "Words here.".into() }).unwrap();
    let c = hub.execute(&doc, Command::CreateThread { user: u.clone(), start: 0, end: 5, body: "@aiAuthor".into() }).unwrap();
    let thread: ThreadId = id(&c, "thread");
    let m: MessageId =
        hub.with(&doc, |s| s.state().comments.get(&thread).unwrap().messages[1].message_id.clone()).unwrap();
    hub.execute(&doc, Command::Consume { user: u, thread, message: m, action: ConsumeAction::Append }).unwrap();
    let (log, state) = hub.with(&doc, |s| (s.log().to_vec(), s.state().clone())).unwrap();
    let replayed = cowrite::session::DocumentSession::replay(
        &log,
        *hub.config(),
        Arc::new(cowrite::agents::PresetCatalog::builtin()),
    )
    .unwrap();
    assert_eq!(replayed.state(), &state);
    let annotation = state.annotations_open();
    assert_eq!(annotation, 1);
}

trait OpenCount {
    fn annotations_open(&self) -> usize;
}

impl OpenCount for cowrite::session::DocumentState {
    fn annotations_open(&self) -> usize {
        self.doc.annotations.values().filter(|a| a.state == AnnotationState::Open).count()
    }
}

mod round_trip {
    use super::*;
    use proptest::prelude::*;

    fn command(user: &UserId, pick: (u8, usize, usize), len: usize) -> Command {
        let (kind, a, b) = pick;
        let (start, end) = if len == 0 { (0, 0) } else { (a % (len + 1), (a % (len + 1)).max(b % (len + 1))) };
        match kind {
            0..=3 => Command::EditText { user: user.clone(), at: start, delete: end - start, insert: format!("w{a} ") },
            4 => Command::CreateThread { user: user.clone(), start, end, body: format!("note {b}") },
            5 => Command::CreateThread { user: user.clone(), start, end, body: "@aiAuthor please".into() },
            6 => Command::Save { user: user.clone() },
            7 => Command::InstantiatePreset { user: user.clone(), preset: "english-teacher".into() },
            _ => Command::SetGoal { user: user.clone(), goal: Some(format!("goal {a}")) },
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Whatever happened, reopening the data directory gives back the
        /// same document state.
        #[test]
        fn save_then_load_is_identity(picks in proptest::collection::vec((0u8..9, 0usize..200, 0usize..200), 1..30)) {
            let dir = tempfile::tempdir().unwrap();
            let gateway = || {
                let mut rules = vec![MockRule::text(TemplateId::AgentInit, "Sure.")];
                rules.extend(base_rules());
                Arc::new(Gateway::mock(MockScript::from_rules(rules)))
            };
            let options = HubOptions { data_dir: Some(dir.path().to_path_buf()), ..HubOptions::default() };
            let clock = VirtualClock::new();
            let hub = Hub::open(options.clone(), gateway(), Arc::new(clock.clone())).unwrap();
            let (doc, code) = hub.create_doc(None).unwrap();
            let user = join(&hub, &doc, &code, "Lee");
            for pick in picks {
                clock.advance(Duration::from_secs(7));
                let len = hub.with(&doc, |s| s.state().doc.body.len()).unwrap();
                let _ = hub.execute(&doc, command(&user, pick, len));
            }
            let state = hub.with(&doc, |s| s.state().clone()).unwrap();
            drop(hub);
            let reopened = Hub::open(options, gateway(), Arc::new(clock)).unwrap();
            let loaded = reopened.with(&doc, |s| s.state().clone()).unwrap();
            prop_assert_eq!(loaded, state);
        }
    }
}
