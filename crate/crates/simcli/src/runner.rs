//! Runs a [`Scenario`] in-process against a fresh hub on a virtual clock.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use cowrite::agents::{AgentDraft, PresetCatalog};
use cowrite::clock::{Timestamp, VirtualClock};
use cowrite::comments::{Message, MessageKind as ChatKind};
use cowrite::document::sequence::{SeqOp, Sequence};
use cowrite::document::AnnotationState;
use cowrite::gateway::{Gateway, MockRule, MockScript, TemplateId};
use cowrite::hub::{Hub, HubOptions, JobMode};
use cowrite::ids::{AgentId, DocId, Identity, MessageId, TaskId, ThreadId, UserId};
use cowrite::persistence::content_hash;
use cowrite::session::{Command, DocumentSession, DocumentState, LogEntry, SessionError};
use cowrite::sync::{ConnId, MessageKind, SessionMessage};
use cowrite::tasks::{Assignee, Interaction, TaskDraft};
use cowrite::triggers::Fired;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::mpsc::UnboundedReceiver;

use crate::edits::{local_edit, sub_seed};
use crate::scenario::{format_time, Action, Check, Jobs, MessageRef, Scenario, ScenarioError};

/// Answer for agent summaries when a scenario's mock does not provide one.
const FALLBACK_SUMMARY: &str = "A writing assistant for this document.";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    /// Rules tried after the scenario's own.
    pub extra_mock: Option<MockScript>,
    /// Skip the save/load comparison at the end.
    pub skip_roundtrip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub line: usize,
    pub at: String,
    pub step: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssertionRecord {
    pub line: usize,
    pub at: String,
    pub check: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTrip {
    /// State loaded back from the data directory equals the live state.
    pub reloaded_equal: bool,
    /// State rebuilt from the log alone equals the live state.
    pub replayed_equal: bool,
    pub state_hash: String,
    pub reloaded_hash: String,
    pub replayed_hash: String,
}

impl RoundTrip {
    pub fn ok(&self) -> bool {
        self.reloaded_equal && self.replayed_equal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<DocId>,
    pub steps: Vec<StepRecord>,
    pub assertions: Vec<AssertionRecord>,
    /// Every session message of the document, in emission order.
    pub events: Vec<SessionMessage>,
    pub fired: Vec<Fired>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roundtrip: Option<RoundTrip>,
    /// Final document state, for callers that inspect it directly.
    #[serde(skip)]
    pub state: Option<DocumentState>,
    /// Scenario labels and the ids they captured.
    #[serde(skip)]
    pub labels: BTreeMap<String, String>,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &AssertionRecord> {
        self.assertions.iter().filter(|a| !a.pass)
    }
}

/// Short name of a session message for order checks, e.g. `agent_reply`.
pub fn event_label(m: &SessionMessage) -> String {
    match m.kind {
        MessageKind::CommentEvent => match m.payload_str("type") {
            Some("message") => {
                let msg: Option<Message> = serde_json::from_value(m.payload["message"].clone()).ok();
                match msg {
                    Some(msg) if msg.kind == ChatKind::Notice => "notice".into(),
                    Some(Message { author: Identity::Agent(_), .. }) => "agent_reply".into(),
                    _ => "user_message".into(),
                }
            }
            Some(t) => t.to_owned(),
            None => "comment_event".into(),
        },
        MessageKind::TaskEvent => m.payload_str("type").unwrap_or("task_event").to_owned(),
        other => other.as_str().to_owned(),
    }
}

/// Labels of the messages that concern `thread`, in order.
pub fn thread_events(events: &[SessionMessage], thread: &ThreadId) -> Vec<String> {
    events.iter().filter(|m| m.payload_str("thread") == Some(thread.as_str())).map(event_label).collect()
}

struct Client {
    user: UserId,
    conn: Option<ConnId>,
    rx: Option<UnboundedReceiver<SessionMessage>>,
    replica: Option<Sequence>,
    rng: ChaCha8Rng,
}

impl Client {
    /// Applies everything received so far, in shuffled order.
    fn sync(&mut self) -> Result<usize, String> {
        let (Some(rx), Some(replica)) = (self.rx.as_mut(), self.replica.as_mut()) else {
            return Err("not connected".into());
        };
        let mut inbox: Vec<SeqOp> = Vec::new();
        while let Ok(m) = rx.try_recv() {
            if m.kind == MessageKind::EditUpdate {
                if let Some(op) = m.payload.get("op") {
                    inbox.push(serde_json::from_value(op.clone()).map_err(|e| e.to_string())?);
                }
            }
        }
        inbox.shuffle(&mut self.rng);
        let n = inbox.len();
        for op in inbox {
            replica.apply(op).map_err(|e| e.to_string())?;
        }
        Ok(n)
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    hub: Arc<Hub>,
    clock: VirtualClock,
    options: HubOptions,
    doc: Option<DocId>,
    code: String,
    clients: BTreeMap<String, Client>,
    labels: BTreeMap<String, String>,
    last: Option<Result<Value, String>>,
    seed: u64,
}

fn err(e: SessionError) -> String {
    e.to_string()
}

impl Sim<'_> {
    fn doc(&self) -> Result<&DocId, String> {
        self.doc.as_ref().ok_or_else(|| "no document".to_owned())
    }

    fn read<T>(&self, f: impl FnOnce(&DocumentSession) -> T) -> Result<T, String> {
        self.hub.with(self.doc()?, |s| f(s)).map_err(err)
    }

    fn user(&self, actor: &str) -> Result<UserId, String> {
        self.clients.get(actor).map(|c| c.user.clone()).ok_or_else(|| format!("{actor} has not joined"))
    }

    fn exec(&self, command: Command) -> Result<Value, String> {
        self.hub.execute(self.doc()?, command).map_err(err)
    }

    fn resolve(&self, r: &str) -> String {
        self.labels.get(r).cloned().unwrap_or_else(|| r.to_owned())
    }

    fn agent(&self, r: &str) -> Result<AgentId, String> {
        if let Some(id) = self.labels.get(r) {
            return Ok(AgentId::new(id.clone()));
        }
        self.read(|s| {
            let agents = &s.state().agents;
            if r == "default" {
                return agents.default_agent().agent_id.clone();
            }
            agents.by_handle(r.trim_start_matches('@')).map_or_else(|| AgentId::new(r), |a| a.agent_id.clone())
        })
    }

    /// Fires every timer due up to `t` at its own virtual time.
    fn advance_to(&self, t: Timestamp) {
        if let Some(doc) = &self.doc {
            loop {
                let due = self.hub.with(doc, |s| s.next_deadline()).ok().flatten();
                match due {
                    Some(d) if d <= t => {
                        self.clock.set(d);
                        self.hub.tick_all();
                        if self.hub.with(doc, |s| s.next_deadline()).ok().flatten() == Some(d) {
                            break;
                        }
                    }
                    _ => break,
                }
            }
        }
        self.clock.set(t);
    }

    fn join(&mut self, actor: &str) -> Result<Value, String> {
        let doc = self.doc()?.clone();
        let joined = self.hub.join(&doc, &self.code, actor).map_err(err)?;
        let user = UserId::new(joined["user_id"].as_str().ok_or("join returned no user")?);
        let seed = sub_seed(self.seed, actor);
        let client = self.clients.entry(actor.to_owned()).or_insert_with(|| Client {
            user: user.clone(),
            conn: None,
            rx: None,
            replica: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        if client.conn.is_none() {
            let (conn, rx, replica) = self
                .hub
                .with(&doc, |s| -> Result<_, SessionError> {
                    let (conn, rx) = s.attach(&user)?;
                    let replica = s.state().members.get(&user).map(|m| m.replica).ok_or(SessionError::NotMember(user.clone()))?;
                    Ok((conn, rx, s.state().doc.body.fork(replica)))
                })
                .map_err(err)?
                .map_err(err)?;
            client.conn = Some(conn);
            client.rx = Some(rx);
            client.replica = Some(replica);
        }
        Ok(joined)
    }

    fn drop_connection(&mut self, actor: &str) -> Result<Option<UserId>, String> {
        let doc = self.doc()?.clone();
        let client = self.clients.get_mut(actor).ok_or_else(|| format!("{actor} has not joined"))?;
        client.rx = None;
        client.replica = None;
        match client.conn.take() {
            Some(conn) => self.hub.with(&doc, |s| s.detach(conn)).map_err(err),
            None => Ok(None),
        }
    }

    fn message_id(&self, thread: &ThreadId, which: &MessageRef) -> Result<MessageId, String> {
        self.read(|s| {
            let t = s.state().comments.get(thread).map_err(|e| e.to_string())?;
            let m = match which {
                MessageRef::Last => t.messages.iter().rev().find(|m| m.suggestion.is_some()),
                MessageRef::Index(i) => t.messages.get(*i),
            };
            m.map(|m| m.message_id.clone()).ok_or_else(|| format!("no such message in {thread}"))
        })?
    }

    fn step(&mut self, actor: &str, action: &Action) -> Result<Value, String> {
        if actor != "system" && !matches!(action, Action::Join) {
            self.user(actor)?;
        }
        let user = || self.user(actor).expect("checked above");
        let thread = |r: &str| ThreadId::new(self.resolve(r));
        let task = |r: &str| TaskId::new(self.resolve(r));
        match action {
            Action::Join => self.join(actor),
            Action::Leave => {
                let result = self.exec(Command::Leave { user: user() });
                self.drop_connection(actor)?;
                result
            }
            Action::Disconnect => match self.drop_connection(actor)? {
                Some(u) => self.exec(Command::Leave { user: u }),
                None => Ok(json!({"still_connected": true})),
            },
            Action::Type { at, text } => self.exec(Command::EditText { user: user(), at: *at, delete: 0, insert: text.clone() }),
            Action::Erase { at, len } => self.exec(Command::EditText { user: user(), at: *at, delete: *len, insert: String::new() }),
            Action::RandomEdits { count } => {
                let doc = self.doc()?.clone();
                let user = user();
                let client = self.clients.get_mut(actor).expect("checked above");
                let (Some(conn), Some(replica)) = (client.conn, client.replica.as_mut()) else {
                    return Err(format!("{actor} is not connected"));
                };
                let mut sent = 0;
                for _ in 0..*count {
                    let Some(op) = local_edit(replica, &mut client.rng) else { continue };
                    self.hub.execute_from(&doc, Command::Edit { user: user.clone(), op }, Some(conn)).map_err(err)?;
                    sent += 1;
                }
                Ok(json!({"sent": sent}))
            }
            Action::Sync => {
                let client = self.clients.get_mut(actor).expect("checked above");
                Ok(json!({"applied": client.sync()?}))
            }
            Action::Goal { text } => self.exec(Command::SetGoal { user: user(), goal: text.clone() }),
            Action::Save => self.exec(Command::Save { user: user() }),
            Action::Comment { start, end, body } => {
                self.exec(Command::CreateThread { user: user(), start: *start, end: *end, body: body.clone() })
            }
            Action::Reply { thread: t, body } => self.exec(Command::Reply { user: user(), thread: thread(t), body: body.clone() }),
            Action::Consume { thread: t, message, action } => {
                let t = thread(t);
                let message = self.message_id(&t, message)?;
                self.exec(Command::Consume { user: user(), thread: t, message, action: *action })
            }
            Action::Approve { thread: t } => self.exec(Command::Approve { user: user(), thread: thread(t) }),
            Action::DeleteComment { thread: t } => self.exec(Command::DeleteAnnotation { user: user(), thread: thread(t) }),
            Action::Preset { preset } => self.exec(Command::InstantiatePreset { user: user(), preset: preset.clone() }),
            Action::Agent { name, role, notes } => {
                let draft = AgentDraft { name: name.clone(), role: role.clone(), notes: notes.clone(), ..AgentDraft::default() };
                self.exec(Command::CreateAgent { user: user(), draft })
            }
            Action::DeleteAgent { agent } => {
                let agent = self.agent(agent)?;
                self.exec(Command::DeleteAgent { user: user(), agent })
            }
            Action::Task { description, assignee, trigger, shortcut } => {
                let assignee = assignee.as_deref().map(|a| self.agent(a)).transpose()?;
                let interaction = Some(if trigger.is_some() { Interaction::Autonomous } else { Interaction::Manual });
                let draft = TaskDraft { description: description.clone(), assignee, interaction, trigger: *trigger, shortcut: *shortcut };
                self.exec(Command::CreateTask { user: user(), draft })
            }
            Action::Run { task: t } => self.exec(Command::RunTask { user: user(), task: task(t) }),
            Action::Shortcut { task: t, start, end } => {
                self.exec(Command::RunShortcut { user: user(), task: task(t), start: *start, end: *end })
            }
            Action::DeleteTask { task: t } => self.exec(Command::DeleteTask { user: user(), task: task(t) }),
            Action::Tick => {
                self.hub.tick_all();
                Ok(Value::Null)
            }
            Action::RunJobs => Ok(json!({"jobs": self.hub.run_jobs(self.doc()?)})),
            Action::Expect(_) => unreachable!("checks are evaluated separately"),
        }
    }

    fn capture(&mut self, action: &Action, label: &str, value: &Value) {
        let id = match action {
            Action::Join => value.get("user_id"),
            Action::Comment { .. } => value.get("thread"),
            Action::Preset { .. } | Action::Agent { .. } => value.get("agent").and_then(|a| a.get("agent_id")),
            Action::Task { .. } => value.get("task").and_then(|t| t.get("task_id")),
            _ => None,
        };
        if let Some(id) = id.and_then(Value::as_str) {
            self.labels.insert(label.to_owned(), id.to_owned());
        }
    }

    fn check(&mut self, check: &Check) -> Result<(), String> {
        let expect_eq = |what: &str, got: String, want: String| {
            if got == want {
                Ok(())
            } else {
                Err(format!("{what}: expected {want}, got {got}"))
            }
        };
        match check {
            Check::Text(want) => expect_eq("text", format!("{:?}", self.read(|s| s.state().doc.text())?), format!("{want:?}")),
            Check::TextContains(needle) => {
                let text = self.read(|s| s.state().doc.text())?;
                if text.contains(needle.as_str()) {
                    Ok(())
                } else {
                    Err(format!("text {text:?} does not contain {needle:?}"))
                }
            }
            Check::PendingText(want) => {
                let got: String = self.read(|s| {
                    let pending = s.state().doc.pending_elements();
                    s.state().doc.body.elements().iter().filter(|e| !e.deleted && pending.contains(&e.id)).map(|e| e.ch).collect()
                })?;
                expect_eq("pending text", format!("{got:?}"), format!("{want:?}"))
            }
            Check::Pending(n) => expect_eq("pending chars", self.read(|s| s.state().doc.pending_elements().len())?.to_string(), n.to_string()),
            Check::Fired { kind, at } => {
                let got: Vec<String> =
                    self.read(|s| s.fired().iter().filter(|f| f.kind == *kind).map(|f| format_time(f.at)).collect())?;
                let want: Vec<String> = at.iter().map(|t| format_time(*t)).collect();
                expect_eq(&format!("{kind} firings"), format!("{got:?}"), format!("{want:?}"))
            }
            Check::FiredCount { kind, count } => {
                let got = self.read(|s| s.fired().iter().filter(|f| f.kind == *kind).count())?;
                expect_eq(&format!("{kind} firings"), got.to_string(), count.to_string())
            }
            Check::Thread { thread, props } => {
                let id = ThreadId::new(self.resolve(thread));
                let t = self.read(|s| s.state().comments.get(&id).cloned())?.map_err(|e| e.to_string())?;
                for (k, v) in props {
                    let got = match k.as_str() {
                        "state" => (if t.resolved { "resolved" } else { "open" }).to_owned(),
                        "messages" => t.messages.len().to_string(),
                        "notices" => t.notices().to_string(),
                        "replies" => t.messages.iter().filter(|m| m.suggestion.is_some()).count().to_string(),
                        _ => unreachable!("validated by the parser"),
                    };
                    expect_eq(&format!("thread {thread} {k}"), got, v.clone())?;
                }
                Ok(())
            }
            Check::Annotations { props } => {
                let states: Vec<AnnotationState> = self.read(|s| s.state().doc.annotations.values().map(|a| a.state).collect())?;
                for (k, v) in props {
                    let state: AnnotationState = serde_json::from_value(json!(k)).expect("validated by the parser");
                    expect_eq(&format!("{k} annotations"), states.iter().filter(|s| **s == state).count().to_string(), v.clone())?;
                }
                Ok(())
            }
            Check::Runs { task, count } => {
                let id = TaskId::new(self.resolve(task));
                expect_eq(&format!("runs of {task}"), self.read(|s| s.state().tasks.runs_of(&id).len())?.to_string(), count.to_string())
            }
            Check::Outcomes { task, outcomes } => {
                let id = TaskId::new(self.resolve(task));
                let got = self.read(|s| {
                    s.state().tasks.runs_of(&id).last().map(|r| r.segments.iter().map(|g| g.outcome).collect::<Vec<_>>())
                })?;
                let got = got.ok_or_else(|| format!("{task} has no runs"))?;
                expect_eq(&format!("outcomes of {task}"), json!(got).to_string(), json!(outcomes).to_string())
            }
            Check::Assignee { task, agent } => {
                let id = TaskId::new(self.resolve(task));
                let want = self.agent(agent)?;
                let got = self.read(|s| s.state().tasks.get(&id).map(|t| t.assignee.clone()))?.map_err(|e| e.to_string())?;
                match got {
                    Assignee::Agent(a) => expect_eq(&format!("assignee of {task}"), a.to_string(), want.to_string()),
                    Assignee::Auto => Err(format!("{task} is still unassigned")),
                }
            }
            Check::Events { thread, labels } => {
                let id = ThreadId::new(self.resolve(thread));
                let got = self.read(|s| thread_events(s.events(), &id))?;
                expect_eq(&format!("events of {thread}"), got.join(" "), labels.join(" "))
            }
            Check::Contributors(n) => expect_eq("contributors", self.read(|s| s.state().doc.contributors_since_trigger.len())?.to_string(), n.to_string()),
            Check::Online(n) => expect_eq("online", self.read(|s| s.presence().len())?.to_string(), n.to_string()),
            Check::Agents(n) => expect_eq("agents", self.read(|s| s.state().agents.len())?.to_string(), n.to_string()),
            Check::Queued(n) => expect_eq("queued jobs", self.read(|s| s.queued())?.to_string(), n.to_string()),
            Check::Converged => {
                let server = self.read(|s| s.state().doc.text())?;
                for (name, client) in &mut self.clients {
                    if client.replica.is_none() {
                        continue;
                    }
                    client.sync()?;
                    let replica = client.replica.as_ref().expect("connected");
                    if replica.pending_len() > 0 {
                        return Err(format!("{name} still buffers {} operations", replica.pending_len()));
                    }
                    if replica.text() != server {
                        return Err(format!("{name} diverged: {:?} vs server {:?}", replica.text(), server));
                    }
                }
                Ok(())
            }
            Check::Error(needle) => match &self.last {
                Some(Err(e)) if e.contains(needle.as_str()) => Ok(()),
                Some(Err(e)) => Err(format!("previous step failed with {e:?}")),
                Some(Ok(_)) => Err("previous step succeeded".into()),
                None => Err("no previous step".into()),
            },
            Check::Ok => match &self.last {
                Some(Ok(_)) => Ok(()),
                Some(Err(e)) => Err(format!("previous step failed: {e}")),
                None => Err("no previous step".into()),
            },
        }
    }

    fn roundtrip(&self) -> Result<RoundTrip, String> {
        let doc = self.doc()?;
        self.hub.flush(doc).map_err(err)?;
        let (state, log): (DocumentState, Vec<LogEntry>) = self.read(|s| (s.state().clone(), s.log().to_vec()))?;
        let options = HubOptions { job_mode: JobMode::Manual, ..self.options.clone() };
        let gateway = Arc::new(Gateway::mock(MockScript::default()));
        let reopened = Hub::open(options, gateway, Arc::new(self.clock.clone())).map_err(err)?;
        let reloaded = reopened.with(doc, |s| s.state().clone()).map_err(err)?;
        let replayed = DocumentSession::replay(&log, self.options.config, Arc::clone(&self.options.catalog)).map_err(err)?;
        Ok(RoundTrip {
            reloaded_equal: reloaded == state,
            replayed_equal: *replayed.state() == state,
            state_hash: content_hash(&state),
            reloaded_hash: content_hash(&reloaded),
            replayed_hash: content_hash(replayed.state()),
        })
    }
}

/// Runs a scenario from a fresh hub. Step failures and failed checks end
/// up in the report; only a broken environment is an error.
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<Report, String> {
    let dir = tempfile::tempdir().map_err(|e| format!("creating a data directory: {e}"))?;
    let mut mock = scenario.mock.clone();
    if let Some(extra) = &options.extra_mock {
        mock.extend(extra);
    }
    mock.push(MockRule::text(TemplateId::Summary, FALLBACK_SUMMARY));
    let seed = options.seed.unwrap_or(scenario.seed);
    let hub_options = HubOptions {
        data_dir: Some(dir.path().to_path_buf()),
        config: scenario.config,
        catalog: Arc::new(PresetCatalog::builtin()),
        seed,
        job_mode: match scenario.jobs {
            Jobs::Auto => JobMode::Inline,
            Jobs::Manual => JobMode::Manual,
        },
    };
    let clock = VirtualClock::new();
    let hub = Hub::open(hub_options.clone(), Arc::new(Gateway::mock(mock)), Arc::new(clock.clone())).map_err(err)?;
    let mut sim = Sim {
        scenario,
        hub,
        clock,
        options: hub_options,
        doc: None,
        code: String::new(),
        clients: BTreeMap::new(),
        labels: BTreeMap::new(),
        last: None,
        seed,
    };
    if scenario.doc.is_some() || !scenario.steps.is_empty() {
        let (doc, code) = sim.hub.create_doc(scenario.doc.clone().flatten()).map_err(err)?;
        sim.doc = Some(doc);
        sim.code = code;
    }

    let mut steps = Vec::new();
    let mut assertions = Vec::new();
    for step in &sim.scenario.steps {
        sim.advance_to(step.at);
        let at = format_time(step.at);
        if let Action::Expect(check) = &step.action {
            let outcome = sim.check(check);
            assertions.push(AssertionRecord {
                line: step.line,
                at,
                check: step.source.clone(),
                pass: outcome.is_ok(),
                detail: outcome.err(),
            });
            continue;
        }
        let outcome = sim.step(&step.actor, &step.action);
        if let (Ok(v), Some(label)) = (&outcome, &step.label) {
            sim.capture(&step.action, label, v);
        }
        steps.push(StepRecord {
            line: step.line,
            at,
            step: step.source.clone(),
            ok: outcome.is_ok(),
            result: outcome.as_ref().ok().filter(|v| !v.is_null()).cloned(),
            error: outcome.as_ref().err().cloned(),
        });
        sim.last = Some(outcome);
    }

    let mut report = Report {
        scenario: scenario.name.clone(),
        passed: assertions.iter().all(|a| a.pass),
        doc_id: sim.doc.clone(),
        steps,
        assertions,
        events: Vec::new(),
        fired: Vec::new(),
        final_text: None,
        state_hash: None,
        roundtrip: None,
        state: None,
        labels: sim.labels.clone(),
    };
    if sim.doc.is_some() {
        let (events, fired, state) = sim.read(|s| (s.events().to_vec(), s.fired().to_vec(), s.state().clone()))?;
        let (text, hash) = (state.doc.text(), content_hash(&state));
        report.state = Some(state);
        report.events = events;
        report.fired = fired;
        report.final_text = Some(text);
        report.state_hash = Some(hash);
        if !options.skip_roundtrip {
            let rt = sim.roundtrip()?;
            report.passed &= rt.ok();
            report.roundtrip = Some(rt);
        }
    }
    Ok(report)
}

/// Loads and runs a scenario file.
pub fn run_file(path: &Path, options: &RunOptions) -> Result<Report, ScenarioError> {
    let scenario = Scenario::load(path)?;
    run(&scenario, options).map_err(|reason| ScenarioError::Io { path: path.display().to_string(), reason })
}
