//! The per-document owner. Every mutation of a document goes through one
//! [`DocumentSession`], which applies commands, emits session messages,
//! evaluates triggers and queues background jobs.

pub mod jobs;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{derive_handle, AgentDraft, AgentError, AgentRegistry, PresetCatalog};
use crate::clock::Timestamp;
use crate::comments::{
    parse_mentions, CommentError, CommentStore, CommentThread, ConsumeAction, ConversationInput, HistoryLine,
    Message, MessageKind, SuggestionPayload,
};
use crate::config::Config;
use crate::document::anchor::{overlaps, TextAnchor};
use crate::document::sequence::{ElementId, ReplicaId, SeqOp};
use crate::document::{Annotation, AnnotationState, DocumentError, EditOp, ReplicatedDocument, StageMode};
use crate::ids::{AgentId, AnnotationId, DocId, IdAllocator, Identity, MessageId, RunId, TaskId, ThreadId, UserId};
use crate::sync::{ConnId, MessageKind as Kind, PresenceSet, Room, SessionMessage};
use crate::tasks::{
    Assignee, RunInput, SegmentOutcome, SegmentRecord, TaskDraft, TaskError, TaskList, TaskRunLog,
};
use crate::triggers::{Fired, TriggerEngine, TriggerEvent, TriggerKind};

pub use jobs::{JobId, JobResult, JobSpec, PreparedJob};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub user_id: UserId,
    pub name: String,
    pub handle: String,
    pub replica: ReplicaId,
    pub joined_at: Timestamp,
}

/// Everything that persists about a document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentState {
    pub doc: ReplicatedDocument,
    pub join_code: String,
    pub created_at: Timestamp,
    pub agents: AgentRegistry,
    pub comments: CommentStore,
    pub tasks: TaskList,
    pub members: BTreeMap<UserId, Member>,
    pub ids: IdAllocator,
    /// Number of log entries reflected in this state.
    pub log_position: u64,
}

impl DocumentState {
    pub fn new(doc_id: DocId, goal: Option<String>, join_code: String, created_at: Timestamp) -> Self {
        let mut ids = IdAllocator::default();
        let agents = AgentRegistry::new(&doc_id, &mut ids);
        let owner = UserId::new(format!("{doc_id}-owner"));
        Self {
            tasks: TaskList::new(&doc_id, &owner),
            doc: ReplicatedDocument::new(doc_id, goal),
            join_code,
            created_at,
            agents,
            comments: CommentStore::default(),
            members: BTreeMap::new(),
            ids,
            log_position: 0,
        }
    }

    pub fn doc_id(&self) -> &DocId {
        &self.doc.doc_id
    }

    pub fn member_by_handle(&self, handle: &str) -> Option<&Member> {
        self.members.values().find(|m| m.handle.eq_ignore_ascii_case(handle))
    }

    fn speaker(&self, who: &Identity) -> String {
        match who {
            Identity::User(u) => self.members.get(u).map_or_else(|| u.to_string(), |m| format!("@{}", m.handle)),
            Identity::Agent(a) => self.agents.get(a).map_or_else(|_| a.to_string(), |p| p.mention()),
        }
    }
}

/// Client-facing snapshot: the full state plus convenience fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub doc_id: DocId,
    pub text: String,
    pub goal_text: Option<String>,
    pub presence: Vec<UserId>,
    /// Number of session messages emitted so far.
    pub backlog: usize,
    pub state: DocumentState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Join { name: String },
    Leave { user: UserId },
    /// Operation generated on a client replica.
    Edit { user: UserId, op: SeqOp },
    /// Offset-based edit applied on the server replica.
    EditText {
        user: UserId,
        at: usize,
        #[serde(default)]
        delete: usize,
        #[serde(default)]
        insert: String,
    },
    SetGoal { user: UserId, goal: Option<String> },
    Save { user: UserId },
    CreateAgent { user: UserId, draft: AgentDraft },
    UpdateAgent { user: UserId, agent: AgentId, draft: AgentDraft },
    DeleteAgent { user: UserId, agent: AgentId },
    InstantiatePreset { user: UserId, preset: String },
    CreateThread { user: UserId, start: usize, end: usize, body: String },
    Reply { user: UserId, thread: ThreadId, body: String },
    Consume { user: UserId, thread: ThreadId, message: MessageId, action: ConsumeAction },
    Approve { user: UserId, thread: ThreadId },
    DeleteAnnotation { user: UserId, thread: ThreadId },
    CreateTask { user: UserId, draft: TaskDraft },
    UpdateTask { user: UserId, task: TaskId, draft: TaskDraft },
    DeleteTask { user: UserId, task: TaskId },
    RunTask { user: UserId, task: TaskId },
    RunShortcut { user: UserId, task: TaskId, start: usize, end: usize },
    Tick,
}

impl Command {
    pub fn user(&self) -> Option<&UserId> {
        match self {
            Command::Join { .. } | Command::Tick => None,
            Command::Leave { user }
            | Command::Edit { user, .. }
            | Command::EditText { user, .. }
            | Command::SetGoal { user, .. }
            | Command::Save { user }
            | Command::CreateAgent { user, .. }
            | Command::UpdateAgent { user, .. }
            | Command::DeleteAgent { user, .. }
            | Command::InstantiatePreset { user, .. }
            | Command::CreateThread { user, .. }
            | Command::Reply { user, .. }
            | Command::Consume { user, .. }
            | Command::Approve { user, .. }
            | Command::DeleteAnnotation { user, .. }
            | Command::CreateTask { user, .. }
            | Command::UpdateTask { user, .. }
            | Command::DeleteTask { user, .. }
            | Command::RunTask { user, .. }
            | Command::RunShortcut { user, .. } => Some(user),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entry {
    Create { doc: DocId, goal: Option<String>, join_code: String },
    Command { command: Command },
    JobDone { id: JobId, result: JobResult },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub at: Timestamp,
    #[serde(flatten)]
    pub entry: Entry,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("{0} is not a member of this document")]
    NotMember(UserId),
    #[error("invalid user name {0:?}")]
    InvalidName(String),
    #[error("invalid join code")]
    InvalidJoinCode,
    #[error("unknown document {0}")]
    UnknownDocument(DocId),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("range {start}..{end} outside document of length {len}")]
    InvalidRange { start: usize, end: usize, len: usize },
    #[error("task {0} is not a shortcut")]
    NotShortcut(TaskId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("thread {0} has no annotation")]
    OrphanThread(ThreadId),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error(transparent)]
    Comment(#[from] CommentError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("storage: {0}")]
    Storage(String),
    #[error("replay failed at entry {index}: {reason}")]
    Replay { index: usize, reason: String },
}

/// What a checkpoint file holds: the document plus work not yet integrated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub state: DocumentState,
    #[serde(default)]
    pub jobs: Vec<PreparedJob>,
    #[serde(default)]
    pub in_flight: BTreeSet<TaskId>,
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub log: Vec<LogEntry>,
    pub runs: Vec<TaskRunLog>,
}

pub struct DocumentSession {
    state: DocumentState,
    config: Config,
    catalog: Arc<PresetCatalog>,
    presence: PresenceSet,
    room: Room,
    triggers: TriggerEngine,
    queue: VecDeque<PreparedJob>,
    running: BTreeMap<JobId, PreparedJob>,
    in_flight: BTreeSet<TaskId>,
    events: Vec<SessionMessage>,
    fired: Vec<Fired>,
    seqs: BTreeMap<Identity, u64>,
    log: Vec<LogEntry>,
    outbox: Outbox,
    save_requested: bool,
    last_checkpoint: Option<Timestamp>,
    dirty_since: Option<Timestamp>,
    /// Set while some thread drains this document's jobs.
    pub draining: bool,
}

impl std::fmt::Debug for DocumentSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocumentSession")
            .field("doc", self.state.doc_id())
            .field("queued", &self.queue.len())
            .field("events", &self.events.len())
            .finish()
    }
}

fn user_payload(user: &UserId, name: &str) -> Value {
    json!({"user": user, "name": name})
}

impl DocumentSession {
    /// A brand-new document. Queues the default agent's summary.
    pub fn create(
        doc_id: DocId,
        goal: Option<String>,
        join_code: String,
        now: Timestamp,
        config: Config,
        catalog: Arc<PresetCatalog>,
    ) -> Self {
        let state = DocumentState::new(doc_id.clone(), goal.clone(), join_code.clone(), now);
        let mut s = Self::from_state(state, config, catalog);
        s.record(now, Entry::Create { doc: doc_id, goal, join_code });
        let default = s.state.agents.default_agent().agent_id.clone();
        s.queue_summary(&default);
        s.dirty_since = Some(now);
        s
    }

    /// A session around loaded state, with nobody online.
    pub fn from_state(state: DocumentState, config: Config, catalog: Arc<PresetCatalog>) -> Self {
        Self {
            presence: PresenceSet::new(state.doc_id().clone()),
            state,
            triggers: TriggerEngine::new(config.trigger),
            config,
            catalog,
            room: Room::default(),
            queue: VecDeque::new(),
            running: BTreeMap::new(),
            in_flight: BTreeSet::new(),
            events: Vec::new(),
            fired: Vec::new(),
            seqs: BTreeMap::new(),
            log: Vec::new(),
            outbox: Outbox::default(),
            save_requested: false,
            last_checkpoint: None,
            dirty_since: None,
            draining: false,
        }
    }

    /// Rebuilds a session from a recorded log without calling any model:
    /// job results come from the log.
    pub fn replay(entries: &[LogEntry], config: Config, catalog: Arc<PresetCatalog>) -> Result<Self, SessionError> {
        let Some(first) = entries.first() else {
            return Err(SessionError::Replay { index: 0, reason: "empty log".into() });
        };
        let Entry::Create { doc, goal, join_code } = &first.entry else {
            return Err(SessionError::Replay { index: 0, reason: "log must start with create".into() });
        };
        let mut s = Self::create(doc.clone(), goal.clone(), join_code.clone(), first.at, config, catalog);
        s.apply_log(&entries[1..], 1)?;
        Ok(s)
    }

    /// Re-applies log entries recorded after the loaded state.
    pub fn apply_log(&mut self, entries: &[LogEntry], first_index: usize) -> Result<(), SessionError> {
        for (i, e) in entries.iter().enumerate() {
            let fail = |reason: String| SessionError::Replay { index: first_index + i, reason };
            match &e.entry {
                Entry::Create { .. } => return Err(fail("unexpected create".into())),
                // failed commands were logged too; they fail the same way again
                Entry::Command { command } => {
                    let _ = self.execute(command.clone(), e.at, None);
                }
                Entry::JobDone { id, result } => {
                    self.complete_job(id, result.clone(), e.at).map_err(|err| fail(err.to_string()))?
                }
            }
        }
        Ok(())
    }

    /// Restores a checkpoint. Jobs that were running are queued again.
    pub fn restore(checkpoint: Checkpoint, config: Config, catalog: Arc<PresetCatalog>) -> Self {
        let mut s = Self::from_state(checkpoint.state, config, catalog);
        s.queue = checkpoint.jobs.into();
        s.in_flight = checkpoint.in_flight;
        s
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            jobs: self.running.values().chain(self.queue.iter()).cloned().collect(),
            in_flight: self.in_flight.clone(),
        }
    }

    pub fn state(&self) -> &DocumentState {
        &self.state
    }

    pub fn doc_id(&self) -> &DocId {
        self.state.doc_id()
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn presence(&self) -> &PresenceSet {
        &self.presence
    }

    pub fn triggers(&self) -> &TriggerEngine {
        &self.triggers
    }

    pub fn events(&self) -> &[SessionMessage] {
        &self.events
    }

    pub fn fired(&self) -> &[Fired] {
        &self.fired
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn queued_jobs(&self) -> impl Iterator<Item = &PreparedJob> {
        self.queue.iter()
    }

    pub fn pending_jobs(&self) -> usize {
        self.queue.len() + self.running.len()
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.triggers.next_deadline()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            doc_id: self.doc_id().clone(),
            text: self.state.doc.text(),
            goal_text: self.state.doc.goal_text.clone(),
            presence: self.presence.users(),
            backlog: self.events.len(),
            state: self.state.clone(),
        }
    }

    pub fn attach(&mut self, user: &UserId) -> Result<(ConnId, tokio::sync::mpsc::UnboundedReceiver<SessionMessage>), SessionError> {
        self.member(user)?;
        Ok(self.room.attach(user))
    }

    /// Drops a connection. Returns the user if that was their last one.
    pub fn detach(&mut self, conn: ConnId) -> Option<UserId> {
        let user = self.room.detach(conn)?;
        (!self.room.user_connected(&user)).then_some(user)
    }

    /// Sends an error to one connection only.
    pub fn send_error(&mut self, conn: ConnId, user: &UserId, reason: &str) {
        let msg = self.message(Kind::Error, Identity::User(user.clone()), json!({"reason": reason}));
        self.room.send_to(conn, &msg);
    }

    pub fn take_outbox(&mut self) -> Outbox {
        std::mem::take(&mut self.outbox)
    }

    /// True if a checkpoint should be written now: after an explicit save,
    /// or once activity has gone unsaved for the checkpoint interval.
    pub fn checkpoint_due(&self, now: Timestamp) -> bool {
        if self.save_requested {
            return true;
        }
        let interval = Duration::from_secs(self.config.persistence.checkpoint_interval_s);
        match (self.dirty_since, self.last_checkpoint) {
            (None, _) => false,
            (Some(d), None) => now.since(d) >= interval,
            (Some(_), Some(last)) => now.since(last) >= interval,
        }
    }

    pub fn mark_checkpointed(&mut self, now: Timestamp) {
        self.save_requested = false;
        self.dirty_since = None;
        self.last_checkpoint = Some(now);
    }

    fn record(&mut self, at: Timestamp, entry: Entry) {
        let e = LogEntry { at, entry };
        self.log.push(e.clone());
        self.outbox.log.push(e);
        self.state.log_position += 1;
    }

    fn message(&mut self, kind: Kind, sender: Identity, payload: Value) -> SessionMessage {
        let seq = self.seqs.entry(sender.clone()).or_insert(0);
        *seq += 1;
        let seq = *seq;
        SessionMessage { kind, doc: self.state.doc.doc_id.clone(), sender, seq, payload }
    }

    fn emit(&mut self, kind: Kind, sender: Identity, payload: Value, except: Option<ConnId>) {
        let msg = self.message(kind, sender, payload);
        self.room.broadcast(&msg, except);
        self.events.push(msg);
    }

    fn member(&self, user: &UserId) -> Result<&Member, SessionError> {
        self.state.members.get(user).ok_or_else(|| SessionError::NotMember(user.clone()))
    }

    fn check_range(&self, start: usize, end: usize) -> Result<Range<usize>, SessionError> {
        let len = self.state.doc.body.len();
        if start > end || end > len {
            return Err(SessionError::InvalidRange { start, end, len });
        }
        Ok(start..end)
    }

    fn next_id(&mut self, tag: &str) -> String {
        let doc = self.state.doc.doc_id.clone();
        self.state.ids.next(&doc, tag)
    }

    /// Applies a command at `now`. `origin` is the connection it came from,
    /// which does not get its own edits echoed back.
    pub fn execute(&mut self, command: Command, now: Timestamp, origin: Option<ConnId>) -> Result<Value, SessionError> {
        self.record(now, Entry::Command { command: command.clone() });
        if let Some(user) = command.user() {
            if !matches!(command, Command::Tick) {
                self.member(user)?;
            }
        }
        let fired = self.triggers.advance(now);
        self.handle_fired(fired);
        let result = self.apply(command, now, origin);
        if result.is_ok() && !matches!(result, Ok(Value::Null)) {
            self.dirty_since.get_or_insert(now);
        }
        result
    }

    fn trigger(&mut self, now: Timestamp, event: TriggerEvent) {
        let fired = self.triggers.on_event(now, event, &mut self.state.doc.contributors_since_trigger);
        self.handle_fired(fired);
    }

    fn handle_fired(&mut self, fired: Vec<Fired>) {
        for f in fired {
            self.fired.push(f);
            let tasks = self.state.tasks.autonomous(f.kind);
            self.emit(
                Kind::TaskEvent,
                Identity::User(UserId::new(format!("{}-owner", self.doc_id()))),
                json!({"type": "trigger_fired", "trigger": f.kind, "at": f.at, "tasks": tasks}),
                None,
            );
            for task in tasks {
                if let Err(e) = self.enqueue_run(&task, Some(f.kind), f.at, None) {
                    tracing::warn!(task = %task, error = %e, "autonomous run not started");
                }
            }
        }
    }

    fn apply(&mut self, command: Command, now: Timestamp, origin: Option<ConnId>) -> Result<Value, SessionError> {
        match command {
            Command::Join { name } => self.join(&name, now),
            Command::Leave { user } => {
                if self.presence.remove(&user) {
                    let name = self.member(&user)?.name.clone();
                    self.emit(Kind::Leave, Identity::User(user.clone()), user_payload(&user, &name), None);
                    self.emit_presence(&user);
                    let online_after = self.presence.len();
                    self.trigger(now, TriggerEvent::Leave { online_after });
                }
                Ok(json!({"online": self.presence.users()}))
            }
            Command::Edit { user, op } => {
                let replica = self.member(&user)?.replica;
                let got = op.id().replica;
                if got != replica {
                    return Err(SessionError::Protocol(format!("op from replica {} but {user} owns {}", got.0, replica.0)));
                }
                let applied = self
                    .state
                    .doc
                    .apply_edit(EditOp { author: user.clone(), op: op.clone() })
                    .map_err(|e| SessionError::Protocol(e.to_string()))?;
                if !applied.duplicate {
                    self.emit(Kind::EditUpdate, Identity::User(user.clone()), json!({"op": op}), origin);
                    self.presence.touch(&user, now);
                    self.trigger(now, TriggerEvent::Edit);
                }
                Ok(json!({"integrated": applied.integrated, "duplicate": applied.duplicate}))
            }
            Command::EditText { user, at, delete, insert } => {
                self.check_range(at, at + delete)?;
                let mut ops = Vec::new();
                if delete > 0 {
                    ops.extend(self.state.doc.delete_text(&user, at, delete)?);
                }
                if !insert.is_empty() {
                    ops.push(self.state.doc.insert_text(&user, at, &insert)?);
                }
                for op in &ops {
                    self.emit(Kind::EditUpdate, Identity::User(user.clone()), json!({"op": op}), None);
                }
                if !ops.is_empty() {
                    self.presence.touch(&user, now);
                    self.trigger(now, TriggerEvent::Edit);
                }
                Ok(json!({"text": self.state.doc.text()}))
            }
            Command::SetGoal { user, goal } => {
                self.state.doc.goal_text = goal.clone();
                self.emit(Kind::EditUpdate, Identity::User(user), json!({"goal_text": goal}), None);
                Ok(json!({"goal_text": goal}))
            }
            Command::Save { user } => {
                self.state.doc.save_counter += 1;
                self.save_requested = true;
                let counter = self.state.doc.save_counter;
                self.emit(Kind::Save, Identity::User(user), json!({"save_counter": counter}), None);
                self.trigger(now, TriggerEvent::Save);
                Ok(json!({"save_counter": counter}))
            }
            Command::CreateAgent { user, draft } => {
                let doc = self.doc_id().clone();
                let id = self.state.agents.create(&mut self.state.ids, &doc, &user, draft)?;
                self.agent_saved(&user, &id, "agent_created")
            }
            Command::InstantiatePreset { user, preset } => {
                let doc = self.doc_id().clone();
                let catalog = Arc::clone(&self.catalog);
                let id = self.state.agents.instantiate_preset(&mut self.state.ids, &doc, &user, &catalog, &preset)?;
                self.agent_saved(&user, &id, "agent_created")
            }
            Command::UpdateAgent { user, agent, draft } => {
                self.state.agents.update(&agent, &user, draft)?;
                self.agent_saved(&user, &agent, "agent_updated")
            }
            Command::DeleteAgent { user, agent } => {
                let removed = self.state.agents.delete(&agent)?;
                let fallback = self.state.agents.default_agent().agent_id.clone();
                let reassigned = self.state.tasks.reassign(&agent, &fallback);
                if !reassigned.is_empty() {
                    tracing::info!(agent = %agent, tasks = ?reassigned, "tasks of deleted agent moved to the default agent");
                }
                let payload = json!({"type": "agent_deleted", "agent_id": removed.agent_id, "reassigned": reassigned});
                self.emit(Kind::TaskEvent, Identity::User(user), payload.clone(), None);
                Ok(payload)
            }
            Command::CreateThread { user, start, end, body } => {
                let range = self.check_range(start, end)?;
                let anchor = self.state.doc.anchor_range(range.clone())?;
                let annotation_id = AnnotationId::new(self.next_id("an"));
                let thread_id = ThreadId::new(self.next_id("th"));
                self.state.doc.add_annotation(Annotation {
                    annotation_id: annotation_id.clone(),
                    anchor,
                    state: AnnotationState::Open,
                    thread_id: thread_id.clone(),
                    pending_regions: Vec::new(),
                    created_by: Identity::User(user.clone()),
                    run_id: None,
                    source_confidence: None,
                })?;
                self.state.comments.insert(CommentThread {
                    thread_id: thread_id.clone(),
                    annotation_id: annotation_id.clone(),
                    messages: Vec::new(),
                    resolved: false,
                });
                self.emit_thread_created(Identity::User(user.clone()), &thread_id);
                let message = self.post_message(&user, &thread_id, &body, now)?;
                Ok(json!({"thread": thread_id, "annotation": annotation_id, "message": message}))
            }
            Command::Reply { user, thread, body } => {
                let message = self.post_message(&user, &thread, &body, now)?;
                Ok(json!({"thread": thread, "message": message}))
            }
            Command::Consume { user, thread, message, action } => self.consume(&user, &thread, &message, action, now),
            Command::Approve { user, thread } => {
                let annotation = self.annotation_of(&thread)?;
                let changed = self.state.doc.approve_annotation(&annotation)?;
                self.state.comments.get_mut(&thread)?.resolved = true;
                if changed {
                    self.emit(
                        Kind::CommentEvent,
                        Identity::User(user),
                        json!({"type": "approved", "thread": thread, "annotation": annotation}),
                        None,
                    );
                }
                Ok(json!({"thread": thread, "approved": true, "changed": changed}))
            }
            Command::DeleteAnnotation { user, thread } => {
                let annotation = self.annotation_of(&thread)?;
                let ops = self.state.doc.delete_annotation(&annotation)?;
                self.state.comments.get_mut(&thread)?.resolved = true;
                for op in &ops {
                    self.emit(Kind::EditUpdate, Identity::User(user.clone()), json!({"op": op}), None);
                }
                self.emit(
                    Kind::CommentEvent,
                    Identity::User(user),
                    json!({"type": "annotation_deleted", "thread": thread, "annotation": annotation}),
                    None,
                );
                Ok(json!({"thread": thread, "deleted": true}))
            }
            Command::CreateTask { user, draft } => {
                if let Some(a) = &draft.assignee {
                    self.state.agents.get(a)?;
                }
                let id = TaskId::new(self.next_id("t"));
                self.state.tasks.create(id.clone(), &user, draft)?;
                self.queue_task_setup(&id);
                self.emit_task(&user, &id, "task_created")
            }
            Command::UpdateTask { user, task, draft } => {
                if let Some(a) = &draft.assignee {
                    self.state.agents.get(a)?;
                }
                let changed = self.state.tasks.update(&task, draft)?;
                if changed || self.state.tasks.get(&task)?.assignee == Assignee::Auto {
                    self.queue_task_setup(&task);
                }
                self.emit_task(&user, &task, "task_updated")
            }
            Command::DeleteTask { user, task } => {
                self.state.tasks.delete(&task)?;
                let payload = json!({"type": "task_deleted", "task_id": task});
                self.emit(Kind::TaskEvent, Identity::User(user), payload.clone(), None);
                Ok(payload)
            }
            Command::RunTask { user: _, task } => {
                self.state.tasks.get(&task)?;
                self.enqueue_run(&task, None, now, None)
            }
            Command::RunShortcut { user: _, task, start, end } => {
                if !self.state.tasks.get(&task)?.shortcut {
                    return Err(SessionError::NotShortcut(task));
                }
                let range = self.check_range(start, end)?;
                self.enqueue_run(&task, None, now, Some(range))
            }
            Command::Tick => Ok(Value::Null),
        }
    }

    fn join(&mut self, name: &str, now: Timestamp) -> Result<Value, SessionError> {
        let name = name.trim();
        let handle = derive_handle(name);
        if handle.is_empty() {
            return Err(SessionError::InvalidName(name.to_owned()));
        }
        let user = match self.state.member_by_handle(&handle) {
            Some(m) => m.user_id.clone(),
            None => {
                let user_id = UserId::new(self.next_id("u"));
                let replica = self.state.doc.allocate_replica();
                self.state.members.insert(
                    user_id.clone(),
                    Member { user_id: user_id.clone(), name: name.to_owned(), handle, replica, joined_at: now },
                );
                user_id
            }
        };
        let online_before = self.presence.len();
        if self.presence.add(&user, now) {
            let name = self.member(&user)?.name.clone();
            self.emit(Kind::Join, Identity::User(user.clone()), user_payload(&user, &name), None);
            self.emit_presence(&user);
            self.trigger(now, TriggerEvent::Join { online_before });
        }
        let member = self.member(&user)?;
        Ok(json!({
            "doc_id": self.doc_id(),
            "user_id": user,
            "replica": member.replica,
            "presence": self.presence.users(),
            "backlog": self.events.len(),
        }))
    }

    fn emit_presence(&mut self, user: &UserId) {
        let online = self.presence.users();
        self.emit(Kind::Presence, Identity::User(user.clone()), json!({"online": online}), None);
    }

    fn agent_saved(&mut self, user: &UserId, agent: &AgentId, kind: &str) -> Result<Value, SessionError> {
        self.queue_summary(agent);
        let profile = self.state.agents.get(agent)?.clone();
        let payload = json!({"type": kind, "agent": profile});
        self.emit(Kind::TaskEvent, Identity::User(user.clone()), payload.clone(), None);
        Ok(payload)
    }

    fn emit_task(&mut self, user: &UserId, task: &TaskId, kind: &str) -> Result<Value, SessionError> {
        let spec = self.state.tasks.get(task)?.clone();
        let payload = json!({"type": kind, "task": spec});
        self.emit(Kind::TaskEvent, Identity::User(user.clone()), payload.clone(), None);
        Ok(payload)
    }

    fn emit_thread_created(&mut self, sender: Identity, thread: &ThreadId) {
        let Ok(t) = self.state.comments.get(thread) else { return };
        let annotation = self.state.doc.annotation(&t.annotation_id).ok().cloned();
        let range = annotation.as_ref().and_then(|a| self.state.doc.resolve_anchor(&a.anchor).ok());
        self.emit(
            Kind::CommentEvent,
            sender,
            json!({"type": "thread_created", "thread": thread, "annotation": annotation, "range": range}),
            None,
        );
    }

    fn emit_message(&mut self, thread: &ThreadId, message: &Message) {
        let mut payload = json!({"type": "message", "thread": thread, "message": message});
        if let Some(s) = &message.suggestion {
            payload["suggestion"] = json!(s);
        }
        self.emit(Kind::CommentEvent, message.author.clone(), payload, None);
    }

    fn annotation_of(&self, thread: &ThreadId) -> Result<AnnotationId, SessionError> {
        let t = self.state.comments.get(thread)?;
        self.state.doc.annotation(&t.annotation_id).map_err(|_| SessionError::OrphanThread(thread.clone()))?;
        Ok(t.annotation_id.clone())
    }

    fn post_message(&mut self, user: &UserId, thread: &ThreadId, body: &str, now: Timestamp) -> Result<Message, SessionError> {
        let t = self.state.comments.get(thread)?;
        if t.resolved {
            return Err(CommentError::ThreadResolved.into());
        }
        let mut mentions = Vec::new();
        let mut agents = Vec::new();
        for handle in parse_mentions(body) {
            if let Some(a) = self.state.agents.by_handle(&handle) {
                mentions.push(a.handle.clone());
                agents.push(a.clone());
            } else if let Some(m) = self.state.member_by_handle(&handle) {
                mentions.push(m.handle.clone());
            }
        }
        let history: Vec<HistoryLine> = t
            .messages
            .iter()
            .map(|m| HistoryLine { speaker: self.state.speaker(&m.author), body: m.body.clone() })
            .collect();
        let message = Message {
            message_id: MessageId::new(self.next_id("m")),
            author: Identity::User(user.clone()),
            body: body.to_owned(),
            mentions,
            suggestion: None,
            timestamp: now,
            kind: MessageKind::Chat,
        };
        self.state.comments.push(thread, message.clone())?;
        self.emit_message(thread, &message);
        self.presence.touch(user, now);
        self.trigger(now, TriggerEvent::Comment);
        if !agents.is_empty() {
            let annotation = self.annotation_of(thread)?;
            let anchor = self.state.doc.annotation(&annotation)?.anchor;
            let input = ConversationInput {
                agents: agents.clone(),
                roster: self.state.agents.iter().cloned().collect(),
                document_text: self.state.doc.text(),
                goal_text: self.state.doc.goal_text.clone(),
                selected_text: self.state.doc.anchor_text(&anchor)?,
                history,
                request: body.to_owned(),
                max_turns: self.config.comments.max_agent_turns,
                agent_mentions_join: self.config.comments.agent_mentions_join,
            };
            for a in &agents {
                self.emit(
                    Kind::AgentTyping,
                    Identity::Agent(a.agent_id.clone()),
                    json!({"agent": a.handle, "thread": thread, "typing": true}),
                    None,
                );
            }
            let spec = JobSpec::AgentReply {
                thread: thread.clone(),
                message: message.message_id.clone(),
                typing: agents.iter().map(|a| a.agent_id.clone()).collect(),
                input,
            };
            self.enqueue(spec);
        }
        Ok(message)
    }

    fn consume(
        &mut self,
        user: &UserId,
        thread: &ThreadId,
        message: &MessageId,
        action: ConsumeAction,
        now: Timestamp,
    ) -> Result<Value, SessionError> {
        let payload = self.state.comments.suggestion(thread, message)?;
        if let Some(done) = payload.consumed_by {
            return Err(CommentError::AlreadyConsumed { action: done, by: payload.consumed_by_user.clone() }.into());
        }
        let text = payload.proposed_text.clone();
        let mut pending = None;
        if action != ConsumeAction::Copy {
            let annotation = self.annotation_of(thread)?;
            let mode = if action == ConsumeAction::Append { StageMode::Append } else { StageMode::Replace };
            let staged = self.state.doc.stage_suggestion(&annotation, &text, mode, user)?;
            for op in &staged.ops {
                self.emit(Kind::EditUpdate, Identity::User(user.clone()), json!({"op": op}), None);
            }
            pending = staged.pending.and_then(|p| self.state.doc.resolve_anchor(&p).ok());
        }
        self.state.comments.consume(thread, message, action, user)?;
        self.emit(
            Kind::CommentEvent,
            Identity::User(user.clone()),
            json!({"type": "consumed", "thread": thread, "message": message, "action": action, "user": user, "pending": pending}),
            None,
        );
        if action != ConsumeAction::Copy {
            self.presence.touch(user, now);
            self.trigger(now, TriggerEvent::Edit);
        }
        Ok(json!({"proposed_text": text, "action": action, "pending": pending}))
    }

    /// Current anchored text next to the full suggestion.
    pub fn preview(&self, thread: &ThreadId, message: &MessageId) -> Result<Value, SessionError> {
        let suggestion = self.state.comments.suggestion(thread, message)?;
        let annotation = self.annotation_of(thread)?;
        let anchor = self.state.doc.annotation(&annotation)?.anchor;
        let original = self.state.doc.anchor_text(&anchor)?;
        Ok(json!({"original": original, "proposed": suggestion.proposed_text}))
    }

    fn enqueue(&mut self, spec: JobSpec) -> JobId {
        let id = self.next_id("j");
        self.queue.push_back(PreparedJob { id: id.clone(), spec });
        id
    }

    fn queue_summary(&mut self, agent: &AgentId) {
        if let Ok(profile) = self.state.agents.get(agent) {
            let spec = JobSpec::Summary { agent: agent.clone(), version: profile.version, profile: profile.clone() };
            self.enqueue(spec);
        }
    }

    fn queue_task_setup(&mut self, task: &TaskId) {
        let Ok(spec) = self.state.tasks.get(task) else { return };
        let job = JobSpec::TaskSetup {
            task: task.clone(),
            version: spec.version,
            description: spec.description.clone(),
            assign: spec.assignee == Assignee::Auto,
            agents: self.state.agents.iter().cloned().collect(),
            default_agent: self.state.agents.default_agent().agent_id.clone(),
        };
        self.enqueue(job);
    }

    /// Queues a pipeline run unless one is already pending for the task.
    fn enqueue_run(
        &mut self,
        task: &TaskId,
        trigger: Option<TriggerKind>,
        now: Timestamp,
        selection: Option<Range<usize>>,
    ) -> Result<Value, SessionError> {
        let spec = self.state.tasks.get(task)?.clone();
        if self.in_flight.contains(task) {
            tracing::info!(task = %task, "run already pending, coalesced");
            let payload = json!({"type": "run_coalesced", "task_id": task, "trigger": trigger});
            self.emit(Kind::TaskEvent, Identity::User(UserId::new(format!("{}-owner", self.doc_id()))), payload.clone(), None);
            return Ok(payload);
        }
        let default = self.state.agents.default_agent().clone();
        let agent = match &spec.assignee {
            Assignee::Agent(id) => Some(self.state.agents.get(id).cloned().unwrap_or(default.clone())),
            Assignee::Auto => None,
        };
        let existing = self
            .state
            .doc
            .live_annotation_ranges()
            .into_iter()
            .map(|(id, _, range)| (id, range))
            .collect();
        let run_id = RunId::new(self.next_id("r"));
        let input = RunInput {
            task: spec,
            agent,
            agents: self.state.agents.iter().cloned().collect(),
            default_agent: default.agent_id.clone(),
            document_text: self.state.doc.text(),
            goal_text: self.state.doc.goal_text.clone(),
            existing,
            selection,
            max_turns: self.config.comments.max_agent_turns,
        };
        self.in_flight.insert(task.clone());
        let job = self.enqueue(JobSpec::TaskRun {
            task: task.clone(),
            run_id: run_id.clone(),
            trigger,
            started_at: now,
            visible_ids: self.state.doc.body.visible_ids(),
            input: Box::new(input),
        });
        let payload = json!({"type": "run_queued", "task_id": task, "run_id": run_id, "job": job, "trigger": trigger});
        self.emit(Kind::TaskEvent, Identity::User(UserId::new(format!("{}-owner", self.doc_id()))), payload.clone(), None);
        Ok(payload)
    }

    /// Hands the oldest queued job to a worker.
    pub fn take_job(&mut self) -> Option<PreparedJob> {
        let job = self.queue.pop_front()?;
        self.running.insert(job.id.clone(), job.clone());
        Some(job)
    }

    /// Integrates a finished job. Timers due before `now` fire first.
    pub fn complete_job(&mut self, id: &JobId, result: JobResult, now: Timestamp) -> Result<(), SessionError> {
        let job = match self.running.remove(id) {
            Some(j) => j,
            None => {
                let pos = self.queue.iter().position(|j| &j.id == id).ok_or_else(|| SessionError::UnknownJob(id.clone()))?;
                self.queue.remove(pos).expect("position is valid")
            }
        };
        self.record(now, Entry::JobDone { id: id.clone(), result: result.clone() });
        let fired = self.triggers.advance(now);
        self.handle_fired(fired);
        self.dirty_since.get_or_insert(now);
        match (job.spec, result) {
            (JobSpec::AgentReply { thread, typing, .. }, JobResult::AgentReply(outcome)) => {
                self.integrate_reply(&thread, &typing, outcome, now)
            }
            (JobSpec::TaskRun { task, run_id, trigger, started_at, visible_ids, input }, JobResult::TaskRun(output)) => {
                self.integrate_run(&task, run_id, trigger, started_at, &visible_ids, &input, *output, now);
            }
            (JobSpec::Summary { agent, version, .. }, JobResult::Summary(summary)) => {
                if let Err(e) = &summary {
                    tracing::warn!(agent = %agent, error = %e, "summary generation failed, keeping previous");
                }
                if self.state.agents.apply_summary(&agent, version, summary) {
                    let profile = self.state.agents.get(&agent)?.clone();
                    self.emit(
                        Kind::TaskEvent,
                        Identity::Agent(agent),
                        json!({"type": "agent_updated", "agent": profile}),
                        None,
                    );
                }
            }
            (JobSpec::TaskSetup { task, version, .. }, JobResult::TaskSetup { title, decision }) => {
                let mut changed = self.state.tasks.set_title(&task, version, &title);
                if let Some(d) = decision {
                    changed |= self.state.tasks.set_decision(&task, version, d);
                }
                if changed {
                    let spec = self.state.tasks.get(&task)?.clone();
                    self.emit(
                        Kind::TaskEvent,
                        Identity::User(spec.creator.clone()),
                        json!({"type": "task_updated", "task": spec}),
                        None,
                    );
                }
            }
            (spec, result) => {
                return Err(SessionError::Replay {
                    index: self.log.len(),
                    reason: format!("result {result:?} does not fit a {} job", spec.kind()),
                })
            }
        }
        Ok(())
    }

    fn integrate_reply(
        &mut self,
        thread: &ThreadId,
        typing: &[AgentId],
        outcome: crate::comments::ConversationOutcome,
        now: Timestamp,
    ) {
        let open = self.state.comments.get(thread).is_ok_and(|t| !t.resolved);
        if !open {
            tracing::info!(thread = %thread, "thread resolved before the agent replied; reply discarded");
            for agent in typing {
                self.emit(
                    Kind::Error,
                    Identity::Agent(agent.clone()),
                    json!({"thread": thread, "agent": agent, "reason": "thread resolved; reply discarded"}),
                    None,
                );
            }
            return;
        }
        for turn in outcome.turns {
            if !typing.contains(&turn.agent_id) {
                self.emit(
                    Kind::AgentTyping,
                    Identity::Agent(turn.agent_id.clone()),
                    json!({"agent": turn.handle, "thread": thread, "typing": true}),
                    None,
                );
            }
            let mentions = parse_mentions(&turn.text)
                .into_iter()
                .filter_map(|h| {
                    self.state
                        .agents
                        .by_handle(&h)
                        .map(|a| a.handle.clone())
                        .or_else(|| self.state.member_by_handle(&h).map(|m| m.handle.clone()))
                })
                .collect();
            let message = Message {
                message_id: MessageId::new(self.next_id("m")),
                author: Identity::Agent(turn.agent_id.clone()),
                body: turn.text.clone(),
                mentions,
                suggestion: Some(SuggestionPayload {
                    proposed_text: turn.text,
                    source_agent: turn.handle,
                    consumed_by: None,
                    consumed_by_user: None,
                }),
                timestamp: now,
                kind: MessageKind::Chat,
            };
            if self.state.comments.push(thread, message.clone()).is_ok() {
                self.emit_message(thread, &message);
            }
        }
        for (agent, reason) in outcome.failures {
            tracing::warn!(agent = %agent, reason = %reason, "agent reply failed");
            let notice = Message {
                message_id: MessageId::new(self.next_id("m")),
                author: Identity::Agent(agent.clone()),
                body: "agent unavailable".into(),
                mentions: vec![],
                suggestion: None,
                timestamp: now,
                kind: MessageKind::Notice,
            };
            let _ = self.state.comments.push(thread, notice.clone());
            self.emit(
                Kind::Error,
                Identity::Agent(agent.clone()),
                json!({"thread": thread, "agent": agent, "reason": reason, "message": notice}),
                None,
            );
        }
        for agent in outcome.skipped {
            self.emit(
                Kind::Error,
                Identity::Agent(agent.clone()),
                json!({"thread": thread, "agent": agent, "reason": "turn limit reached"}),
                None,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_run(
        &mut self,
        task: &TaskId,
        run_id: RunId,
        trigger: Option<TriggerKind>,
        started_at: Timestamp,
        visible_ids: &[ElementId],
        input: &RunInput,
        output: crate::tasks::RunOutput,
        now: Timestamp,
    ) {
        self.in_flight.remove(task);
        if let Some(d) = output.decision.clone() {
            if !input.task.builtin {
                self.state.tasks.set_decision(task, input.task.version, d);
            }
        }
        let agent = Identity::Agent(output.agent_id.clone());
        let handle = self.state.agents.get(&output.agent_id).map(|a| a.handle.clone()).unwrap_or_default();
        let mut segments = Vec::new();
        for planned in output.planned {
            let p = planned.segment.proposal;
            let mut record = SegmentRecord {
                selected_text: p.selected_text,
                selected_text_sentence: p.selected_text_sentence,
                reason: p.reason,
                confidence_rate: p.confidence_rate,
                outcome: planned.segment.outcome,
                annotation_id: None,
                detail: None,
            };
            match planned.segment.outcome {
                SegmentOutcome::FilteredOverlap => {
                    for existing in &planned.segment.overlapped {
                        self.note_attempt(existing, &agent, &input.task.title, &record.reason, now);
                    }
                }
                SegmentOutcome::Accepted => {
                    let range = planned.segment.range.clone().expect("accepted segments are located");
                    match planned.reply {
                        Some(Ok(text)) => {
                            self.place_segment(&mut record, &range, visible_ids, &agent, &handle, &run_id, text, now)
                        }
                        Some(Err(e)) => {
                            record.outcome = SegmentOutcome::IntegrationFailed;
                            record.detail = Some(format!("response failed: {e}"));
                        }
                        None => {
                            record.outcome = SegmentOutcome::IntegrationFailed;
                            record.detail = Some("no response".into());
                        }
                    }
                }
                SegmentOutcome::FilteredConfidence => {}
                SegmentOutcome::IntegrationFailed => {
                    record.detail = Some("selected text not found in document".into());
                    tracing::warn!(task = %task, text = %record.selected_text, "segment not locatable");
                }
            }
            segments.push(record);
        }
        let log = TaskRunLog {
            run_id: run_id.clone(),
            task_id: task.clone(),
            agent_id: output.agent_id.clone(),
            started_at,
            finished_at: now,
            trigger,
            segments,
            error: output.error,
        };
        self.state.tasks.record_run(log.clone());
        let _ = self.state.agents.record_run(&output.agent_id, run_id, started_at);
        self.outbox.runs.push(log.clone());
        self.emit(Kind::TaskEvent, agent, json!({"type": "run_completed", "run": log}), None);
    }

    fn note_attempt(&mut self, annotation: &AnnotationId, agent: &Identity, title: &str, reason: &str, now: Timestamp) {
        let Ok(a) = self.state.doc.annotation(annotation) else { return };
        let thread = a.thread_id.clone();
        if !self.state.comments.get(&thread).is_ok_and(|t| !t.resolved) {
            return;
        }
        let note = Message {
            message_id: MessageId::new(self.next_id("m")),
            author: agent.clone(),
            body: format!("Attempted to run task \"{title}\" on this text: {reason}"),
            mentions: vec![],
            suggestion: None,
            timestamp: now,
            kind: MessageKind::Notice,
        };
        if self.state.comments.push(&thread, note.clone()).is_ok() {
            self.emit_message(&thread, &note);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn place_segment(
        &mut self,
        record: &mut SegmentRecord,
        range: &Range<usize>,
        visible_ids: &[ElementId],
        agent: &Identity,
        handle: &str,
        run_id: &RunId,
        text: String,
        now: Timestamp,
    ) {
        let anchor = if range.is_empty() {
            let left = if range.start == 0 { ElementId::HEAD } else { visible_ids[range.start - 1] };
            TextAnchor::collapsed(left)
        } else {
            TextAnchor::span(visible_ids[range.start], visible_ids[range.end - 1])
        };
        let Ok(current) = self.state.doc.resolve_anchor(&anchor) else {
            record.outcome = SegmentOutcome::IntegrationFailed;
            record.detail = Some("anchor no longer resolves".into());
            return;
        };
        if !range.is_empty() && current.is_empty() {
            record.outcome = SegmentOutcome::IntegrationFailed;
            record.detail = Some("selected text was deleted during the run".into());
            return;
        }
        let collisions: Vec<AnnotationId> = self
            .state
            .doc
            .live_annotation_ranges()
            .into_iter()
            .filter(|(_, _, r)| overlaps(r, &current))
            .map(|(id, _, _)| id)
            .collect();
        if !collisions.is_empty() {
            record.outcome = SegmentOutcome::FilteredOverlap;
            record.detail = Some("overlaps an annotation created during the run".into());
            return;
        }
        let annotation_id = AnnotationId::new(self.next_id("an"));
        let thread_id = ThreadId::new(self.next_id("th"));
        let added = self.state.doc.add_annotation(Annotation {
            annotation_id: annotation_id.clone(),
            anchor,
            state: AnnotationState::Open,
            thread_id: thread_id.clone(),
            pending_regions: Vec::new(),
            created_by: agent.clone(),
            run_id: Some(run_id.clone()),
            source_confidence: Some(record.confidence_rate),
        });
        if let Err(e) = added {
            record.outcome = SegmentOutcome::IntegrationFailed;
            record.detail = Some(e.to_string());
            return;
        }
        let message = Message {
            message_id: MessageId::new(self.next_id("m")),
            author: agent.clone(),
            body: text.clone(),
            mentions: vec![],
            suggestion: Some(SuggestionPayload {
                proposed_text: text,
                source_agent: handle.to_owned(),
                consumed_by: None,
                consumed_by_user: None,
            }),
            timestamp: now,
            kind: MessageKind::Chat,
        };
        self.state.comments.insert(CommentThread {
            thread_id: thread_id.clone(),
            annotation_id: annotation_id.clone(),
            messages: vec![message.clone()],
            resolved: false,
        });
        self.emit_thread_created(agent.clone(), &thread_id);
        self.emit_message(&thread_id, &message);
        record.annotation_id = Some(annotation_id);
    }
}
