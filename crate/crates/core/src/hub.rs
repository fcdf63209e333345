//! All open documents of one service instance, their storage and the
//! workers that run model jobs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use serde_json::Value;

use crate::agents::{suggest_section_values, PresetCatalog};
use crate::clock::Clock;
use crate::config::Config;
use crate::gateway::Gateway;
use crate::ids::{owning_doc, AgentId, DocId};
use crate::persistence::{content_hash, sha256_hex, PersistError, Store};
use crate::session::{Checkpoint, Command, DocumentSession, LogEntry, SessionError};
use crate::sync::ConnId;

/// When queued model jobs run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JobMode {
    /// Right after the command that queued them, on the caller's thread.
    #[default]
    Inline,
    /// Only when [`Hub::run_jobs`] or [`Hub::run_one_job`] is called.
    Manual,
    /// On a worker thread, one job at a time per document.
    Background,
}

#[derive(Clone, Debug)]
pub struct HubOptions {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub config: Config,
    pub catalog: Arc<PresetCatalog>,
    /// Seed for join codes.
    pub seed: u64,
    pub job_mode: JobMode,
}

impl Default for HubOptions {
    fn default() -> Self {
        Self {
            data_dir: None,
            config: Config::default(),
            catalog: Arc::new(PresetCatalog::builtin()),
            seed: 0,
            job_mode: JobMode::Inline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DocSummary {
    pub doc_id: DocId,
    pub goal_text: Option<String>,
    pub length: usize,
    pub members: usize,
    pub online: usize,
    pub save_counter: u64,
}

type Shared = Arc<Mutex<DocumentSession>>;

pub struct Hub {
    options: HubOptions,
    store: Option<Store>,
    gateway: Arc<Gateway>,
    clock: Arc<dyn Clock>,
    docs: Mutex<BTreeMap<DocId, Shared>>,
    next_doc: AtomicU64,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("docs", &self.docs.lock().map(|d| d.len()).unwrap_or(0)).finish()
    }
}

fn storage(e: PersistError) -> SessionError {
    SessionError::Storage(e.to_string())
}

fn lock(s: &Shared) -> MutexGuard<'_, DocumentSession> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

impl Hub {
    /// Opens the hub and loads every document found in the data directory.
    pub fn open(options: HubOptions, gateway: Arc<Gateway>, clock: Arc<dyn Clock>) -> Result<Arc<Self>, SessionError> {
        let store = options.data_dir.as_ref().map(Store::open).transpose().map_err(storage)?;
        let mut docs = BTreeMap::new();
        let mut highest = 0;
        if let Some(store) = &store {
            for doc in store.list_docs().map_err(storage)? {
                let session = load_doc(store, &doc, &options)?;
                if let Some(n) = doc.as_str().strip_prefix('d').and_then(|n| n.parse::<u64>().ok()) {
                    highest = highest.max(n);
                }
                docs.insert(doc, Arc::new(Mutex::new(session)));
            }
        }
        let hub = Arc::new(Self {
            options,
            store,
            gateway,
            clock,
            docs: Mutex::new(docs),
            next_doc: AtomicU64::new(highest + 1),
        });
        // restored queues still need running
        if hub.options.job_mode != JobMode::Manual {
            for doc in hub.doc_ids() {
                hub.after_command(&doc);
            }
        }
        Ok(hub)
    }

    pub fn in_memory(gateway: Arc<Gateway>, clock: Arc<dyn Clock>) -> Arc<Self> {
        Self::open(HubOptions::default(), gateway, clock).expect("no storage to fail")
    }

    pub fn config(&self) -> &Config {
        &self.options.config
    }

    pub fn catalog(&self) -> &PresetCatalog {
        &self.options.catalog
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn store(&self) -> Option<&Store> {
        self.store.as_ref()
    }

    pub fn join_code(&self, doc: &DocId) -> String {
        sha256_hex(format!("{}:{doc}", self.options.seed).as_bytes())[..8].to_owned()
    }

    pub fn doc_ids(&self) -> Vec<DocId> {
        self.docs.lock().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect()
    }

    pub fn session(&self, doc: &DocId) -> Result<Shared, SessionError> {
        self.docs
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(doc)
            .cloned()
            .ok_or_else(|| SessionError::UnknownDocument(doc.clone()))
    }

    /// Runs `f` against a document under its lock.
    pub fn with<T>(&self, doc: &DocId, f: impl FnOnce(&mut DocumentSession) -> T) -> Result<T, SessionError> {
        let shared = self.session(doc)?;
        let mut s = lock(&shared);
        Ok(f(&mut s))
    }

    pub fn create_doc(self: &Arc<Self>, goal: Option<String>) -> Result<(DocId, String), SessionError> {
        let doc = DocId::new(format!("d{}", self.next_doc.fetch_add(1, Ordering::SeqCst)));
        let code = self.join_code(&doc);
        let session = DocumentSession::create(
            doc.clone(),
            goal,
            code.clone(),
            self.clock.now(),
            self.options.config,
            Arc::clone(&self.options.catalog),
        );
        let shared = Arc::new(Mutex::new(session));
        {
            let mut s = lock(&shared);
            self.persist(&mut s, true)?;
        }
        self.docs.lock().unwrap_or_else(|p| p.into_inner()).insert(doc.clone(), shared);
        self.after_command(&doc);
        Ok((doc, code))
    }

    pub fn list_docs(&self) -> Vec<DocSummary> {
        self.doc_ids()
            .into_iter()
            .filter_map(|d| {
                self.with(&d, |s| DocSummary {
                    doc_id: d.clone(),
                    goal_text: s.state().doc.goal_text.clone(),
                    length: s.state().doc.body.len(),
                    members: s.state().members.len(),
                    online: s.presence().len(),
                    save_counter: s.state().doc.save_counter,
                })
                .ok()
            })
            .collect()
    }

    /// Checks the join code, then joins.
    pub fn join(self: &Arc<Self>, doc: &DocId, code: &str, name: &str) -> Result<Value, SessionError> {
        let expected = self.with(doc, |s| s.state().join_code.clone())?;
        if code != expected {
            return Err(SessionError::InvalidJoinCode);
        }
        self.execute(doc, Command::Join { name: name.to_owned() })
    }

    pub fn execute(self: &Arc<Self>, doc: &DocId, command: Command) -> Result<Value, SessionError> {
        self.execute_from(doc, command, None)
    }

    /// Executes a command that arrived on connection `origin`.
    pub fn execute_from(
        self: &Arc<Self>,
        doc: &DocId,
        command: Command,
        origin: Option<ConnId>,
    ) -> Result<Value, SessionError> {
        let shared = self.session(doc)?;
        let result = {
            let mut s = lock(&shared);
            let result = s.execute(command, self.clock.now(), origin);
            self.persist(&mut s, false)?;
            result
        };
        self.after_command(doc);
        result
    }

    /// Fires due timers on every document.
    pub fn tick_all(self: &Arc<Self>) {
        for doc in self.doc_ids() {
            if let Err(e) = self.execute(&doc, Command::Tick) {
                tracing::warn!(doc = %doc, error = %e, "tick failed");
            }
        }
    }

    /// Writes a checkpoint now.
    pub fn flush(&self, doc: &DocId) -> Result<(), SessionError> {
        let shared = self.session(doc)?;
        let mut s = lock(&shared);
        self.persist(&mut s, true)
    }

    fn after_command(self: &Arc<Self>, doc: &DocId) {
        match self.options.job_mode {
            JobMode::Inline => {
                self.run_jobs(doc);
            }
            JobMode::Manual => {}
            JobMode::Background => self.spawn_drainer(doc),
        }
    }

    fn spawn_drainer(self: &Arc<Self>, doc: &DocId) {
        let Ok(shared) = self.session(doc) else { return };
        {
            let mut s = lock(&shared);
            if s.draining || s.queued() == 0 {
                return;
            }
            s.draining = true;
        }
        let hub = Arc::clone(self);
        let doc = doc.clone();
        std::thread::spawn(move || {
            loop {
                hub.run_jobs(&doc);
                let mut s = lock(&shared);
                if s.queued() == 0 {
                    s.draining = false;
                    break;
                }
            }
        });
    }

    /// Runs one queued job. Returns false if the queue was empty.
    pub fn run_one_job(&self, doc: &DocId) -> bool {
        let Ok(shared) = self.session(doc) else { return false };
        let Some(job) = lock(&shared).take_job() else { return false };
        tracing::debug!(doc = %doc, job = %job.id, kind = job.spec.kind(), "running job");
        let result = job.execute(&self.gateway);
        let mut s = lock(&shared);
        if let Err(e) = s.complete_job(&job.id, result, self.clock.now()) {
            tracing::error!(doc = %doc, job = %job.id, error = %e, "job result not integrated");
        }
        if let Err(e) = self.persist(&mut s, false) {
            tracing::error!(doc = %doc, error = %e, "persisting job result failed");
        }
        true
    }

    /// Runs queued jobs, including ones queued by their results, until
    /// none are left. Returns how many ran.
    pub fn run_jobs(&self, doc: &DocId) -> usize {
        let mut n = 0;
        while self.run_one_job(doc) {
            n += 1;
        }
        n
    }

    fn persist(&self, s: &mut DocumentSession, force: bool) -> Result<(), SessionError> {
        let outbox = s.take_outbox();
        let Some(store) = &self.store else { return Ok(()) };
        let doc = s.doc_id().clone();
        for entry in &outbox.log {
            store.append_log(&doc, entry).map_err(storage)?;
        }
        for run in &outbox.runs {
            store.append_run(&doc, run).map_err(storage)?;
        }
        let now = self.clock.now();
        if force || s.checkpoint_due(now) {
            let version = store.save_checkpoint(&doc, &s.checkpoint()).map_err(storage)?;
            tracing::debug!(doc = %doc, version, "checkpoint written");
            s.mark_checkpointed(now);
        }
        Ok(())
    }

    /// Up to three new values for one profile section. Runs outside the
    /// document lock and changes nothing.
    pub fn suggest(&self, agent: &AgentId, section: &str, current: &[String]) -> Result<Vec<String>, SessionError> {
        let doc = owning_doc(agent.as_str());
        let profile = self.with(&doc, |s| s.state().agents.get(agent).cloned())??;
        Ok(suggest_section_values(&self.gateway, &profile, section, current)?)
    }

    /// Hash of a document's persistent state.
    pub fn state_hash(&self, doc: &DocId) -> Result<String, SessionError> {
        self.with(doc, |s| content_hash(s.state()))
    }
}

fn load_doc(store: &Store, doc: &DocId, options: &HubOptions) -> Result<DocumentSession, SessionError> {
    let log: Vec<LogEntry> = store.read_log(doc).map_err(storage)?;
    let catalog = Arc::clone(&options.catalog);
    match store.load_latest::<Checkpoint>(doc) {
        Ok((version, checkpoint)) => {
            let position = checkpoint.state.log_position as usize;
            let mut session = DocumentSession::restore(checkpoint, options.config, catalog);
            let tail = log.get(position..).unwrap_or_default();
            tracing::info!(doc = %doc, version, replayed = tail.len(), "document loaded");
            session.apply_log(tail, position)?;
            // replayed entries are already on disk
            session.take_outbox();
            Ok(session)
        }
        Err(PersistError::NotFound(_)) if !log.is_empty() => {
            let mut session = DocumentSession::replay(&log, options.config, catalog)?;
            session.take_outbox();
            Ok(session)
        }
        Err(e) => Err(storage(e)),
    }
}
