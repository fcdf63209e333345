//! Admin commands, against a running server or a data directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use cowrite::agents::PresetCatalog;
use cowrite::clock::SystemClock;
use cowrite::config::Config;
use cowrite::gateway::{Gateway, MockScript};
use cowrite::hub::{Hub, HubOptions, JobMode};
use cowrite::ids::DocId;
use cowrite::persistence::content_hash;
use cowrite::session::{DocumentSession, DocumentState, LogEntry, Snapshot};
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Clone, Debug)]
pub enum Target {
    Server { url: String, token: Option<String> },
    InProcess { data_dir: PathBuf, mock_script: Option<PathBuf>, seed: u64, config: Config },
}

#[derive(Debug, Error)]
pub enum AdminError {
    #[error("cannot reach server: {0}")]
    Connect(String),
    #[error("not authorized: {0}")]
    Auth(String),
    #[error("server answered {status}: {body}")]
    Api { status: u16, body: String },
    #[error("{0}")]
    Local(String),
}

impl AdminError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AdminError::Connect(_) => 3,
            AdminError::Auth(_) => 4,
            AdminError::Api { .. } | AdminError::Local(_) => 1,
        }
    }
}

fn local(e: impl ToString) -> AdminError {
    AdminError::Local(e.to_string())
}

fn send(request: RequestBuilder) -> Result<Value, AdminError> {
    let response = request.send().map_err(|e| AdminError::Connect(e.to_string()))?;
    let status = response.status();
    let body = response.text().map_err(|e| AdminError::Connect(e.to_string()))?;
    match status {
        s if s.is_success() => serde_json::from_str(&body).map_err(local),
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(AdminError::Auth(body)),
        s => Err(AdminError::Api { status: s.as_u16(), body }),
    }
}

fn client() -> Result<Client, AdminError> {
    Client::builder().timeout(Duration::from_secs(30)).build().map_err(local)
}

fn open_hub(data_dir: &Path, mock_script: Option<&Path>, seed: u64, config: Config) -> Result<Arc<Hub>, AdminError> {
    let script = match mock_script {
        Some(p) => MockScript::load(p).map_err(local)?,
        None => MockScript::default(),
    };
    // queued model work stays queued for the server to pick up
    let options = HubOptions { data_dir: Some(data_dir.to_path_buf()), seed, config, job_mode: JobMode::Manual, ..HubOptions::default() };
    Hub::open(options, Arc::new(Gateway::mock(script)), Arc::new(SystemClock)).map_err(local)
}

fn dump(snapshot: Snapshot) -> Value {
    json!({"state_hash": content_hash(&snapshot.state), "snapshot": snapshot})
}

/// Prints `{doc_id, join_code}`.
pub fn create_doc(target: &Target, goal: Option<String>) -> Result<Value, AdminError> {
    match target {
        Target::Server { url, token } => {
            let mut req = client()?.post(format!("{url}/documents")).json(&json!({"goal_text": goal}));
            if let Some(t) = token {
                req = req.bearer_auth(t);
            }
            send(req)
        }
        Target::InProcess { data_dir, mock_script, seed, config } => {
            let hub = open_hub(data_dir, mock_script.as_deref(), *seed, *config)?;
            let (doc, code) = hub.create_doc(goal).map_err(local)?;
            Ok(json!({"doc_id": doc, "join_code": code}))
        }
    }
}

pub fn list_docs(target: &Target) -> Result<Value, AdminError> {
    match target {
        Target::Server { url, .. } => send(client()?.get(format!("{url}/documents"))),
        Target::InProcess { data_dir, mock_script, seed, config } => {
            let hub = open_hub(data_dir, mock_script.as_deref(), *seed, *config)?;
            Ok(json!(hub.list_docs()))
        }
    }
}

/// The document snapshot plus the hash of its persistent state.
pub fn dump_doc(target: &Target, doc: &DocId) -> Result<Value, AdminError> {
    let snapshot: Snapshot = match target {
        Target::Server { url, .. } => {
            let v = send(client()?.get(format!("{url}/documents/{doc}/snapshot")))?;
            serde_json::from_value(v).map_err(local)?
        }
        Target::InProcess { data_dir, mock_script, seed, config } => {
            let hub = open_hub(data_dir, mock_script.as_deref(), *seed, *config)?;
            hub.with(doc, |s| s.snapshot()).map_err(local)?
        }
    };
    Ok(dump(snapshot))
}

/// Rebuilds a document from its log alone. `path` is a `log.jsonl` file
/// or a document directory.
pub fn replay_log(path: &Path, config: Config) -> Result<Value, AdminError> {
    let file = if path.is_dir() { path.join("log.jsonl") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| local(format!("{}: {e}", file.display())))?;
    let entries = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<LogEntry>(l).map_err(|e| local(format!("{}:{}: {e}", file.display(), i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let session = DocumentSession::replay(&entries, config, Arc::new(PresetCatalog::builtin())).map_err(local)?;
    let state: &DocumentState = session.state();
    Ok(json!({
        "doc_id": state.doc_id(),
        "entries": entries.len(),
        "state_hash": content_hash(state),
        "text": state.doc.text(),
    }))
}
