//! REST and WebSocket routes over a [`Hub`].

pub mod live;
mod ws;

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use cowrite::agents::{AgentDraft, AgentError};
use cowrite::comments::{CommentError, ConsumeAction};
use cowrite::document::DocumentError;
use cowrite::hub::Hub;
use cowrite::ids::{owning_doc, AgentId, DocId, MessageId, TaskId, ThreadId, UserId};
use cowrite::session::{Command, SessionError};
use cowrite::tasks::{TaskDraft, TaskError};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    /// Required as a bearer token for document creation when set.
    pub admin_token: Option<String>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use SessionError as S;
        let status = match &e {
            S::UnknownDocument(_)
            | S::UnknownJob(_)
            | S::OrphanThread(_)
            | S::Agent(AgentError::UnknownAgent(_) | AgentError::UnknownPreset(_) | AgentError::UnknownSection(_))
            | S::Task(TaskError::UnknownTask(_))
            | S::Document(DocumentError::UnknownAnnotation(_))
            | S::Comment(CommentError::UnknownThread(_) | CommentError::UnknownMessage(_) | CommentError::NoSuggestion) => {
                StatusCode::NOT_FOUND
            }
            S::NotMember(_) | S::InvalidJoinCode => StatusCode::FORBIDDEN,
            S::Comment(CommentError::AlreadyConsumed { .. } | CommentError::ThreadResolved)
            | S::Agent(AgentError::HandleTaken(_) | AgentError::DefaultUndeletable)
            | S::Task(TaskError::BuiltinReadOnly(_))
            | S::Document(DocumentError::AnnotationClosed | DocumentError::AnnotationDeleted | DocumentError::SpanVanished) => {
                StatusCode::CONFLICT
            }
            S::Agent(AgentError::SuggestionUnavailable(_)) => StatusCode::BAD_GATEWAY,
            S::Storage(_) | S::Replay { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Runs hub work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, SessionError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn acting_user(headers: &HeaderMap) -> Result<UserId, ApiError> {
    headers
        .get("x-user")
        .and_then(|v| v.to_str().ok())
        .map(UserId::new)
        .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "missing x-user header".into()))
}

async fn run(state: &AppState, doc: DocId, command: Command) -> ApiResult {
    let hub = Arc::clone(&state.hub);
    blocking(move || hub.execute(&doc, command)).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/documents", post(create_document).get(list_documents))
        .route("/documents/{id}/join", post(join))
        .route("/documents/{id}/snapshot", get(snapshot))
        .route("/documents/{id}/save", post(save))
        .route("/documents/{id}/edits", post(edit_text))
        .route("/documents/{id}/goal", put(set_goal))
        .route("/documents/{id}/agents", get(list_agents).post(create_agent).put(update_agent_in_doc))
        .route("/documents/{id}/agents/presets", post(instantiate_preset))
        .route("/presets", get(list_presets))
        .route("/agents/{id}", put(update_agent).delete(delete_agent))
        .route("/agents/{id}/suggest", post(suggest))
        .route("/agents/{id}/history", get(agent_history))
        .route("/documents/{id}/threads", get(list_threads).post(create_thread))
        .route("/threads/{id}/messages", post(reply))
        .route("/threads/{id}/consume", post(consume))
        .route("/threads/{id}/preview", get(preview))
        .route("/threads/{id}/approve", post(approve))
        .route("/threads/{id}", axum::routing::delete(delete_thread))
        .route("/documents/{id}/tasks", get(list_tasks).post(create_task))
        .route("/documents/{id}/tasks/{task}", put(update_task_in_doc).delete(delete_task_in_doc))
        .route("/tasks/{id}", put(update_task).delete(delete_task))
        .route("/tasks/{id}/run", post(run_task))
        .route("/tasks/{id}/runs", get(task_runs))
        .route("/documents/{id}/shortcuts", get(shortcuts))
        .route("/documents/{id}/ws", get(ws::upgrade))
        .with_state(state)
}

#[derive(Deserialize, Default)]
struct CreateDocument {
    #[serde(default)]
    goal_text: Option<String>,
}

async fn create_document(State(state): State<AppState>, headers: HeaderMap, body: Option<Json<CreateDocument>>) -> ApiResult {
    if let Some(token) = &state.admin_token {
        let given = headers.get("authorization").and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Err(ApiError(StatusCode::UNAUTHORIZED, "admin token required".into()));
        }
    }
    let goal = body.and_then(|b| b.0.goal_text);
    let hub = Arc::clone(&state.hub);
    let (doc, code) = blocking(move || hub.create_doc(goal)).await?;
    Ok(Json(json!({"doc_id": doc, "join_code": code})))
}

async fn list_documents(State(state): State<AppState>) -> ApiResult {
    Ok(Json(json!(state.hub.list_docs())))
}

#[derive(Deserialize)]
struct JoinBody {
    code: String,
    name: String,
}

async fn join(State(state): State<AppState>, Path(doc): Path<DocId>, Json(body): Json<JoinBody>) -> ApiResult {
    let hub = Arc::clone(&state.hub);
    blocking(move || {
        let mut info = hub.join(&doc, &body.code, &body.name)?;
        info["snapshot"] = json!(hub.with(&doc, |s| s.snapshot())?);
        Ok(Json(info))
    })
    .await
}

async fn snapshot(State(state): State<AppState>, Path(doc): Path<DocId>) -> ApiResult {
    let snap = state.hub.with(&doc, |s| s.snapshot())?;
    Ok(Json(json!(snap)))
}

async fn save(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::Save { user }).await
}

#[derive(Deserialize)]
struct EditBody {
    at: usize,
    #[serde(default)]
    delete: usize,
    #[serde(default)]
    insert: String,
}

async fn edit_text(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(b): Json<EditBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::EditText { user, at: b.at, delete: b.delete, insert: b.insert }).await
}

#[derive(Deserialize)]
struct GoalBody {
    goal_text: Option<String>,
}

async fn set_goal(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(b): Json<GoalBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::SetGoal { user, goal: b.goal_text }).await
}

async fn list_agents(State(state): State<AppState>, Path(doc): Path<DocId>) -> ApiResult {
    let agents = state.hub.with(&doc, |s| s.state().agents.iter().cloned().collect::<Vec<_>>())?;
    Ok(Json(json!(agents)))
}

async fn create_agent(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(draft): Json<AgentDraft>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::CreateAgent { user, draft }).await
}

#[derive(Deserialize)]
struct AgentUpdate {
    agent_id: AgentId,
    #[serde(flatten)]
    draft: AgentDraft,
}

async fn update_agent_in_doc(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(doc): Path<DocId>,
    Json(b): Json<AgentUpdate>,
) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::UpdateAgent { user, agent: b.agent_id, draft: b.draft }).await
}

async fn update_agent(State(state): State<AppState>, headers: HeaderMap, Path(agent): Path<AgentId>, Json(draft): Json<AgentDraft>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(agent.as_str());
    run(&state, doc, Command::UpdateAgent { user, agent, draft }).await
}

async fn delete_agent(State(state): State<AppState>, headers: HeaderMap, Path(agent): Path<AgentId>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(agent.as_str());
    run(&state, doc, Command::DeleteAgent { user, agent }).await
}

#[derive(Deserialize)]
struct PresetBody {
    preset: String,
}

async fn instantiate_preset(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(b): Json<PresetBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::InstantiatePreset { user, preset: b.preset }).await
}

async fn list_presets(State(state): State<AppState>) -> ApiResult {
    Ok(Json(json!(state.hub.catalog().presets)))
}

#[derive(Deserialize)]
struct SuggestBody {
    section: String,
    #[serde(default)]
    current: Vec<String>,
}

async fn suggest(State(state): State<AppState>, Path(agent): Path<AgentId>, Json(b): Json<SuggestBody>) -> ApiResult {
    let hub = Arc::clone(&state.hub);
    let values = blocking(move || hub.suggest(&agent, &b.section, &b.current)).await?;
    Ok(Json(json!({"suggestions": values})))
}

async fn agent_history(State(state): State<AppState>, Path(agent): Path<AgentId>) -> ApiResult {
    let doc = owning_doc(agent.as_str());
    let runs = state.hub.with(&doc, |s| -> Result<Value, SessionError> {
        let profile = s.state().agents.get(&agent)?;
        let runs: Vec<_> = s.state().tasks.runs().iter().filter(|r| r.agent_id == agent).cloned().collect();
        Ok(json!({"agent_id": agent, "run_history": profile.run_history, "runs": runs}))
    })??;
    Ok(Json(runs))
}

async fn list_threads(State(state): State<AppState>, Path(doc): Path<DocId>) -> ApiResult {
    let threads = state.hub.with(&doc, |s| s.state().comments.iter().cloned().collect::<Vec<_>>())?;
    Ok(Json(json!(threads)))
}

#[derive(Deserialize)]
struct ThreadBody {
    start: usize,
    end: usize,
    body: String,
}

async fn create_thread(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(b): Json<ThreadBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::CreateThread { user, start: b.start, end: b.end, body: b.body }).await
}

#[derive(Deserialize)]
struct ReplyBody {
    body: String,
}

async fn reply(State(state): State<AppState>, headers: HeaderMap, Path(thread): Path<ThreadId>, Json(b): Json<ReplyBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(thread.as_str());
    run(&state, doc, Command::Reply { user, thread, body: b.body }).await
}

#[derive(Deserialize)]
struct ConsumeBody {
    message: MessageId,
    action: ConsumeAction,
}

async fn consume(State(state): State<AppState>, headers: HeaderMap, Path(thread): Path<ThreadId>, Json(b): Json<ConsumeBody>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(thread.as_str());
    run(&state, doc, Command::Consume { user, thread, message: b.message, action: b.action }).await
}

#[derive(Deserialize)]
struct PreviewQuery {
    message: MessageId,
}

async fn preview(State(state): State<AppState>, Path(thread): Path<ThreadId>, Query(q): Query<PreviewQuery>) -> ApiResult {
    let doc = owning_doc(thread.as_str());
    let v = state.hub.with(&doc, |s| s.preview(&thread, &q.message))??;
    Ok(Json(v))
}

async fn approve(State(state): State<AppState>, headers: HeaderMap, Path(thread): Path<ThreadId>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(thread.as_str());
    run(&state, doc, Command::Approve { user, thread }).await
}

async fn delete_thread(State(state): State<AppState>, headers: HeaderMap, Path(thread): Path<ThreadId>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(thread.as_str());
    run(&state, doc, Command::DeleteAnnotation { user, thread }).await
}

async fn list_tasks(State(state): State<AppState>, Path(doc): Path<DocId>) -> ApiResult {
    let tasks = state.hub.with(&doc, |s| s.state().tasks.iter().cloned().collect::<Vec<_>>())?;
    Ok(Json(json!(tasks)))
}

async fn create_task(State(state): State<AppState>, headers: HeaderMap, Path(doc): Path<DocId>, Json(draft): Json<TaskDraft>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::CreateTask { user, draft }).await
}

async fn update_task_in_doc(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((doc, task)): Path<(DocId, TaskId)>,
    Json(draft): Json<TaskDraft>,
) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::UpdateTask { user, task, draft }).await
}

async fn delete_task_in_doc(State(state): State<AppState>, headers: HeaderMap, Path((doc, task)): Path<(DocId, TaskId)>) -> ApiResult {
    let user = acting_user(&headers)?;
    run(&state, doc, Command::DeleteTask { user, task }).await
}

async fn update_task(State(state): State<AppState>, headers: HeaderMap, Path(task): Path<TaskId>, Json(draft): Json<TaskDraft>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(task.as_str());
    run(&state, doc, Command::UpdateTask { user, task, draft }).await
}

async fn delete_task(State(state): State<AppState>, headers: HeaderMap, Path(task): Path<TaskId>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(task.as_str());
    run(&state, doc, Command::DeleteTask { user, task }).await
}

#[derive(Deserialize, Default)]
struct RunBody {
    start: Option<usize>,
    end: Option<usize>,
}

async fn run_task(State(state): State<AppState>, headers: HeaderMap, Path(task): Path<TaskId>, body: Option<Json<RunBody>>) -> ApiResult {
    let user = acting_user(&headers)?;
    let doc = owning_doc(task.as_str());
    let b = body.map(|b| b.0).unwrap_or_default();
    let command = match (b.start, b.end) {
        (Some(start), Some(end)) => Command::RunShortcut { user, task, start, end },
        _ => Command::RunTask { user, task },
    };
    run(&state, doc, command).await
}

async fn task_runs(State(state): State<AppState>, Path(task): Path<TaskId>) -> ApiResult {
    let doc = owning_doc(task.as_str());
    let runs = state.hub.with(&doc, |s| -> Result<Value, SessionError> {
        s.state().tasks.get(&task)?;
        Ok(json!(s.state().tasks.runs_of(&task)))
    })??;
    Ok(Json(runs))
}

async fn shortcuts(State(state): State<AppState>, Path(doc): Path<DocId>) -> ApiResult {
    let list = state.hub.with(&doc, |s| s.state().tasks.shortcuts())?;
    Ok(Json(json!(list)))
}
