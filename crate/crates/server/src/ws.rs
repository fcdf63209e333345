use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::response::Response;
use cowrite::document::sequence::SeqOp;
use cowrite::ids::{DocId, UserId};
use cowrite::session::Command;
use cowrite::sync::{ConnId, InboundGate, MessageKind};
use serde::Deserialize;

use crate::{ApiError, AppState};

#[derive(Deserialize)]
pub struct WsQuery {
    user: UserId,
}

pub async fn upgrade(
    State(state): State<AppState>,
    Path(doc): Path<DocId>,
    Query(q): Query<WsQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let (conn, rx) = state.hub.with(&doc, |s| s.attach(&q.user))??;
    Ok(ws.on_upgrade(move |socket| serve(state, doc, q.user, conn, rx, socket)))
}

async fn serve(
    state: AppState,
    doc: DocId,
    user: UserId,
    conn: ConnId,
    mut rx: tokio::sync::mpsc::UnboundedReceiver<cowrite::sync::SessionMessage>,
    mut socket: WebSocket,
) {
    let hub = Arc::clone(&state.hub);
    // a reconnecting member comes back online
    let online = hub.with(&doc, |s| s.presence().contains(&user)).unwrap_or(false);
    if !online {
        let name = hub.with(&doc, |s| s.state().members.get(&user).map(|m| m.name.clone())).ok().flatten();
        if let Some(name) = name {
            let (h, d) = (Arc::clone(&hub), doc.clone());
            let _ = tokio::task::spawn_blocking(move || h.execute(&d, Command::Join { name })).await;
        }
    }
    let mut gate = InboundGate::new(doc.clone(), user.clone());
    loop {
        tokio::select! {
            out = rx.recv() => {
                let Some(msg) = out else { break };
                if socket.send(Message::Text(msg.to_json().into())).await.is_err() {
                    break;
                }
            }
            inbound = socket.recv() => {
                let text = match inbound {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let msg = match gate.check(&text) {
                    Ok(m) => m,
                    Err(e) => {
                        let _ = hub.with(&doc, |s| s.send_error(conn, &user, &e.to_string()));
                        continue;
                    }
                };
                let command = match msg.kind {
                    MessageKind::EditUpdate => match msg.payload.get("op").cloned().map(serde_json::from_value::<SeqOp>) {
                        Some(Ok(op)) => Command::Edit { user: user.clone(), op },
                        _ => {
                            let _ = hub.with(&doc, |s| s.send_error(conn, &user, "edit_update needs a valid op"));
                            continue;
                        }
                    },
                    MessageKind::Save => Command::Save { user: user.clone() },
                    MessageKind::Leave => Command::Leave { user: user.clone() },
                    _ => continue,
                };
                let leaving = matches!(command, Command::Leave { .. });
                let (h, d) = (Arc::clone(&hub), doc.clone());
                let result = tokio::task::spawn_blocking(move || h.execute_from(&d, command, Some(conn))).await;
                if let Ok(Err(e)) = result {
                    let _ = hub.with(&doc, |s| s.send_error(conn, &user, &e.to_string()));
                }
                if leaving {
                    break;
                }
            }
        }
    }
    let last = hub.with(&doc, |s| s.detach(conn)).ok().flatten();
    if let Some(user) = last {
        let (h, d) = (Arc::clone(&hub), doc.clone());
        let _ = tokio::task::spawn_blocking(move || h.execute(&d, Command::Leave { user })).await;
    }
}
