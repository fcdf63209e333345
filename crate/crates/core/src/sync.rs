//! Wire messages, presence and per-document broadcast rooms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::clock::Timestamp;
use crate::ids::{DocId, Identity, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Join,
    Leave,
    EditUpdate,
    Presence,
    CommentEvent,
    TaskEvent,
    AgentTyping,
    Save,
    Error,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Join => "join",
            MessageKind::Leave => "leave",
            MessageKind::EditUpdate => "edit_update",
            MessageKind::Presence => "presence",
            MessageKind::CommentEvent => "comment_event",
            MessageKind::TaskEvent => "task_event",
            MessageKind::AgentTyping => "agent_typing",
            MessageKind::Save => "save",
            MessageKind::Error => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMessage {
    pub kind: MessageKind,
    pub doc: DocId,
    pub sender: Identity,
    pub seq: u64,
    pub payload: Value,
}

impl SessionMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("session messages serialize")
    }

    /// Field of the payload as a string, for assertions and routing.
    pub fn payload_str(&self, field: &str) -> Option<&str> {
        self.payload.get(field).and_then(Value::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceEntry {
    pub since: Timestamp,
    pub last_activity: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceSet {
    pub doc_id: DocId,
    pub online_users: BTreeMap<UserId, PresenceEntry>,
}

impl PresenceSet {
    pub fn new(doc_id: DocId) -> Self {
        Self { doc_id, online_users: BTreeMap::new() }
    }

    /// Returns false if the user was already online.
    pub fn add(&mut self, user: &UserId, now: Timestamp) -> bool {
        if self.online_users.contains_key(user) {
            return false;
        }
        self.online_users.insert(user.clone(), PresenceEntry { since: now, last_activity: now });
        true
    }

    pub fn remove(&mut self, user: &UserId) -> bool {
        self.online_users.remove(user).is_some()
    }

    pub fn touch(&mut self, user: &UserId, now: Timestamp) {
        if let Some(e) = self.online_users.get_mut(user) {
            e.last_activity = now;
        }
    }

    pub fn contains(&self, user: &UserId) -> bool {
        self.online_users.contains_key(user)
    }

    pub fn len(&self) -> usize {
        self.online_users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online_users.is_empty()
    }

    pub fn users(&self) -> Vec<UserId> {
        self.online_users.keys().cloned().collect()
    }
}

pub type ConnId = u64;

/// Live connections of one document.
#[derive(Debug, Default)]
pub struct Room {
    next: ConnId,
    connections: BTreeMap<ConnId, (UserId, UnboundedSender<SessionMessage>)>,
}

impl Room {
    pub fn attach(&mut self, user: &UserId) -> (ConnId, UnboundedReceiver<SessionMessage>) {
        let (tx, rx) = unbounded_channel();
        self.next += 1;
        self.connections.insert(self.next, (user.clone(), tx));
        (self.next, rx)
    }

    /// Removes a connection and returns its user.
    pub fn detach(&mut self, conn: ConnId) -> Option<UserId> {
        self.connections.remove(&conn).map(|(u, _)| u)
    }

    pub fn user_connected(&self, user: &UserId) -> bool {
        self.connections.values().any(|(u, _)| u == user)
    }

    pub fn user_of(&self, conn: ConnId) -> Option<&UserId> {
        self.connections.get(&conn).map(|(u, _)| u)
    }

    pub fn len(&self) -> usize {
        self.connections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.connections.is_empty()
    }

    /// Sends to every connection except `except`. Connections whose
    /// receiver is gone are dropped.
    pub fn broadcast(&mut self, message: &SessionMessage, except: Option<ConnId>) -> usize {
        let mut sent = 0;
        self.connections.retain(|id, (_, tx)| {
            if Some(*id) == except {
                return true;
            }
            let ok = tx.send(message.clone()).is_ok();
            sent += usize::from(ok);
            ok
        });
        sent
    }

    /// Sends to one connection only.
    pub fn send_to(&self, conn: ConnId, message: &SessionMessage) -> bool {
        self.connections.get(&conn).is_some_and(|(_, tx)| tx.send(message.clone()).is_ok())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message for document {got} on a connection to {expected}")]
    WrongDocument { expected: DocId, got: DocId },
    #[error("sender {0} does not match the connection")]
    WrongSender(String),
    #[error("out of order: expected seq > {last}, got {got}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("clients may not send {0} messages")]
    NotAccepted(&'static str),
}

/// Per-connection checks on inbound client messages.
#[derive(Debug)]
pub struct InboundGate {
    doc: DocId,
    user: UserId,
    last_seq: u64,
}

impl InboundGate {
    pub fn new(doc: DocId, user: UserId) -> Self {
        Self { doc, user, last_seq: 0 }
    }

    pub fn check(&mut self, raw: &str) -> Result<SessionMessage, ProtocolError> {
        let msg: SessionMessage = serde_json::from_str(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if msg.doc != self.doc {
            return Err(ProtocolError::WrongDocument { expected: self.doc.clone(), got: msg.doc });
        }
        if msg.sender.as_user() != Some(&self.user) {
            return Err(ProtocolError::WrongSender(msg.sender.id().to_owned()));
        }
        if msg.seq <= self.last_seq {
            return Err(ProtocolError::OutOfOrder { last: self.last_seq, got: msg.seq });
        }
        match msg.kind {
            MessageKind::EditUpdate | MessageKind::Presence | MessageKind::Save | MessageKind::Leave => {}
            other => return Err(ProtocolError::NotAccepted(other.as_str())),
        }
        self.last_seq = msg.seq;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn msg(seq: u64) -> SessionMessage {
        SessionMessage {
            kind: MessageKind::EditUpdate,
            doc: DocId::new("d1"),
            sender: Identity::User(UserId::new("d1-u1")),
            seq,
            payload: json!({}),
        }
    }

    #[test]
    fn wire_field_names() {
        let v: Value = serde_json::from_str(&msg(3).to_json()).unwrap();
        assert_eq!(
            v,
            json!({"kind":"edit_update","doc":"d1","sender":{"type":"user","id":"d1-u1"},"seq":3,"payload":{}})
        );
    }

    #[test]
    fn broadcast_skips_origin() {
        let mut room = Room::default();
        let (a, mut ra) = room.attach(&UserId::new("a"));
        let (_, mut rb) = room.attach(&UserId::new("b"));
        let (_, mut rc) = room.attach(&UserId::new("c"));
        assert_eq!(room.broadcast(&msg(1), Some(a)), 2);
        assert!(ra.try_recv().is_err());
        assert_eq!(rb.try_recv().unwrap().seq, 1);
        assert_eq!(rc.try_recv().unwrap().seq, 1);
    }

    #[test]
    fn dropped_receivers_are_pruned() {
        let mut room = Room::default();
        let (_, rx) = room.attach(&UserId::new("a"));
        drop(rx);
        assert_eq!(room.broadcast(&msg(1), None), 0);
        assert!(room.is_empty());
    }

    #[test]
    fn inbound_order_and_identity() {
        let mut gate = InboundGate::new(DocId::new("d1"), UserId::new("d1-u1"));
        assert!(gate.check(&msg(1).to_json()).is_ok());
        assert_eq!(gate.check(&msg(1).to_json()), Err(ProtocolError::OutOfOrder { last: 1, got: 1 }));
        let mut other = msg(2);
        other.sender = Identity::User(UserId::new("d1-u2"));
        assert!(matches!(gate.check(&other.to_json()), Err(ProtocolError::WrongSender(_))));
        let mut typing = msg(3);
        typing.kind = MessageKind::AgentTyping;
        assert_eq!(gate.check(&typing.to_json()), Err(ProtocolError::NotAccepted("agent_typing")));
    }

    #[test]
    fn presence_holds_a_user_once() {
        let mut p = PresenceSet::new(DocId::new("d1"));
        assert!(p.add(&UserId::new("a"), Timestamp(0)));
        assert!(!p.add(&UserId::new("a"), Timestamp(5)));
        assert_eq!(p.len(), 1);
        assert!(p.remove(&UserId::new("a")));
        assert!(p.is_empty());
    }
}
