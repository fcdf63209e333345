//! Comment threads, mentions and agent group conversations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentProfile;
use crate::clock::Timestamp;
use crate::gateway::schema::PlainText;
use crate::gateway::templates::{sections_json, string_list_json};
use crate::gateway::{render, Bindings, ChatMessage, ChatRequest, Gateway, Role, TemplateId};
use crate::ids::{AgentId, AnnotationId, Identity, MessageId, ThreadId, UserId};

pub const DEFAULT_MAX_AGENT_TURNS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumeAction {
    Append,
    Replace,
    Copy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionPayload {
    pub proposed_text: String,
    pub source_agent: String,
    pub consumed_by: Option<ConsumeAction>,
    pub consumed_by_user: Option<UserId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Chat,
    /// System-style notice such as "agent unavailable" or a note about an
    /// attempted task execution.
    Notice,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: MessageId,
    pub author: Identity,
    pub body: String,
    pub mentions: Vec<String>,
    pub suggestion: Option<SuggestionPayload>,
    pub timestamp: Timestamp,
    pub kind: MessageKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentThread {
    pub thread_id: ThreadId,
    pub annotation_id: AnnotationId,
    pub messages: Vec<Message>,
    pub resolved: bool,
}

impl CommentThread {
    pub fn message(&self, id: &MessageId) -> Option<&Message> {
        self.messages.iter().find(|m| &m.message_id == id)
    }

    pub fn notices(&self) -> usize {
        self.messages.iter().filter(|m| m.kind == MessageKind::Notice).count()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommentError {
    #[error("unknown thread {0}")]
    UnknownThread(ThreadId),
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("thread is resolved")]
    ThreadResolved,
    #[error("message has no suggestion")]
    NoSuggestion,
    #[error("suggestion already consumed by {action:?}")]
    AlreadyConsumed { action: ConsumeAction, by: Option<UserId> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentStore {
    threads: BTreeMap<ThreadId, CommentThread>,
}

impl CommentStore {
    pub fn insert(&mut self, thread: CommentThread) {
        self.threads.insert(thread.thread_id.clone(), thread);
    }

    pub fn get(&self, id: &ThreadId) -> Result<&CommentThread, CommentError> {
        self.threads.get(id).ok_or_else(|| CommentError::UnknownThread(id.clone()))
    }

    pub fn get_mut(&mut self, id: &ThreadId) -> Result<&mut CommentThread, CommentError> {
        self.threads.get_mut(id).ok_or_else(|| CommentError::UnknownThread(id.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &CommentThread> {
        self.threads.values()
    }

    pub fn len(&self) -> usize {
        self.threads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    /// Appends a message to an open thread.
    pub fn push(&mut self, id: &ThreadId, message: Message) -> Result<(), CommentError> {
        let thread = self.get_mut(id)?;
        if thread.resolved {
            return Err(CommentError::ThreadResolved);
        }
        thread.messages.push(message);
        Ok(())
    }

    /// Marks a suggestion consumed. Fails if it already was.
    pub fn consume(
        &mut self,
        thread: &ThreadId,
        message: &MessageId,
        action: ConsumeAction,
        user: &UserId,
    ) -> Result<String, CommentError> {
        let payload = self.suggestion_mut(thread, message)?;
        if let Some(done) = payload.consumed_by {
            return Err(CommentError::AlreadyConsumed { action: done, by: payload.consumed_by_user.clone() });
        }
        payload.consumed_by = Some(action);
        payload.consumed_by_user = Some(user.clone());
        Ok(payload.proposed_text.clone())
    }

    pub fn suggestion(&self, thread: &ThreadId, message: &MessageId) -> Result<&SuggestionPayload, CommentError> {
        let t = self.get(thread)?;
        let m = t.message(message).ok_or_else(|| CommentError::UnknownMessage(message.clone()))?;
        m.suggestion.as_ref().ok_or(CommentError::NoSuggestion)
    }

    fn suggestion_mut(&mut self, thread: &ThreadId, message: &MessageId) -> Result<&mut SuggestionPayload, CommentError> {
        let t = self.get_mut(thread)?;
        let m = t
            .messages
            .iter_mut()
            .find(|m| &m.message_id == message)
            .ok_or_else(|| CommentError::UnknownMessage(message.clone()))?;
        m.suggestion.as_mut().ok_or(CommentError::NoSuggestion)
    }
}

/// `@handle` tokens in order of appearance, without the `@`. A mention must
/// not follow an alphanumeric character (so e-mail addresses don't count)
/// and ends at the first non-alphanumeric character.
pub fn parse_mentions(body: &str) -> Vec<String> {
    let chars: Vec<char> = body.chars().collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '@' && (i == 0 || !chars[i - 1].is_ascii_alphanumeric()) {
            let handle: String = chars[i + 1..].iter().take_while(|c| c.is_ascii_alphanumeric()).collect();
            if !handle.is_empty() {
                i += handle.len();
                if !out.iter().any(|h| h.eq_ignore_ascii_case(&handle)) {
                    out.push(handle);
                }
            }
        }
        i += 1;
    }
    out
}

const FILLER_OPENERS: [&str; 8] =
    ["sure", "certainly", "of course", "absolutely", "here's", "here is", "great question", "happy to help"];

/// Drops a leading line or sentence of conversational filler.
pub fn strip_filler(text: &str) -> String {
    let trimmed = text.trim_start();
    let lower = trimmed.to_lowercase();
    if !FILLER_OPENERS.iter().any(|f| lower.starts_with(f)) {
        return text.trim().to_owned();
    }
    let first_line_end = trimmed.find('\n').unwrap_or(trimmed.len());
    let first_line = &trimmed[..first_line_end];
    let cut = if first_line.trim_end().ends_with(':') || first_line_end < trimmed.len() {
        first_line_end
    } else {
        match first_line.find(['!', '.', ':']) {
            Some(i) => i + 1,
            None => return text.trim().to_owned(),
        }
    };
    let rest = trimmed[cut..].trim();
    if rest.is_empty() {
        text.trim().to_owned()
    } else {
        rest.to_owned()
    }
}

/// One line of the prior thread history shown to agents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLine {
    pub speaker: String,
    pub body: String,
}

/// Everything a group conversation needs, captured from the document state
/// so it can run away from the document owner.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationInput {
    pub agents: Vec<AgentProfile>,
    /// Agents that may be pulled in by an agent mentioning them.
    pub roster: Vec<AgentProfile>,
    pub document_text: String,
    pub goal_text: Option<String>,
    pub selected_text: String,
    pub history: Vec<HistoryLine>,
    pub request: String,
    pub max_turns: usize,
    pub agent_mentions_join: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub agent_id: AgentId,
    pub handle: String,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationOutcome {
    pub turns: Vec<AgentTurn>,
    /// Agents whose model call failed, with the reason.
    pub failures: Vec<(AgentId, String)>,
    /// Agents that never got a turn because the turn budget ran out.
    pub skipped: Vec<AgentId>,
}

pub fn agent_init_bindings(agent: &AgentProfile, input: &ConversationInput) -> Bindings {
    let history = input
        .history
        .iter()
        .map(|h| format!("{}: {}", h.speaker, h.body))
        .collect::<Vec<_>>()
        .join("\n");
    Bindings::new()
        .set("agent_name", agent.name.as_str())
        .set("agent_role", agent.role.as_str())
        .set("sections_json", sections_json(&agent.sections))
        .set("notes", string_list_json(&agent.notes))
        .set("document_text", input.document_text.as_str())
        .set_opt("goal_text", input.goal_text.as_deref())
        .set("selected_text", input.selected_text.as_str())
        .set("history", history)
        .set("request", input.request.as_str())
}

/// Messages sent to `agent` given the turns taken so far.
pub fn conversation_request(
    agent: &AgentProfile,
    input: &ConversationInput,
    turns: &[AgentTurn],
) -> Result<ChatRequest, crate::gateway::RenderError> {
    let mut messages = render(TemplateId::AgentInit, &agent_init_bindings(agent, input))?;
    for turn in turns {
        if turn.agent_id == agent.agent_id {
            messages.push(ChatMessage::new(Role::Assistant, turn.text.clone()));
        } else {
            messages.push(ChatMessage::new(Role::User, format!("@{}: {}", turn.handle, turn.text)));
        }
    }
    Ok(ChatRequest::new(TemplateId::AgentInit, messages))
}

/// Round-robin group conversation: every participating agent speaks in
/// order, sharing the opening message and all earlier turns, until each has
/// replied once or `max_turns` model calls were made.
pub fn run_conversation(gateway: &Gateway, input: &ConversationInput) -> ConversationOutcome {
    let mut queue: Vec<AgentProfile> = input.agents.clone();
    let mut outcome = ConversationOutcome::default();
    let mut calls = 0;
    let mut next = 0;
    while next < queue.len() {
        let agent = queue[next].clone();
        next += 1;
        if calls >= input.max_turns {
            outcome.skipped.push(agent.agent_id.clone());
            continue;
        }
        calls += 1;
        let request = match conversation_request(&agent, input, &outcome.turns) {
            Ok(r) => r,
            Err(e) => {
                outcome.failures.push((agent.agent_id.clone(), e.to_string()));
                continue;
            }
        };
        match gateway.complete(request, &PlainText) {
            Ok(text) => {
                let text = if agent.strip_filler { strip_filler(&text) } else { text };
                if input.agent_mentions_join {
                    for handle in parse_mentions(&text) {
                        let joined = input.roster.iter().find(|a| a.handle.eq_ignore_ascii_case(&handle));
                        if let Some(a) = joined {
                            if !queue.iter().any(|q| q.agent_id == a.agent_id) {
                                queue.push(a.clone());
                            }
                        }
                    }
                }
                outcome.turns.push(AgentTurn { agent_id: agent.agent_id.clone(), handle: agent.handle.clone(), text });
            }
            Err(e) => outcome.failures.push((agent.agent_id.clone(), e.to_string())),
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentRegistry;
    use crate::gateway::{MockRule, MockScript};
    use crate::ids::{DocId, IdAllocator};

    #[test]
    fn mentions() {
        assert_eq!(parse_mentions("@aiauthor Which areas could we list here?"), vec!["aiauthor"]);
        assert_eq!(parse_mentions("@reviewer @brainstormer compare, @Reviewer!"), vec!["reviewer", "brainstormer"]);
        assert!(parse_mentions("mail me at bob@example.com").is_empty());
        assert!(parse_mentions("@ alone").is_empty());
        assert_eq!(parse_mentions("(@bob)"), vec!["bob"]);
    }

    #[test]
    fn filler_is_stripped() {
        assert_eq!(strip_filler("Sure, here's a draft:\nAI is everywhere."), "AI is everywhere.");
        assert_eq!(strip_filler("Certainly! AI is everywhere."), "AI is everywhere.");
        assert_eq!(strip_filler("AI is everywhere."), "AI is everywhere.");
        assert_eq!(strip_filler("Sure!"), "Sure!");
    }

    fn input(agents: Vec<AgentProfile>, max_turns: usize) -> ConversationInput {
        ConversationInput {
            roster: agents.clone(),
            agents,
            document_text: "AI helps in many areas.".into(),
            goal_text: None,
            selected_text: "many areas".into(),
            history: vec![
                HistoryLine { speaker: "@alice".into(), body: "First turn".into() },
                HistoryLine { speaker: "@aiAuthor".into(), body: "Second turn".into() },
            ],
            request: "Which areas could we list here?".into(),
            max_turns,
            agent_mentions_join: false,
        }
    }

    #[test]
    fn opening_message_carries_context_in_order() {
        let reg = AgentRegistry::new(&DocId::new("d1"), &mut IdAllocator::default());
        let agent = reg.default_agent().clone();
        let inp = input(vec![agent.clone()], 4);
        let req = conversation_request(&agent, &inp, &[]).unwrap();
        assert_eq!(req.messages.len(), 2);
        assert!(req.messages[0].content.starts_with("You are an AI agent named @aiAI Author, specializing in the role of"));
        let opening = &req.messages[1].content;
        assert!(opening.contains("goal_text (optional): \"\""));
        assert!(opening.contains("selected_text: \"many areas\""));
        let first = opening.find("@alice: First turn").unwrap();
        let second = opening.find("@aiAuthor: Second turn").unwrap();
        assert!(first < second);
    }

    #[test]
    fn conversation_respects_turn_budget() {
        let doc = DocId::new("d1");
        let mut ids = IdAllocator::default();
        let mut reg = AgentRegistry::new(&doc, &mut ids);
        let u = UserId::new("u");
        let catalog = crate::agents::PresetCatalog::builtin();
        let r = reg.instantiate_preset(&mut ids, &doc, &u, &catalog, "reviewer").unwrap();
        let i = reg.instantiate_preset(&mut ids, &doc, &u, &catalog, "idea-generator").unwrap();
        let agents = vec![reg.get(&r).unwrap().clone(), reg.get(&i).unwrap().clone()];
        let g = Gateway::mock(MockScript::from_rules(vec![
            MockRule::text(TemplateId::AgentInit, "review").system_containing("@aiReviewer"),
            MockRule::text(TemplateId::AgentInit, "ideas").system_containing("@aiIdea Generator"),
        ]));
        let out = run_conversation(&g, &input(agents.clone(), 4));
        assert_eq!(out.turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(), vec!["review", "ideas"]);
        // the second agent saw the first agent's turn
        let second = &g.exchanges()[1].messages;
        assert_eq!(second.last().unwrap().content, "@reviewer: review");

        let out = run_conversation(&g, &input(agents, 1));
        assert_eq!(out.turns.len(), 1);
        assert_eq!(out.skipped, vec![i]);
    }

    #[test]
    fn consumption_is_single_shot() {
        let mut store = CommentStore::default();
        let t = ThreadId::new("d1-th1");
        store.insert(CommentThread {
            thread_id: t.clone(),
            annotation_id: AnnotationId::new("d1-an1"),
            messages: vec![Message {
                message_id: MessageId::new("d1-m1"),
                author: Identity::Agent(AgentId::new("d1-a0")),
                body: "text".into(),
                mentions: vec![],
                suggestion: Some(SuggestionPayload {
                    proposed_text: "text".into(),
                    source_agent: "aiAuthor".into(),
                    consumed_by: None,
                    consumed_by_user: None,
                }),
                timestamp: Timestamp(0),
                kind: MessageKind::Chat,
            }],
            resolved: false,
        });
        let m = MessageId::new("d1-m1");
        let u = UserId::new("u1");
        assert_eq!(store.consume(&t, &m, ConsumeAction::Copy, &u).unwrap(), "text");
        assert_eq!(
            store.consume(&t, &m, ConsumeAction::Append, &u),
            Err(CommentError::AlreadyConsumed { action: ConsumeAction::Copy, by: Some(u) })
        );
    }
}
