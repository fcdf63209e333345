//! Prompt templates for the six model integration points.
//!
//! Template texts live in `prompts/` and are rendered by substituting
//! `{name}` placeholders in a single pass, so bound values may themselves
//! contain braces.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AGENT_INIT: &str = include_str!("prompts/agent_init.txt");
pub const CONVERSATION_OPENING: &str = include_str!("prompts/conversation_opening.txt");
pub const CV_SUGGESTIONS: &str = include_str!("prompts/cv_suggestions.txt");
pub const CV_SUGGESTIONS_INPUT: &str = include_str!("prompts/cv_suggestions_input.txt");
pub const SUMMARY: &str = include_str!("prompts/summary.txt");
pub const SUMMARY_INPUT: &str = include_str!("prompts/summary_input.txt");
pub const TASK_TITLE_SYSTEM: &str = include_str!("prompts/task_title_system.txt");
pub const TASK_TITLE_USER: &str = include_str!("prompts/task_title_user.txt");
pub const ASSIGNEE_SYSTEM: &str = include_str!("prompts/assignee_system.txt");
pub const ASSIGNEE_USER: &str = include_str!("prompts/assignee_user.txt");
pub const ASSIGNEE_AGENT: &str = include_str!("prompts/assignee_agent.txt");
pub const SEGMENT_SELECT: &str = include_str!("prompts/segment_select.txt");
pub const SEGMENT_SELECT_DOCUMENT: &str = include_str!("prompts/segment_select_document.txt");
pub const FORMAT_REMINDER: &str = include_str!("prompts/format_reminder.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    AgentInit,
    CvSuggestions,
    Summary,
    TaskTitle,
    AssigneeSelect,
    SegmentSelect,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::AgentInit,
        TemplateId::CvSuggestions,
        TemplateId::Summary,
        TemplateId::TaskTitle,
        TemplateId::AssigneeSelect,
        TemplateId::SegmentSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::AgentInit => "agent_init",
            TemplateId::CvSuggestions => "cv_suggestions",
            TemplateId::Summary => "summary",
            TemplateId::TaskTitle => "task_title",
            TemplateId::AssigneeSelect => "assignee_select",
            TemplateId::SegmentSelect => "segment_select",
        }
    }

    /// Message skeleton of the template: role and text per message.
    pub fn parts(self) -> &'static [(Role, &'static str)] {
        match self {
            TemplateId::AgentInit => &[(Role::System, AGENT_INIT), (Role::User, CONVERSATION_OPENING)],
            TemplateId::CvSuggestions => &[(Role::System, CV_SUGGESTIONS), (Role::User, CV_SUGGESTIONS_INPUT)],
            TemplateId::Summary => &[(Role::System, SUMMARY), (Role::User, SUMMARY_INPUT)],
            TemplateId::TaskTitle => &[(Role::System, TASK_TITLE_SYSTEM), (Role::User, TASK_TITLE_USER)],
            TemplateId::AssigneeSelect => &[(Role::System, ASSIGNEE_SYSTEM), (Role::User, ASSIGNEE_USER)],
            TemplateId::SegmentSelect => &[(Role::System, SEGMENT_SELECT), (Role::System, SEGMENT_SELECT_DOCUMENT)],
        }
    }

    /// Placeholders that may be bound to nothing.
    fn optional(self) -> &'static [&'static str] {
        match self {
            TemplateId::AgentInit => &["goal_text", "history"],
            _ => &[],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template id {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("missing template bindings: {}", missing.join(", "))]
pub struct RenderError {
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: BTreeMap<String, String>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.values.insert(name.to_owned(), value.into());
        self
    }

    pub fn set_opt(self, name: &str, value: Option<impl Into<String>>) -> Self {
        match value {
            Some(v) => self.set(name, v),
            None => self,
        }
    }
}

/// Substitutes `{name}` placeholders in `text`.
pub fn substitute(text: &str, bindings: &Bindings, optional: &[&str]) -> Result<String, RenderError> {
    let mut out = String::with_capacity(text.len());
    let mut missing = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')).unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            match bindings.values.get(name) {
                Some(v) => out.push_str(v),
                None if optional.contains(&name) => {}
                None => missing.push(name.to_owned()),
            }
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    if missing.is_empty() {
        Ok(out)
    } else {
        missing.sort();
        missing.dedup();
        Err(RenderError { missing })
    }
}

/// Renders every message of a template.
pub fn render(template: TemplateId, bindings: &Bindings) -> Result<Vec<ChatMessage>, RenderError> {
    let mut messages = Vec::new();
    let mut missing = Vec::new();
    for (role, text) in template.parts() {
        match substitute(text, bindings, template.optional()) {
            Ok(content) => messages.push(ChatMessage::new(*role, content)),
            Err(e) => missing.extend(e.missing),
        }
    }
    if missing.is_empty() {
        Ok(messages)
    } else {
        missing.sort();
        missing.dedup();
        Err(RenderError { missing })
    }
}

/// JSON with `", "` and `": "` separators, the layout CV sections are shown
/// to the model in.
pub fn spaced_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(spaced_json).collect();
            format!("[{}]", inner.join(", "))
        }
        Value::Object(map) => {
            let inner: Vec<String> = map
                .iter()
                .map(|(k, v)| format!("{}: {}", Value::String(k.clone()), spaced_json(v)))
                .collect();
            format!("{{{}}}", inner.join(", "))
        }
        other => other.to_string(),
    }
}

pub fn sections_json(sections: &IndexMap<String, Vec<String>>) -> String {
    spaced_json(&serde_json::to_value(sections).expect("string map serializes"))
}

pub fn string_list_json(items: &[String]) -> String {
    spaced_json(&serde_json::to_value(items).expect("string list serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_template_text_has_stray_placeholders() {
        // every `{name}` in a template is a real binding point; nothing else looks like one
        for t in TemplateId::ALL {
            for (_, text) in t.parts() {
                let r = substitute(text, &Bindings::new(), &[]);
                if let Err(e) = r {
                    for name in e.missing {
                        assert!(
                            [
                                "agent_name", "agent_role", "sections_json", "notes", "document_text", "goal_text",
                                "selected_text", "history", "request", "role", "section_name",
                                "current_suggestions", "description", "task_description", "agents_info", "task",
                            ]
                            .contains(&name.as_str()),
                            "{t}: unexpected placeholder {name}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn missing_bindings_are_listed() {
        let err = render(TemplateId::TaskTitle, &Bindings::new()).unwrap_err();
        assert_eq!(err.missing, vec!["description".to_string()]);
    }

    #[test]
    fn values_with_braces_are_not_rescanned() {
        let b = Bindings::new().set("description", "{notes} {x}");
        let msgs = render(TemplateId::TaskTitle, &b).unwrap();
        assert_eq!(msgs[1].content, "Generate a title for this task description: {notes} {x}");
    }

    #[test]
    fn spaced_json_layout() {
        let mut s = IndexMap::new();
        s.insert("expertise".to_string(), vec!["Creative ideas".to_string(), "Concept development".to_string()]);
        s.insert("skills".to_string(), vec![]);
        assert_eq!(sections_json(&s), r#"{"expertise": ["Creative ideas", "Concept development"], "skills": []}"#);
        assert_eq!(string_list_json(&[]), "[]");
    }

    #[test]
    fn template_ids_round_trip_through_names() {
        for t in TemplateId::ALL {
            assert_eq!(t.as_str().parse::<TemplateId>().unwrap(), t);
        }
    }
}
