//! Structured-output parsing. Nothing reaches business logic without passing
//! one of these schemas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct SchemaError(pub String);

pub trait OutputSchema {
    type Output: Serialize;

    /// Short description used in the format reminder.
    fn expected(&self) -> &'static str;

    fn parse(&self, raw: &str) -> Result<Self::Output, SchemaError>;
}

/// Removes a surrounding Markdown code fence, if any.
pub fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

fn json_payload<'a>(raw: &'a str, open: char, close: char) -> Result<&'a str, SchemaError> {
    let t = strip_fence(raw);
    let start = t.find(open).ok_or_else(|| SchemaError(format!("no JSON value starting with '{open}'")))?;
    let end = t.rfind(close).filter(|&e| e > start).ok_or_else(|| SchemaError(format!("unterminated JSON value, expected '{close}'")))?;
    Ok(&t[start..=end])
}

fn check_rate(rate: f64) -> Result<f64, SchemaError> {
    if rate.is_finite() && (0.0..=1.0).contains(&rate) {
        Ok(rate)
    } else {
        Err(SchemaError(format!("confidence_rate {rate} outside [0, 1]")))
    }
}

/// Free text. Never fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlainText;

impl OutputSchema for PlainText {
    type Output = String;

    fn expected(&self) -> &'static str {
        "plain text"
    }

    fn parse(&self, raw: &str) -> Result<String, SchemaError> {
        Ok(raw.trim().to_owned())
    }
}

/// A JSON array of strings.
#[derive(Clone, Copy, Debug, Default)]
pub struct StringList;

impl OutputSchema for StringList {
    type Output = Vec<String>;

    fn expected(&self) -> &'static str {
        "a JSON array of strings"
    }

    fn parse(&self, raw: &str) -> Result<Vec<String>, SchemaError> {
        let payload = json_payload(raw, '[', ']')?;
        serde_json::from_str(payload).map_err(|e| SchemaError(format!("not a list of strings: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssigneeChoice {
    pub agent_id: String,
    pub confidence_rate: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AssigneeSchema;

impl OutputSchema for AssigneeSchema {
    type Output = AssigneeChoice;

    fn expected(&self) -> &'static str {
        "a JSON object with string agent_id and numeric confidence_rate between 0 and 1"
    }

    fn parse(&self, raw: &str) -> Result<AssigneeChoice, SchemaError> {
        #[derive(Deserialize)]
        struct Wire {
            agent_id: serde_json::Value,
            confidence_rate: f64,
        }
        let payload = json_payload(raw, '{', '}')?;
        let wire: Wire = serde_json::from_str(payload).map_err(|e| SchemaError(format!("bad assignee object: {e}")))?;
        let agent_id = match wire.agent_id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(SchemaError(format!("agent_id must be a string, got {other}"))),
        };
        Ok(AssigneeChoice { agent_id, confidence_rate: check_rate(wire.confidence_rate)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentProposal {
    pub selected_text: String,
    pub selected_text_sentence: String,
    pub reason: String,
    pub confidence_rate: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SegmentSchema;

impl OutputSchema for SegmentSchema {
    type Output = Vec<SegmentProposal>;

    fn expected(&self) -> &'static str {
        "a JSON array of objects with selected_text, selected_text_sentence, reason and confidence_rate (0 to 1)"
    }

    fn parse(&self, raw: &str) -> Result<Vec<SegmentProposal>, SchemaError> {
        let payload = json_payload(raw, '[', ']')?;
        let proposals: Vec<SegmentProposal> =
            serde_json::from_str(payload).map_err(|e| SchemaError(format!("bad segment list: {e}")))?;
        for p in &proposals {
            check_rate(p.confidence_rate)?;
            if p.selected_text.is_empty() {
                return Err(SchemaError("selected_text must be non-empty".into()));
            }
        }
        Ok(proposals)
    }
}
