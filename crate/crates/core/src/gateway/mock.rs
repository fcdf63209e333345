//! Scripted model client for deterministic tests and simulations.
//!
//! A script is an ordered list of rules. The first rule whose template and
//! matchers fit the request and whose use budget is not exhausted answers
//! it. Requests no rule answers are an error.
//!
//! ```toml
//! [[rule]]
//! template = "assignee_select"
//! contains = "Fix grammar"
//! response = '{"agent_id": "d1-a0", "confidence_rate": 0.9}'
//! times = 1
//! ```

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatRequest, ClientError, ModelClient, Role, TemplateId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Template the rule answers; `None` answers any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateId>,
    /// Substring of the whole rendered prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Substring of the first system message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    /// Substring of the last message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Simulated transport failure message, used instead of `response`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

impl MockRule {
    pub fn text(template: TemplateId, response: impl Into<String>) -> Self {
        Self {
            template: Some(template),
            contains: None,
            system_contains: None,
            last_contains: None,
            response: Some(response.into()),
            error: None,
            times: None,
        }
    }

    pub fn transport_error(template: TemplateId, message: impl Into<String>) -> Self {
        Self { response: None, error: Some(message.into()), ..Self::text(template, "") }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn system_containing(mut self, needle: impl Into<String>) -> Self {
        self.system_contains = Some(needle.into());
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.times = Some(n);
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        if self.template.is_some_and(|t| t != request.template) {
            return false;
        }
        if let Some(needle) = &self.contains {
            if !request.prompt_text().contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(needle) = &self.system_contains {
            let system = request.messages.iter().find(|m| m.role == Role::System);
            if !system.is_some_and(|m| m.content.contains(needle.as_str())) {
                return false;
            }
        }
        if let Some(needle) = &self.last_contains {
            if !request.messages.last().is_some_and(|m| m.content.contains(needle.as_str())) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Error)]
pub enum MockLoadError {
    #[error("reading mock script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing mock script: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("rule {index} needs exactly one of `response` or `error`")]
    Invalid { index: usize },
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, rename = "rule")]
    rules: Vec<MockRule>,
    #[serde(skip)]
    used: Mutex<Vec<u32>>,
}

impl Clone for MockScript {
    /// Clones start with fresh use counters.
    fn clone(&self) -> Self {
        Self::from_rules(self.rules.clone())
    }
}

impl PartialEq for MockScript {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules
    }
}

impl MockScript {
    pub fn from_rules(rules: Vec<MockRule>) -> Self {
        let used = Mutex::new(vec![0; rules.len()]);
        Self { rules, used }
    }

    pub fn parse(text: &str) -> Result<Self, MockLoadError> {
        let parsed: MockScript = toml::from_str(text)?;
        for (index, rule) in parsed.rules.iter().enumerate() {
            if rule.response.is_some() == rule.error.is_some() {
                return Err(MockLoadError::Invalid { index });
            }
        }
        Ok(Self::from_rules(parsed.rules))
    }

    pub fn load(path: &Path) -> Result<Self, MockLoadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MockLoadError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn rules(&self) -> &[MockRule] {
        &self.rules
    }

    pub fn push(&mut self, rule: MockRule) {
        self.rules.push(rule);
        self.used.get_mut().expect("mock counters poisoned").push(0);
    }

    /// Appends all rules of `other` after this script's rules.
    pub fn extend(&mut self, other: &MockScript) {
        for rule in &other.rules {
            self.push(rule.clone());
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mock script serializes")
    }
}

impl ModelClient for MockScript {
    fn send(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut used = self.used.lock().expect("mock counters poisoned");
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.times.is_some_and(|t| used[i] >= t) || !rule.matches(request) {
                continue;
            }
            used[i] += 1;
            return match (&rule.response, &rule.error) {
                (_, Some(err)) => Err(ClientError::Transport(err.clone())),
                (Some(text), None) => Ok(text.clone()),
                (None, None) => Err(ClientError::Unmatched { template: request.template }),
            };
        }
        Err(ClientError::Unmatched { template: request.template })
    }
}
