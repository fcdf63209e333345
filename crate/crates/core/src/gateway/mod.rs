//! Provider-agnostic model access with schema validation and retries.

pub mod mock;
pub mod schema;
pub mod templates;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{MockRule, MockScript};
pub use schema::{AssigneeChoice, OutputSchema, SchemaError, SegmentProposal};
pub use templates::{render, Bindings, ChatMessage, RenderError, Role, TemplateId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn new(template: TemplateId, messages: Vec<ChatMessage>) -> Self {
        Self { template, messages }
    }

    /// All message contents joined, the text mock matchers look at.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    /// A scripted client had no rule for the request.
    #[error("no mock rule matches {template} request")]
    Unmatched { template: TemplateId },
}

/// One backend that turns a chat request into raw completion text.
pub trait ModelClient: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("model unavailable after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("model output failed validation: {0}")]
    Parse(String),
    #[error(transparent)]
    Unmatched(ClientError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Extra attempts after a transport failure.
    pub transport_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { transport_retries: 2, backoff_base_ms: 500 }
    }
}

impl RetryPolicy {
    pub fn immediate(transport_retries: u32) -> Self {
        Self { transport_retries, backoff_base_ms: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum ExchangeOutcome {
    Parsed(serde_json::Value),
    ParseError(String),
    TransportError(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub template: TemplateId,
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub raw_response: Option<String>,
    pub outcome: ExchangeOutcome,
}

pub struct Gateway {
    client: Arc<dyn ModelClient>,
    model_id: String,
    policy: RetryPolicy,
    log: Mutex<Vec<ChatExchange>>,
}

impl Gateway {
    pub fn new(client: Arc<dyn ModelClient>, model_id: impl Into<String>, policy: RetryPolicy) -> Self {
        Self { client, model_id: model_id.into(), policy, log: Mutex::new(Vec::new()) }
    }

    /// Gateway over a scripted mock, no backoff.
    pub fn mock(script: MockScript) -> Self {
        Self::new(Arc::new(script), "mock", RetryPolicy::immediate(1))
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.log.lock().expect("exchange log poisoned").clone()
    }

    pub fn exchange_count(&self) -> usize {
        self.log.lock().expect("exchange log poisoned").len()
    }

    fn record(&self, exchange: ChatExchange) {
        self.log.lock().expect("exchange log poisoned").push(exchange);
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.client.send(request) {
                Ok(raw) => return Ok(raw),
                Err(e @ ClientError::Unmatched { .. }) => {
                    self.record(ChatExchange {
                        template: request.template,
                        model_id: self.model_id.clone(),
                        messages: request.messages.clone(),
                        raw_response: None,
                        outcome: ExchangeOutcome::TransportError(e.to_string()),
                    });
                    return Err(GatewayError::Unmatched(e));
                }
                Err(ClientError::Transport(message)) => {
                    self.record(ChatExchange {
                        template: request.template,
                        model_id: self.model_id.clone(),
                        messages: request.messages.clone(),
                        raw_response: None,
                        outcome: ExchangeOutcome::TransportError(message.clone()),
                    });
                    if attempt > self.policy.transport_retries {
                        return Err(GatewayError::Transport { attempts: attempt, message });
                    }
                    let wait = self.policy.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if wait > 0 {
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
    }

    /// Sends a request and validates the reply. A schema failure is retried
    /// once with a format reminder appended to the conversation.
    pub fn complete<S: OutputSchema>(&self, request: ChatRequest, schema: &S) -> Result<S::Output, GatewayError> {
        let mut request = request;
        let mut last_problem = String::new();
        for round in 0..2 {
            let raw = self.send_with_retries(&request)?;
            match schema.parse(&raw) {
                Ok(value) => {
                    self.record(ChatExchange {
                        template: request.template,
                        model_id: self.model_id.clone(),
                        messages: request.messages.clone(),
                        raw_response: Some(raw),
                        outcome: ExchangeOutcome::Parsed(serde_json::to_value(&value).unwrap_or_default()),
                    });
                    return Ok(value);
                }
                Err(SchemaError(problem)) => {
                    self.record(ChatExchange {
                        template: request.template,
                        model_id: self.model_id.clone(),
                        messages: request.messages.clone(),
                        raw_response: Some(raw.clone()),
                        outcome: ExchangeOutcome::ParseError(problem.clone()),
                    });
                    if round == 0 {
                        let reminder = templates::substitute(
                            templates::FORMAT_REMINDER,
                            &Bindings::new().set("problem", problem.as_str()).set("expected", schema.expected()),
                            &[],
                        )?;
                        request.messages.push(ChatMessage::new(Role::Assistant, raw));
                        request.messages.push(ChatMessage::new(Role::User, reminder));
                    }
                    last_problem = problem;
                }
            }
        }
        Err(GatewayError::Parse(last_problem))
    }

    pub fn complete_template<S: OutputSchema>(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        schema: &S,
    ) -> Result<S::Output, GatewayError> {
        let messages = render(template, bindings)?;
        self.complete(ChatRequest::new(template, messages), schema)
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("model_id", &self.model_id).field("policy", &self.policy).finish()
    }
}
