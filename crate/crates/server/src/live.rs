//! OpenAI-compatible chat completion client.

use std::time::Duration;

use cowrite::gateway::{ChatRequest, ClientError, ModelClient, Role};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct LiveSettings {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl LiveSettings {
    /// Reads MODEL_ENDPOINT, MODEL_API_KEY, MODEL_NAME and GATEWAY_TIMEOUT_S.
    /// Returns `None` without an endpoint or model name.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("MODEL_ENDPOINT").ok().filter(|s| !s.is_empty())?;
        let model = std::env::var("MODEL_NAME").ok().filter(|s| !s.is_empty())?;
        let timeout = std::env::var("GATEWAY_TIMEOUT_S").ok().and_then(|s| s.parse().ok()).unwrap_or(60);
        Some(Self {
            endpoint,
            api_key: std::env::var("MODEL_API_KEY").ok().filter(|s| !s.is_empty()),
            model,
            timeout: Duration::from_secs(timeout),
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: Option<String>,
}

pub struct LiveClient {
    settings: LiveSettings,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn new(settings: LiveSettings) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder().timeout(settings.timeout).build().map_err(|e| e.to_string())?;
        Ok(Self { settings, http })
    }

    pub fn model(&self) -> &str {
        &self.settings.model
    }
}

fn role(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

impl ModelClient for LiveClient {
    fn send(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = WireRequest {
            model: &self.settings.model,
            messages: request.messages.iter().map(|m| WireMessage { role: role(m.role), content: &m.content }).collect(),
        };
        let url = format!("{}/chat/completions", self.settings.endpoint.trim_end_matches('/'));
        let mut req = self.http.post(url).json(&body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ClientError::Transport(format!("{status}: {}", text.chars().take(200).collect::<String>())));
        }
        let parsed: WireResponse = resp.json().map_err(|e| ClientError::Transport(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Transport("response without content".into()))
    }
}
