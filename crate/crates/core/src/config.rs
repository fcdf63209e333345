//! Service configuration, read from TOML with defaults for every key.
//!
//! ```toml
//! [trigger]
//! interval_minutes = 5
//! inactivity_minutes = 2
//! collab_edit_threshold = 2
//!
//! [comments]
//! max_agent_turns = 4
//! agent_mentions_join = false
//!
//! [persistence]
//! checkpoint_interval_s = 60
//!
//! [gateway]
//! transport_retries = 2
//! backoff_base_ms = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comments::DEFAULT_MAX_AGENT_TURNS;
use crate::gateway::RetryPolicy;
use crate::triggers::TriggerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommentConfig {
    pub max_agent_turns: usize,
    /// Let agents pull other agents into a conversation by mentioning them.
    pub agent_mentions_join: bool,
}

impl Default for CommentConfig {
    fn default() -> Self {
        Self { max_agent_turns: DEFAULT_MAX_AGENT_TURNS, agent_mentions_join: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersistenceConfig {
    pub checkpoint_interval_s: u64,
}

impl Default for PersistenceConfig {
    fn default() -> Self {
        Self { checkpoint_interval_s: 60 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub trigger: TriggerConfig,
    pub comments: CommentConfig,
    pub persistence: PersistenceConfig,
    pub gateway: RetryPolicy,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), String> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| format!("expected key=value, got {assignment:?}"))?;
        let (key, value) = (key.trim(), value.trim());
        let num = || value.parse::<u64>().map_err(|e| format!("{key}: {e}"));
        match key {
            "trigger.interval_minutes" => self.trigger.interval_minutes = num()?,
            "trigger.inactivity_minutes" => self.trigger.inactivity_minutes = num()?,
            "trigger.collab_edit_threshold" => self.trigger.collab_edit_threshold = num()? as usize,
            "comments.max_agent_turns" => self.comments.max_agent_turns = num()? as usize,
            "comments.agent_mentions_join" => {
                self.comments.agent_mentions_join = value.parse().map_err(|e| format!("{key}: {e}"))?
            }
            "persistence.checkpoint_interval_s" => self.persistence.checkpoint_interval_s = num()?,
            "gateway.transport_retries" => self.gateway.transport_retries = num()? as u32,
            "gateway.backoff_base_ms" => self.gateway.backoff_base_ms = num()?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let c = Config::parse("[trigger]\ncollab_edit_threshold = 3\n").unwrap();
        assert_eq!(c.trigger.collab_edit_threshold, 3);
        assert_eq!(c.trigger.interval_minutes, 5);
        assert_eq!(c.trigger.inactivity_minutes, 2);
        assert_eq!(c.comments.max_agent_turns, 4);
        assert_eq!(c.persistence.checkpoint_interval_s, 60);
    }

    #[test]
    fn overrides() {
        let mut c = Config::default();
        c.set("comments.agent_mentions_join = true").unwrap();
        assert!(c.comments.agent_mentions_join);
        assert!(c.set("trigger.nope=1").is_err());
    }
}
