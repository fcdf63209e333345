//! Autonomous trigger evaluation over a monotonic (real or virtual) clock.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::ids::UserId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    ShortIntervals,
    Inactivity,
    AllOffline,
    OnSave,
    CollaborativeEdits,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 5] = [
        TriggerKind::ShortIntervals,
        TriggerKind::Inactivity,
        TriggerKind::AllOffline,
        TriggerKind::OnSave,
        TriggerKind::CollaborativeEdits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerKind::ShortIntervals => "short_intervals",
            TriggerKind::Inactivity => "inactivity",
            TriggerKind::AllOffline => "all_offline",
            TriggerKind::OnSave => "on_save",
            TriggerKind::CollaborativeEdits => "collaborative_edits",
        }
    }
}

impl fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TriggerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TriggerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown trigger {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub interval_minutes: u64,
    pub inactivity_minutes: u64,
    /// Distinct contributors needed to fire `collaborative_edits`.
    pub collab_edit_threshold: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self { interval_minutes: 5, inactivity_minutes: 2, collab_edit_threshold: 2 }
    }
}

impl TriggerConfig {
    fn interval(&self) -> Duration {
        Duration::from_secs(self.interval_minutes * 60)
    }

    fn inactivity(&self) -> Duration {
        Duration::from_secs(self.inactivity_minutes * 60)
    }
}

/// A trigger firing and the virtual time it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fired {
    pub at: Timestamp,
    pub kind: TriggerKind,
}

/// Session-level activity the engine reacts to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriggerEvent {
    /// A user came online; `online_before` counts users already present.
    Join { online_before: usize },
    /// A user went offline; `online_after` counts users still present.
    Leave { online_after: usize },
    Edit,
    Comment,
    Save,
    Tick,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerState {
    /// Next firing of the interval job, if one is scheduled.
    pub interval_due: Option<Timestamp>,
    pub inactivity_deadline: Option<Timestamp>,
}

impl TriggerState {
    pub fn interval_job_scheduled(&self) -> bool {
        self.interval_due.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEngine {
    config: TriggerConfig,
    state: TriggerState,
}

impl TriggerEngine {
    pub fn new(config: TriggerConfig) -> Self {
        Self { config, state: TriggerState::default() }
    }

    pub fn config(&self) -> &TriggerConfig {
        &self.config
    }

    pub fn state(&self) -> &TriggerState {
        &self.state
    }

    /// Earliest pending timer.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        match (self.state.interval_due, self.state.inactivity_deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes one event at `now`. Timers due at or before `now` fire
    /// first, in time order. `contributors` is the document's contributor
    /// set, cleared here when the collaborative-edit trigger fires.
    pub fn on_event(&mut self, now: Timestamp, event: TriggerEvent, contributors: &mut BTreeSet<UserId>) -> Vec<Fired> {
        let mut fired = self.advance(now);
        match event {
            TriggerEvent::Join { online_before } => {
                if online_before == 0 && self.state.interval_due.is_none() {
                    self.state.interval_due = Some(now.saturating_add(self.config.interval()));
                }
            }
            TriggerEvent::Leave { online_after } => {
                if online_after == 0 {
                    self.state.interval_due = None;
                    fired.push(Fired { at: now, kind: TriggerKind::AllOffline });
                }
            }
            TriggerEvent::Edit => {
                self.touch(now);
                if contributors.len() >= self.config.collab_edit_threshold.max(1) {
                    contributors.clear();
                    fired.push(Fired { at: now, kind: TriggerKind::CollaborativeEdits });
                }
            }
            TriggerEvent::Comment => self.touch(now),
            TriggerEvent::Save => fired.push(Fired { at: now, kind: TriggerKind::OnSave }),
            TriggerEvent::Tick => {}
        }
        fired
    }

    fn touch(&mut self, now: Timestamp) {
        self.state.inactivity_deadline = Some(now.saturating_add(self.config.inactivity()));
    }

    /// Fires every timer due at or before `now`.
    pub fn advance(&mut self, now: Timestamp) -> Vec<Fired> {
        let mut fired = Vec::new();
        loop {
            let due = self.next_deadline().filter(|d| *d <= now);
            let Some(at) = due else { break };
            if self.state.inactivity_deadline == Some(at) {
                self.state.inactivity_deadline = None;
                fired.push(Fired { at, kind: TriggerKind::Inactivity });
            } else {
                self.state.interval_due = Some(at.saturating_add(self.config.interval()));
                fired.push(Fired { at, kind: TriggerKind::ShortIntervals });
            }
        }
        fired
    }
}
