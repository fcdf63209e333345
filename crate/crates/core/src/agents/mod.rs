//! Shared agent profiles.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::gateway::schema::{PlainText, StringList};
use crate::gateway::templates::{sections_json, string_list_json};
use crate::gateway::{Bindings, Gateway, GatewayError, TemplateId};
use crate::ids::{AgentId, DocId, IdAllocator, RunId, UserId};

pub const DEFAULT_HANDLE: &str = "aiAuthor";
pub const DEFAULT_NAME: &str = "AI Author";
const DEFAULT_ROLE: &str = "General writing assistant that helps with any part of the document";
pub const SEEDED_SECTIONS: [&str; 2] = ["expertise", "skills"];
pub const MAX_SUMMARY_SENTENCES: usize = 5;
pub const MAX_SUGGESTION_WORDS: usize = 2;
pub const SUGGESTION_BATCH: usize = 3;

const BUILTIN_PRESETS: &str = include_str!("presets.toml");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("handle taken: {0}")]
    HandleTaken(String),
    #[error("agent name must not be empty")]
    EmptyName,
    #[error("cannot derive a handle from name {0:?}")]
    InvalidHandle(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown preset {0}")]
    UnknownPreset(String),
    #[error("the default agent cannot be deleted")]
    DefaultUndeletable,
    #[error("unknown section {0:?}")]
    UnknownSection(String),
    #[error("suggestion unavailable: {0}")]
    SuggestionUnavailable(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRef {
    pub run_id: RunId,
    pub started_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub handle: String,
    pub name: String,
    pub role: String,
    pub sections: IndexMap<String, Vec<String>>,
    pub notes: Vec<String>,
    pub summary: String,
    /// Profile version the summary was generated from.
    pub summary_version: u64,
    /// Set when the last summary generation failed.
    pub summary_stale: bool,
    pub version: u64,
    pub creator: Option<UserId>,
    pub last_editor: Option<UserId>,
    pub is_default: bool,
    /// Drop leading conversational filler ("Sure, here's ...") from replies.
    pub strip_filler: bool,
    pub run_history: Vec<RunRef>,
}

impl AgentProfile {
    pub fn mention(&self) -> String {
        format!("@{}", self.handle)
    }

    pub fn summary_is_fresh(&self) -> bool {
        self.summary_version == self.version && !self.summary_stale
    }
}

/// Editable fields of a profile.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDraft {
    pub name: String,
    #[serde(default)]
    pub role: String,
    #[serde(default)]
    pub sections: IndexMap<String, Vec<String>>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub strip_filler: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPreset {
    pub id: String,
    pub name: String,
    pub role: String,
    #[serde(default)]
    pub sections: IndexMap<String, Vec<String>>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub strip_filler: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresetCatalog {
    #[serde(rename = "preset")]
    pub presets: Vec<AgentPreset>,
}

impl PresetCatalog {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PRESETS).expect("built-in presets parse")
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| e.to_string())
    }

    pub fn get(&self, id: &str) -> Option<&AgentPreset> {
        self.presets.iter().find(|p| p.id == id)
    }
}

/// Lowercased ASCII alphanumerics of a display name.
pub fn derive_handle(name: &str) -> String {
    name.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegistry {
    agents: IndexMap<AgentId, AgentProfile>,
}

impl AgentRegistry {
    /// Registry holding only the default agent.
    pub fn new(doc: &DocId, ids: &mut IdAllocator) -> Self {
        let agent_id = AgentId::new(ids.next(doc, "a"));
        let mut sections = IndexMap::new();
        for s in SEEDED_SECTIONS {
            sections.insert(s.to_owned(), Vec::new());
        }
        let default = AgentProfile {
            agent_id: agent_id.clone(),
            handle: DEFAULT_HANDLE.to_owned(),
            name: DEFAULT_NAME.to_owned(),
            role: DEFAULT_ROLE.to_owned(),
            sections,
            notes: Vec::new(),
            summary: String::new(),
            summary_version: 0,
            summary_stale: false,
            version: 1,
            creator: None,
            last_editor: None,
            is_default: true,
            strip_filler: false,
            run_history: Vec::new(),
        };
        let mut agents = IndexMap::new();
        agents.insert(agent_id, default);
        Self { agents }
    }

    pub fn iter(&self) -> impl Iterator<Item = &AgentProfile> {
        self.agents.values()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn get(&self, id: &AgentId) -> Result<&AgentProfile, AgentError> {
        self.agents.get(id).ok_or_else(|| AgentError::UnknownAgent(id.clone()))
    }

    pub fn get_mut(&mut self, id: &AgentId) -> Result<&mut AgentProfile, AgentError> {
        self.agents.get_mut(id).ok_or_else(|| AgentError::UnknownAgent(id.clone()))
    }

    pub fn default_agent(&self) -> &AgentProfile {
        self.agents.values().find(|a| a.is_default).expect("default agent always exists")
    }

    /// Case-insensitive handle lookup.
    pub fn by_handle(&self, handle: &str) -> Option<&AgentProfile> {
        self.agents.values().find(|a| a.handle.eq_ignore_ascii_case(handle))
    }

    fn handle_free(&self, handle: &str) -> bool {
        self.by_handle(handle).is_none()
    }

    fn insert(&mut self, ids: &mut IdAllocator, doc: &DocId, handle: String, draft: AgentDraft, creator: &UserId) -> AgentId {
        let agent_id = AgentId::new(ids.next(doc, "a"));
        let mut sections = IndexMap::new();
        for s in SEEDED_SECTIONS {
            sections.insert(s.to_owned(), Vec::new());
        }
        for (k, v) in draft.sections {
            sections.insert(k, v);
        }
        let profile = AgentProfile {
            agent_id: agent_id.clone(),
            handle,
            name: draft.name.trim().to_owned(),
            role: draft.role,
            sections,
            notes: draft.notes,
            summary: String::new(),
            summary_version: 0,
            summary_stale: false,
            version: 1,
            creator: Some(creator.clone()),
            last_editor: Some(creator.clone()),
            is_default: false,
            strip_filler: draft.strip_filler,
            run_history: Vec::new(),
        };
        self.agents.insert(agent_id.clone(), profile);
        agent_id
    }

    pub fn create(
        &mut self,
        ids: &mut IdAllocator,
        doc: &DocId,
        creator: &UserId,
        draft: AgentDraft,
    ) -> Result<AgentId, AgentError> {
        if draft.name.trim().is_empty() {
            return Err(AgentError::EmptyName);
        }
        let handle = derive_handle(&draft.name);
        if handle.is_empty() {
            return Err(AgentError::InvalidHandle(draft.name));
        }
        if !self.handle_free(&handle) {
            return Err(AgentError::HandleTaken(handle));
        }
        Ok(self.insert(ids, doc, handle, draft, creator))
    }

    /// Copies a preset in; clashing handles get a numeric suffix (`reviewer2`).
    pub fn instantiate_preset(
        &mut self,
        ids: &mut IdAllocator,
        doc: &DocId,
        creator: &UserId,
        catalog: &PresetCatalog,
        preset_id: &str,
    ) -> Result<AgentId, AgentError> {
        let preset = catalog.get(preset_id).ok_or_else(|| AgentError::UnknownPreset(preset_id.to_owned()))?;
        let base = derive_handle(&preset.name);
        let mut handle = base.clone();
        let mut n = 2;
        while !self.handle_free(&handle) {
            handle = format!("{base}{n}");
            n += 1;
        }
        let draft = AgentDraft {
            name: preset.name.clone(),
            role: preset.role.clone(),
            sections: preset.sections.clone(),
            notes: preset.notes.clone(),
            strip_filler: preset.strip_filler,
        };
        Ok(self.insert(ids, doc, handle, draft, creator))
    }

    /// Saves new profile content. The handle stays fixed so existing
    /// mentions keep resolving.
    pub fn update(&mut self, id: &AgentId, editor: &UserId, draft: AgentDraft) -> Result<u64, AgentError> {
        if draft.name.trim().is_empty() {
            return Err(AgentError::EmptyName);
        }
        let profile = self.get_mut(id)?;
        profile.name = draft.name.trim().to_owned();
        profile.role = draft.role;
        profile.sections = draft.sections;
        profile.notes = draft.notes;
        profile.strip_filler = draft.strip_filler;
        profile.last_editor = Some(editor.clone());
        profile.version += 1;
        Ok(profile.version)
    }

    pub fn delete(&mut self, id: &AgentId) -> Result<AgentProfile, AgentError> {
        if self.get(id)?.is_default {
            return Err(AgentError::DefaultUndeletable);
        }
        Ok(self.agents.shift_remove(id).expect("checked above"))
    }

    /// Stores a generated summary if it still matches the profile version.
    pub fn apply_summary(&mut self, id: &AgentId, for_version: u64, summary: Result<String, String>) -> bool {
        let Ok(profile) = self.get_mut(id) else {
            return false;
        };
        if profile.version != for_version {
            return false;
        }
        match summary {
            Ok(text) => {
                profile.summary = clamp_summary(&text);
                profile.summary_version = for_version;
                profile.summary_stale = false;
            }
            Err(_) => profile.summary_stale = true,
        }
        true
    }

    /// Appends a run to the agent's history, ordered by start time.
    pub fn record_run(&mut self, id: &AgentId, run_id: RunId, started_at: Timestamp) -> Result<(), AgentError> {
        let history = &mut self.get_mut(id)?.run_history;
        let at = history.partition_point(|r| (r.started_at, &r.run_id) <= (started_at, &run_id));
        history.insert(at, RunRef { run_id, started_at });
        Ok(())
    }
}

/// Cuts a summary after its fifth sentence.
pub fn clamp_summary(text: &str) -> String {
    let text = text.trim();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i].1, '.' | '!' | '?') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1].1, '.' | '!' | '?' | '"' | '\'' | ')') {
                j += 1;
            }
            let at_break = j + 1 == chars.len() || chars[j + 1].1.is_whitespace();
            if at_break {
                sentences += 1;
                if sentences == MAX_SUMMARY_SENTENCES {
                    let end = chars[j].0 + chars[j].1.len_utf8();
                    return text[..end].to_owned();
                }
            }
            i = j;
        }
        i += 1;
    }
    text.to_owned()
}

/// Number of sentence terminators followed by a break or the end.
pub fn sentence_count(text: &str) -> usize {
    let text = text.trim();
    let chars: Vec<char> = text.chars().collect();
    let mut n = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1], '.' | '!' | '?' | '"' | '\'' | ')') {
                j += 1;
            }
            if j + 1 == chars.len() || chars[j + 1].is_whitespace() {
                n += 1;
            }
            i = j;
        }
        i += 1;
    }
    n
}

pub fn word_count(value: &str) -> usize {
    value.split_whitespace().count()
}

/// Applies the suggestion contract: exactly three short, new, distinct
/// values, or nothing.
pub fn validate_suggestions(raw: Vec<String>, existing: &[String], current: &[String]) -> Vec<String> {
    let taken = |v: &str| {
        existing.iter().chain(current).any(|e| e.trim().eq_ignore_ascii_case(v))
    };
    let mut kept: Vec<String> = Vec::new();
    for value in raw {
        let value = value.trim().to_owned();
        let words = word_count(&value);
        if words == 0 || words > MAX_SUGGESTION_WORDS || taken(&value) {
            continue;
        }
        if kept.iter().any(|k| k.eq_ignore_ascii_case(&value)) {
            continue;
        }
        kept.push(value);
    }
    if kept.len() < SUGGESTION_BATCH {
        return Vec::new();
    }
    kept.truncate(SUGGESTION_BATCH);
    kept
}

pub fn suggestion_bindings(agent: &AgentProfile, section: &str, current: &[String]) -> Bindings {
    Bindings::new()
        .set("role", agent.role.as_str())
        .set("section_name", section)
        .set("sections_json", sections_json(&agent.sections))
        .set("current_suggestions", string_list_json(current))
}

pub fn suggest_section_values(
    gateway: &Gateway,
    agent: &AgentProfile,
    section: &str,
    current: &[String],
) -> Result<Vec<String>, AgentError> {
    let existing = agent.sections.get(section).ok_or_else(|| AgentError::UnknownSection(section.to_owned()))?;
    let raw = match gateway.complete_template(
        TemplateId::CvSuggestions,
        &suggestion_bindings(agent, section, current),
        &StringList,
    ) {
        Ok(raw) => raw,
        // unparseable output is non-compliant, which the contract maps to no suggestions
        Err(GatewayError::Parse(_)) => return Ok(Vec::new()),
        Err(e) => return Err(AgentError::SuggestionUnavailable(e.to_string())),
    };
    Ok(validate_suggestions(raw, existing, current))
}

pub fn summary_bindings(agent: &AgentProfile) -> Bindings {
    Bindings::new()
        .set("role", agent.role.as_str())
        .set("sections_json", sections_json(&agent.sections))
        .set("notes", string_list_json(&agent.notes))
}

pub fn generate_summary(gateway: &Gateway, agent: &AgentProfile) -> Result<String, GatewayError> {
    let text = gateway.complete_template(TemplateId::Summary, &summary_bindings(agent), &PlainText)?;
    Ok(clamp_summary(&text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockRule, MockScript};

    fn registry() -> (AgentRegistry, IdAllocator, DocId) {
        let doc = DocId::new("d1");
        let mut ids = IdAllocator::default();
        let reg = AgentRegistry::new(&doc, &mut ids);
        (reg, ids, doc)
    }

    fn brainstormer() -> AgentDraft {
        let mut sections = IndexMap::new();
        sections.insert("expertise".into(), vec!["Creative ideas".into(), "Concept development".into()]);
        AgentDraft { name: "Brainstormer".into(), role: "Comes up with ideas".into(), sections, ..Default::default() }
    }

    #[test]
    fn default_agent_exists_and_is_permanent() {
        let (mut reg, _, _) = registry();
        let d = reg.default_agent().clone();
        assert_eq!(d.handle, "aiAuthor");
        assert_eq!(d.name, "AI Author");
        assert_eq!(reg.delete(&d.agent_id), Err(AgentError::DefaultUndeletable));
        assert!(reg.by_handle("aiauthor").is_some());
    }

    #[test]
    fn create_derives_handle_and_rejects_duplicates() {
        let (mut reg, mut ids, doc) = registry();
        let alice = UserId::new("u1");
        let id = reg.create(&mut ids, &doc, &alice, brainstormer()).unwrap();
        let p = reg.get(&id).unwrap();
        assert_eq!(p.handle, "brainstormer");
        assert_eq!(p.sections.keys().collect::<Vec<_>>(), vec!["expertise", "skills"]);
        assert_eq!(
            reg.create(&mut ids, &doc, &alice, brainstormer()),
            Err(AgentError::HandleTaken("brainstormer".into()))
        );
        let empty = AgentDraft { name: "  ".into(), ..Default::default() };
        assert_eq!(reg.create(&mut ids, &doc, &alice, empty), Err(AgentError::EmptyName));
    }

    #[test]
    fn all_empty_profile_is_valid() {
        let (mut reg, mut ids, doc) = registry();
        let draft = AgentDraft { name: "Blank".into(), ..Default::default() };
        assert!(reg.create(&mut ids, &doc, &UserId::new("u1"), draft).is_ok());
    }

    #[test]
    fn presets_are_disambiguated() {
        let (mut reg, mut ids, doc) = registry();
        let catalog = PresetCatalog::builtin();
        assert_eq!(catalog.presets.len(), 4);
        let u = UserId::new("u1");
        let a = reg.instantiate_preset(&mut ids, &doc, &u, &catalog, "reviewer").unwrap();
        let b = reg.instantiate_preset(&mut ids, &doc, &u, &catalog, "reviewer").unwrap();
        assert_eq!(reg.get(&a).unwrap().role, catalog.get("reviewer").unwrap().role);
        assert_eq!(reg.get(&a).unwrap().handle, "reviewer");
        assert_eq!(reg.get(&b).unwrap().handle, "reviewer2");
        assert_eq!(
            reg.instantiate_preset(&mut ids, &doc, &u, &catalog, "poet"),
            Err(AgentError::UnknownPreset("poet".into()))
        );
    }

    #[test]
    fn suggestion_contract() {
        let existing = vec!["Creative ideas".to_string()];
        let ok = validate_suggestions(
            vec!["Storytelling".into(), "Visual thinking".into(), "Mind mapping".into()],
            &existing,
            &[],
        );
        assert_eq!(ok.len(), 3);
        assert!(validate_suggestions(vec!["A".into(), "B".into()], &existing, &[]).is_empty());
        let dup = validate_suggestions(
            vec!["Storytelling".into(), "Creative ideas".into(), "Mind mapping".into()],
            &existing,
            &[],
        );
        assert!(dup.is_empty());
        let long = validate_suggestions(
            vec!["Storytelling".into(), "Very long suggestion here".into(), "Mind mapping".into()],
            &existing,
            &[],
        );
        assert!(long.is_empty());
        let hyphen = validate_suggestions(
            vec!["Problem-solving skills".into(), "Ideation".into(), "Sketching".into()],
            &[],
            &["Drafting".into()],
        );
        assert_eq!(hyphen.len(), 3);
    }

    #[test]
    fn summary_is_clamped_to_five_sentences() {
        let seven = "One. Two. Three. Four. Five. Six. Seven.";
        assert_eq!(clamp_summary(seven), "One. Two. Three. Four. Five.");
        assert_eq!(sentence_count(&clamp_summary(seven)), 5);
        assert_eq!(clamp_summary(""), "");
        assert_eq!(sentence_count("Really?! Yes... \"Done.\" Fine"), 3);
    }

    #[test]
    fn summary_for_stale_version_is_dropped() {
        let (mut reg, mut ids, doc) = registry();
        let u = UserId::new("u1");
        let id = reg.create(&mut ids, &doc, &u, brainstormer()).unwrap();
        reg.update(&id, &u, brainstormer()).unwrap();
        assert!(!reg.apply_summary(&id, 1, Ok("Old.".into())));
        assert!(reg.apply_summary(&id, 2, Ok("New.".into())));
        assert!(reg.get(&id).unwrap().summary_is_fresh());
        reg.update(&id, &u, brainstormer()).unwrap();
        assert!(reg.apply_summary(&id, 3, Err("down".into())));
        let p = reg.get(&id).unwrap();
        assert_eq!(p.summary, "New.");
        assert!(p.summary_stale);
    }

    #[test]
    fn runs_are_ordered_by_start() {
        let (mut reg, _, _) = registry();
        let id = reg.default_agent().agent_id.clone();
        reg.record_run(&id, RunId::new("d1-r2"), Timestamp(20)).unwrap();
        reg.record_run(&id, RunId::new("d1-r1"), Timestamp(10)).unwrap();
        let order: Vec<_> = reg.get(&id).unwrap().run_history.iter().map(|r| r.run_id.0.clone()).collect();
        assert_eq!(order, vec!["d1-r1", "d1-r2"]);
    }

    #[test]
    fn suggestions_through_gateway() {
        let (mut reg, mut ids, doc) = registry();
        let id = reg.create(&mut ids, &doc, &UserId::new("u1"), brainstormer()).unwrap();
        let agent = reg.get(&id).unwrap().clone();
        let g = Gateway::mock(MockScript::from_rules(vec![
            MockRule::text(TemplateId::CvSuggestions, r#"["Storytelling", "Mind mapping", "Ideation"]"#).times(1),
            MockRule::text(TemplateId::CvSuggestions, r#"["Storytelling", "Mind mapping"]"#),
        ]));
        let got = suggest_section_values(&g, &agent, "expertise", &[]).unwrap();
        assert_eq!(got, vec!["Storytelling", "Mind mapping", "Ideation"]);
        assert!(suggest_section_values(&g, &agent, "expertise", &[]).unwrap().is_empty());
        assert_eq!(
            suggest_section_values(&g, &agent, "hobbies", &[]),
            Err(AgentError::UnknownSection("hobbies".into()))
        );
        let prompt = &g.exchanges()[0].messages[1].content;
        assert!(prompt.contains("section_name: expertise"));
        assert!(prompt.contains(r#"{"expertise": ["Creative ideas", "Concept development"], "skills": []}"#));
    }
}
