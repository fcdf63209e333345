//! Task list, assignee selection and the document-wide run pipeline.

use std::ops::Range;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentProfile;
use crate::clock::Timestamp;
use crate::comments::{run_conversation, ConversationInput};
use crate::document::anchor::overlaps;
use crate::gateway::schema::{AssigneeSchema, PlainText, SegmentSchema};
use crate::gateway::templates::{sections_json, string_list_json, substitute, ASSIGNEE_AGENT};
use crate::gateway::{AssigneeChoice, Bindings, Gateway, GatewayError, SegmentProposal, TemplateId};
use crate::ids::{AgentId, AnnotationId, DocId, RunId, TaskId, UserId};
use crate::triggers::TriggerKind;

pub const SEGMENT_CONFIDENCE_MIN: f64 = 0.80;
pub const ASSIGN_CONFIDENCE_MIN: f64 = 0.85;
pub const MAX_TITLE_WORDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignee {
    Auto,
    Agent(AgentId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Manual,
    Autonomous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssigneeDecision {
    pub recommended_agent_id: Option<AgentId>,
    pub confidence_rate: f64,
    pub applied: bool,
    /// The agent the task ended up with.
    pub assigned: AgentId,
    pub malformed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub title: String,
    pub description: String,
    pub assignee: Assignee,
    pub interaction: Interaction,
    pub trigger: Option<TriggerKind>,
    pub shortcut: bool,
    /// Built-in toolbar tool; not editable or deletable.
    pub builtin: bool,
    pub creator: UserId,
    /// Bumped on every description change.
    pub version: u64,
    pub last_decision: Option<AssigneeDecision>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDraft {
    pub description: String,
    #[serde(default)]
    pub assignee: Option<AgentId>,
    pub interaction: Option<Interaction>,
    #[serde(default)]
    pub trigger: Option<TriggerKind>,
    #[serde(default)]
    pub shortcut: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentOutcome {
    Accepted,
    FilteredOverlap,
    FilteredConfidence,
    IntegrationFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub selected_text: String,
    pub selected_text_sentence: String,
    pub reason: String,
    pub confidence_rate: f64,
    pub outcome: SegmentOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_id: Option<AnnotationId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRunLog {
    pub run_id: RunId,
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub trigger: Option<TriggerKind>,
    pub segments: Vec<SegmentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("task description must not be empty")]
    EmptyDescription,
    #[error("autonomous tasks need a trigger and manual tasks must not have one")]
    TriggerMismatch,
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("built-in task {0} cannot be changed")]
    BuiltinReadOnly(TaskId),
}

pub struct Builtin {
    pub key: &'static str,
    pub title: &'static str,
    pub description: &'static str,
}

pub const BUILTIN_SHORTCUTS: [Builtin; 3] = [
    Builtin {
        key: "extend",
        title: "Extend",
        description: "Extend the selected text with one or two sentences that continue it in the same style.",
    },
    Builtin {
        key: "summarize",
        title: "Summarize",
        description: "Summarize the selected text in a shorter form that keeps its key points.",
    },
    Builtin {
        key: "translate",
        title: "Translate",
        description: "Translate the selected text into English, or into German if it already is English.",
    },
];

/// Toolbar descriptor for clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortcutDescriptor {
    pub task_id: TaskId,
    pub title: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskList {
    tasks: IndexMap<TaskId, TaskSpec>,
    runs: Vec<TaskRunLog>,
}

fn check_draft(draft: &TaskDraft) -> Result<Interaction, TaskError> {
    if draft.description.trim().is_empty() {
        return Err(TaskError::EmptyDescription);
    }
    let interaction = draft.interaction.unwrap_or(if draft.trigger.is_some() {
        Interaction::Autonomous
    } else {
        Interaction::Manual
    });
    if (interaction == Interaction::Autonomous) != draft.trigger.is_some() {
        return Err(TaskError::TriggerMismatch);
    }
    Ok(interaction)
}

impl TaskList {
    /// List seeded with the built-in shortcuts.
    pub fn new(doc: &DocId, owner: &UserId) -> Self {
        let mut list = Self::default();
        for b in &BUILTIN_SHORTCUTS {
            let task_id = TaskId::new(format!("{doc}-{}", b.key));
            list.tasks.insert(
                task_id.clone(),
                TaskSpec {
                    task_id,
                    title: b.title.into(),
                    description: b.description.into(),
                    assignee: Assignee::Auto,
                    interaction: Interaction::Manual,
                    trigger: None,
                    shortcut: true,
                    builtin: true,
                    creator: owner.clone(),
                    version: 1,
                    last_decision: None,
                },
            );
        }
        list
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn get(&self, id: &TaskId) -> Result<&TaskSpec, TaskError> {
        self.tasks.get(id).ok_or_else(|| TaskError::UnknownTask(id.clone()))
    }

    pub fn get_mut(&mut self, id: &TaskId) -> Result<&mut TaskSpec, TaskError> {
        self.tasks.get_mut(id).ok_or_else(|| TaskError::UnknownTask(id.clone()))
    }

    /// Stores a new task. Its title is a placeholder until the generated one
    /// arrives via [`TaskList::set_title`].
    pub fn create(&mut self, task_id: TaskId, creator: &UserId, draft: TaskDraft) -> Result<&TaskSpec, TaskError> {
        let interaction = check_draft(&draft)?;
        let spec = TaskSpec {
            task_id: task_id.clone(),
            title: truncate_title(&draft.description),
            description: draft.description,
            assignee: draft.assignee.map_or(Assignee::Auto, Assignee::Agent),
            interaction,
            trigger: draft.trigger,
            shortcut: draft.shortcut,
            builtin: false,
            creator: creator.clone(),
            version: 1,
            last_decision: None,
        };
        self.tasks.insert(task_id.clone(), spec);
        Ok(&self.tasks[&task_id])
    }

    /// Returns true when the description changed (and a new title is due).
    pub fn update(&mut self, id: &TaskId, draft: TaskDraft) -> Result<bool, TaskError> {
        let interaction = check_draft(&draft)?;
        let spec = self.get_mut(id)?;
        if spec.builtin {
            return Err(TaskError::BuiltinReadOnly(id.clone()));
        }
        let changed = spec.description != draft.description;
        if changed {
            spec.version += 1;
            spec.title = truncate_title(&draft.description);
            spec.description = draft.description;
        }
        spec.assignee = draft.assignee.map_or(Assignee::Auto, Assignee::Agent);
        spec.interaction = interaction;
        spec.trigger = draft.trigger;
        spec.shortcut = draft.shortcut;
        Ok(changed)
    }

    pub fn delete(&mut self, id: &TaskId) -> Result<TaskSpec, TaskError> {
        if self.get(id)?.builtin {
            return Err(TaskError::BuiltinReadOnly(id.clone()));
        }
        Ok(self.tasks.shift_remove(id).expect("checked above"))
    }

    /// Applies a generated title if the description is still the one it
    /// was generated for.
    pub fn set_title(&mut self, id: &TaskId, for_version: u64, title: &str) -> bool {
        match self.tasks.get_mut(id) {
            Some(spec) if spec.version == for_version && !spec.builtin => {
                spec.title = truncate_title(title);
                true
            }
            _ => false,
        }
    }

    /// Applies an auto-assign decision to a task still set to AUTO.
    pub fn set_decision(&mut self, id: &TaskId, for_version: u64, decision: AssigneeDecision) -> bool {
        match self.tasks.get_mut(id) {
            Some(spec) if spec.version == for_version && !spec.builtin && spec.assignee == Assignee::Auto => {
                spec.assignee = Assignee::Agent(decision.assigned.clone());
                spec.last_decision = Some(decision);
                true
            }
            _ => false,
        }
    }

    /// Points tasks of a removed agent at `fallback`. Returns affected ids.
    pub fn reassign(&mut self, removed: &AgentId, fallback: &AgentId) -> Vec<TaskId> {
        let mut out = Vec::new();
        for spec in self.tasks.values_mut() {
            if spec.assignee == Assignee::Agent(removed.clone()) {
                spec.assignee = Assignee::Agent(fallback.clone());
                out.push(spec.task_id.clone());
            }
        }
        out
    }

    pub fn autonomous(&self, kind: TriggerKind) -> Vec<TaskId> {
        self.tasks
            .values()
            .filter(|t| t.interaction == Interaction::Autonomous && t.trigger == Some(kind))
            .map(|t| t.task_id.clone())
            .collect()
    }

    pub fn shortcuts(&self) -> Vec<ShortcutDescriptor> {
        self.tasks
            .values()
            .filter(|t| t.shortcut)
            .map(|t| ShortcutDescriptor { task_id: t.task_id.clone(), title: t.title.clone() })
            .collect()
    }

    pub fn record_run(&mut self, log: TaskRunLog) {
        self.runs.push(log);
    }

    pub fn runs(&self) -> &[TaskRunLog] {
        &self.runs
    }

    pub fn runs_of(&self, task: &TaskId) -> Vec<&TaskRunLog> {
        self.runs.iter().filter(|r| &r.task_id == task).collect()
    }

    pub fn run(&self, id: &RunId) -> Option<&TaskRunLog> {
        self.runs.iter().find(|r| &r.run_id == id)
    }
}

/// First `MAX_TITLE_WORDS` whitespace-separated words, without wrapping
/// quotes or a trailing period.
pub fn truncate_title(raw: &str) -> String {
    let trimmed = raw.trim().trim_matches(|c| c == '"' || c == '\'' || c == '*');
    let title = trimmed.split_whitespace().take(MAX_TITLE_WORDS).collect::<Vec<_>>().join(" ");
    title.trim_end_matches('.').to_owned()
}

/// Generated title, falling back to the truncated description when the
/// model is unavailable.
pub fn generate_title(gateway: &Gateway, description: &str) -> (String, Option<GatewayError>) {
    let bindings = Bindings::new().set("description", description);
    match gateway.complete_template(TemplateId::TaskTitle, &bindings, &PlainText) {
        Ok(t) if !truncate_title(&t).is_empty() => (truncate_title(&t), None),
        Ok(_) => (truncate_title(description), None),
        Err(e) => (truncate_title(description), Some(e)),
    }
}

pub fn assignee_bindings(description: &str, agents: &[AgentProfile]) -> Bindings {
    let info = agents
        .iter()
        .map(|a| {
            let b = Bindings::new()
                .set("agent_id", a.agent_id.as_str())
                .set("agent_role", a.role.as_str())
                .set("sections", sections_json(&a.sections))
                .set("notes", string_list_json(&a.notes));
            substitute(ASSIGNEE_AGENT, &b, &[]).expect("agent info template is fully bound")
        })
        .collect::<Vec<_>>()
        .join("\n");
    Bindings::new().set("task_description", description).set("agents_info", info)
}

/// Applies the assignment threshold to a model answer.
pub fn decide_assignee(
    answer: Result<AssigneeChoice, GatewayError>,
    agents: &[AgentProfile],
    default: &AgentId,
) -> AssigneeDecision {
    let fallback = |recommended, confidence_rate, malformed| AssigneeDecision {
        recommended_agent_id: recommended,
        confidence_rate,
        applied: false,
        assigned: default.clone(),
        malformed,
    };
    let choice = match answer {
        Ok(c) => c,
        Err(_) => return fallback(None, 0.0, true),
    };
    let Some(agent) = agents.iter().find(|a| a.agent_id.as_str() == choice.agent_id) else {
        tracing::warn!(agent_id = %choice.agent_id, "assignee recommendation names an unknown agent");
        return fallback(None, 0.0, true);
    };
    if choice.confidence_rate >= ASSIGN_CONFIDENCE_MIN {
        AssigneeDecision {
            recommended_agent_id: Some(agent.agent_id.clone()),
            confidence_rate: choice.confidence_rate,
            applied: true,
            assigned: agent.agent_id.clone(),
            malformed: false,
        }
    } else {
        fallback(Some(agent.agent_id.clone()), choice.confidence_rate, false)
    }
}

pub fn auto_assign(gateway: &Gateway, description: &str, agents: &[AgentProfile], default: &AgentId) -> AssigneeDecision {
    let answer =
        gateway.complete_template(TemplateId::AssigneeSelect, &assignee_bindings(description, agents), &AssigneeSchema);
    decide_assignee(answer, agents, default)
}

fn normalized_with_map(text: &str) -> (Vec<char>, Vec<usize>) {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::with_capacity(chars.len());
    let mut map = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '\r' {
            out.push('\n');
            map.push(i);
            if chars.get(i + 1) == Some(&'\n') {
                i += 1;
            }
        } else {
            out.push(chars[i]);
            map.push(i);
        }
        i += 1;
    }
    (out, map)
}

fn normalize(text: &str) -> Vec<char> {
    normalized_with_map(text).0
}

fn find_from(hay: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (from..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Character range of `selected_text` in `body`: the first occurrence at or
/// after the first occurrence of `sentence`, else the first occurrence
/// anywhere. Only line endings are normalized.
pub fn locate_segment(body: &str, selected_text: &str, sentence: &str) -> Option<Range<usize>> {
    let (hay, map) = normalized_with_map(body);
    let needle = normalize(selected_text);
    let sentence = normalize(sentence);
    let start = find_from(&hay, &sentence, 0)
        .and_then(|s| find_from(&hay, &needle, s))
        .or_else(|| find_from(&hay, &needle, 0))?;
    let end = start + needle.len();
    let orig_end = if end < map.len() { map[end] } else { body.chars().count() };
    Some(map[start]..orig_end)
}

/// A proposal after the filtering step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedSegment {
    pub proposal: SegmentProposal,
    pub outcome: SegmentOutcome,
    pub range: Option<Range<usize>>,
    /// Existing annotations this proposal collided with.
    pub overlapped: Vec<AnnotationId>,
}

/// Confidence gate, location, overlap with existing annotations, then
/// overlap among the surviving proposals (higher confidence wins, earlier
/// position breaks ties).
pub fn filter_proposals(
    proposals: Vec<SegmentProposal>,
    body: &str,
    existing: &[(AnnotationId, Range<usize>)],
) -> Vec<PlannedSegment> {
    let mut planned: Vec<PlannedSegment> = proposals
        .into_iter()
        .map(|proposal| {
            if proposal.confidence_rate < SEGMENT_CONFIDENCE_MIN {
                return PlannedSegment { proposal, outcome: SegmentOutcome::FilteredConfidence, range: None, overlapped: vec![] };
            }
            let Some(range) = locate_segment(body, &proposal.selected_text, &proposal.selected_text_sentence) else {
                return PlannedSegment { proposal, outcome: SegmentOutcome::IntegrationFailed, range: None, overlapped: vec![] };
            };
            let overlapped: Vec<AnnotationId> =
                existing.iter().filter(|(_, r)| overlaps(r, &range)).map(|(id, _)| id.clone()).collect();
            let outcome = if overlapped.is_empty() { SegmentOutcome::Accepted } else { SegmentOutcome::FilteredOverlap };
            PlannedSegment { proposal, outcome, range: Some(range), overlapped }
        })
        .collect();

    let mut order: Vec<usize> = (0..planned.len()).filter(|&i| planned[i].outcome == SegmentOutcome::Accepted).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&planned[a], &planned[b]);
        pb.proposal
            .confidence_rate
            .total_cmp(&pa.proposal.confidence_rate)
            .then(pa.range.as_ref().unwrap().start.cmp(&pb.range.as_ref().unwrap().start))
    });
    let mut kept: Vec<Range<usize>> = Vec::new();
    for i in order {
        let range = planned[i].range.clone().unwrap();
        if kept.iter().any(|k| overlaps(k, &range)) {
            planned[i].outcome = SegmentOutcome::FilteredOverlap;
        } else {
            kept.push(range);
        }
    }
    planned
}

pub fn segment_bindings(agent: &AgentProfile, task: &str, document_text: &str) -> Bindings {
    Bindings::new()
        .set("agent_role", agent.role.as_str())
        .set("task", task)
        .set("sections_json", sections_json(&agent.sections))
        .set("notes", string_list_json(&agent.notes))
        .set("document_text", document_text)
}

/// Inputs of one pipeline run, captured from the document at enqueue time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInput {
    pub task: TaskSpec,
    /// Fixed agent, or `None` to auto-assign first.
    pub agent: Option<AgentProfile>,
    pub agents: Vec<AgentProfile>,
    pub default_agent: AgentId,
    pub document_text: String,
    pub goal_text: Option<String>,
    pub existing: Vec<(AnnotationId, Range<usize>)>,
    /// User selection for shortcut runs; skips segment selection.
    pub selection: Option<Range<usize>>,
    pub max_turns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedReply {
    pub segment: PlannedSegment,
    /// Reply text for accepted segments; `Err` if the model call failed.
    pub reply: Option<Result<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub agent_id: AgentId,
    pub decision: Option<AssigneeDecision>,
    pub planned: Vec<PlannedReply>,
    pub error: Option<String>,
}

/// Steps 1 to 3 of a run: selection, filtering and responses. Integration
/// happens back on the document owner.
pub fn execute_run(gateway: &Gateway, input: &RunInput) -> RunOutput {
    let (agent, decision) = match &input.agent {
        Some(a) => (a.clone(), None),
        None => {
            let d = auto_assign(gateway, &input.task.description, &input.agents, &input.default_agent);
            let a = input
                .agents
                .iter()
                .find(|a| a.agent_id == d.assigned)
                .cloned()
                .expect("decision names a known agent");
            (a, Some(d))
        }
    };
    let mut out = RunOutput { agent_id: agent.agent_id.clone(), decision, planned: Vec::new(), error: None };
    let chars: Vec<char> = input.document_text.chars().collect();

    let planned = match &input.selection {
        Some(sel) => {
            let text: String = chars[sel.start.min(chars.len())..sel.end.min(chars.len())].iter().collect();
            let overlapped: Vec<AnnotationId> =
                input.existing.iter().filter(|(_, r)| overlaps(r, sel)).map(|(id, _)| id.clone()).collect();
            let outcome = if overlapped.is_empty() { SegmentOutcome::Accepted } else { SegmentOutcome::FilteredOverlap };
            vec![PlannedSegment {
                proposal: SegmentProposal {
                    selected_text: text,
                    selected_text_sentence: String::new(),
                    reason: "user selection".into(),
                    confidence_rate: 1.0,
                },
                outcome,
                range: Some(sel.clone()),
                overlapped,
            }]
        }
        None if input.document_text.trim().is_empty() => Vec::new(),
        None => {
            let bindings = segment_bindings(&agent, &input.task.description, &input.document_text);
            match gateway.complete_template(TemplateId::SegmentSelect, &bindings, &SegmentSchema) {
                Ok(proposals) => filter_proposals(proposals, &input.document_text, &input.existing),
                Err(e) => {
                    out.error = Some(e.to_string());
                    Vec::new()
                }
            }
        }
    };

    for segment in planned {
        let reply = (segment.outcome == SegmentOutcome::Accepted).then(|| {
            let range = segment.range.clone().expect("accepted segments are located");
            let conversation = ConversationInput {
                agents: vec![agent.clone()],
                roster: vec![],
                document_text: input.document_text.clone(),
                goal_text: input.goal_text.clone(),
                selected_text: chars[range].iter().collect(),
                history: vec![],
                request: input.task.description.clone(),
                max_turns: input.max_turns.max(1),
                agent_mentions_join: false,
            };
            let outcome = run_conversation(gateway, &conversation);
            match (outcome.turns.into_iter().next(), outcome.failures.into_iter().next()) {
                (Some(turn), _) => Ok(turn.text),
                (None, Some((_, e))) => Err(e),
                (None, None) => Err("no reply".to_owned()),
            }
        });
        out.planned.push(PlannedReply { segment, reply });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentRegistry;
    use crate::gateway::{MockRule, MockScript};
    use crate::ids::IdAllocator;

    fn proposal(text: &str, sentence: &str, conf: f64) -> SegmentProposal {
        SegmentProposal {
            selected_text: text.into(),
            selected_text_sentence: sentence.into(),
            reason: "r".into(),
            confidence_rate: conf,
        }
    }

    #[test]
    fn title_truncation() {
        assert_eq!(truncate_title("\"Fix Grammar Issues.\""), "Fix Grammar Issues");
        assert_eq!(truncate_title("one two three four five"), "one two three four");
        assert_eq!(truncate_title("  "), "");
    }

    #[test]
    fn locate_prefers_the_disambiguating_sentence() {
        let body = "We saw the cat. Later I saw the cat yesterday.";
        // hand search: second "the cat" starts after "We saw the cat. Later I saw "
        let second = "We saw the cat. Later I saw ".chars().count();
        assert_eq!(locate_segment(body, "the cat", "I saw the cat yesterday."), Some(second..second + 7));
        assert_eq!(locate_segment(body, "the cat", "not present"), Some(7..14));
        assert_eq!(locate_segment(body, "a dog", "a dog barked"), None);
    }

    #[test]
    fn locate_normalizes_line_endings_only() {
        let body = "First line.\r\nSecond line.";
        let r = locate_segment(body, "line.\nSecond", "").unwrap();
        let chars: Vec<char> = body.chars().collect();
        assert_eq!(chars[r].iter().collect::<String>(), "line.\r\nSecond");
        assert_eq!(locate_segment(body, "second line", ""), None);
    }

    #[test]
    fn filtering_applies_gates_in_order() {
        let body = "Alpha beta gamma. Delta epsilon zeta. Eta theta iota.";
        let existing = vec![(AnnotationId::new("d1-an1"), 0..5)];
        let out = filter_proposals(
            vec![
                proposal("Alpha beta", "Alpha beta gamma.", 0.9),
                proposal("Delta", "Delta epsilon zeta.", 0.79),
                proposal("Eta theta", "Eta theta iota.", 0.80),
                proposal("theta iota", "Eta theta iota.", 0.95),
                proposal("missing", "", 0.99),
            ],
            body,
            &existing,
        );
        let outcomes: Vec<_> = out.iter().map(|p| p.outcome).collect();
        assert_eq!(
            outcomes,
            vec![
                SegmentOutcome::FilteredOverlap,
                SegmentOutcome::FilteredConfidence,
                SegmentOutcome::FilteredOverlap,
                SegmentOutcome::Accepted,
                SegmentOutcome::IntegrationFailed,
            ]
        );
        assert_eq!(out[0].overlapped, vec![AnnotationId::new("d1-an1")]);
        assert!(out[2].overlapped.is_empty());
    }

    #[test]
    fn equal_confidence_overlap_keeps_earlier() {
        let body = "one two three";
        let out =
            filter_proposals(vec![proposal("two three", "", 0.9), proposal("one two", "", 0.9)], body, &[]);
        assert_eq!(out[0].outcome, SegmentOutcome::FilteredOverlap);
        assert_eq!(out[1].outcome, SegmentOutcome::Accepted);
    }

    fn registry() -> (AgentRegistry, AgentId) {
        let doc = DocId::new("d1");
        let mut ids = IdAllocator::default();
        let mut reg = AgentRegistry::new(&doc, &mut ids);
        let catalog = crate::agents::PresetCatalog::builtin();
        let r = reg.instantiate_preset(&mut ids, &doc, &UserId::new("u"), &catalog, "reviewer").unwrap();
        (reg, r)
    }

    #[test]
    fn assignment_threshold() {
        let (reg, reviewer) = registry();
        let agents: Vec<_> = reg.iter().cloned().collect();
        let default = reg.default_agent().agent_id.clone();
        for (conf, expect) in [(0.84, &default), (0.85, &reviewer), (0.86, &reviewer)] {
            let d = decide_assignee(
                Ok(AssigneeChoice { agent_id: reviewer.to_string(), confidence_rate: conf }),
                &agents,
                &default,
            );
            assert_eq!(&d.assigned, expect, "confidence {conf}");
            assert_eq!(d.applied, conf >= 0.85);
        }
        let d = decide_assignee(Ok(AssigneeChoice { agent_id: "nobody".into(), confidence_rate: 0.99 }), &agents, &default);
        assert!(d.malformed && d.assigned == default && d.confidence_rate == 0.0);
    }

    #[test]
    fn assignee_prompt_lists_every_agent() {
        let (reg, _) = registry();
        let agents: Vec<_> = reg.iter().cloned().collect();
        let b = assignee_bindings("Fix grammar", &agents);
        let msgs = crate::gateway::render(TemplateId::AssigneeSelect, &b).unwrap();
        assert!(msgs[1].content.starts_with("Task Description: Fix grammar\n\nAgents Information:\nAgent ID: d1-a0, Role:"));
        assert_eq!(msgs[1].content.matches("Agent ID:").count(), 2);
    }

    #[test]
    fn empty_document_makes_no_selection_call() {
        let (reg, _) = registry();
        let g = Gateway::mock(MockScript::default());
        let mut list = TaskList::new(&DocId::new("d1"), &UserId::new("u"));
        let task = list
            .create(TaskId::new("d1-t9"), &UserId::new("u"), TaskDraft { description: "Fix".into(), ..Default::default() })
            .unwrap()
            .clone();
        let input = RunInput {
            task,
            agent: Some(reg.default_agent().clone()),
            agents: reg.iter().cloned().collect(),
            default_agent: reg.default_agent().agent_id.clone(),
            document_text: String::new(),
            goal_text: None,
            existing: vec![],
            selection: None,
            max_turns: 4,
        };
        let out = execute_run(&g, &input);
        assert!(out.planned.is_empty() && out.error.is_none());
        assert_eq!(g.exchange_count(), 0);
    }

    #[test]
    fn title_generation_is_bounded() {
        let g = Gateway::mock(MockScript::from_rules(vec![MockRule::text(
            TemplateId::TaskTitle,
            "Fix All The Grammar Issues",
        )]));
        assert_eq!(generate_title(&g, "Fix grammar").0, "Fix All The Grammar");
    }

    #[test]
    fn trigger_consistency_is_validated() {
        let mut list = TaskList::default();
        let u = UserId::new("u");
        let bad = TaskDraft {
            description: "x".into(),
            interaction: Some(Interaction::Manual),
            trigger: Some(TriggerKind::OnSave),
            ..Default::default()
        };
        assert_eq!(list.create(TaskId::new("t"), &u, bad).unwrap_err(), TaskError::TriggerMismatch);
        let bad = TaskDraft { description: "x".into(), interaction: Some(Interaction::Autonomous), ..Default::default() };
        assert_eq!(list.create(TaskId::new("t"), &u, bad).unwrap_err(), TaskError::TriggerMismatch);
        assert_eq!(
            list.create(TaskId::new("t"), &u, TaskDraft::default()).unwrap_err(),
            TaskError::EmptyDescription
        );
    }
}
