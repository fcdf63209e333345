//! Background work items. A job is prepared on the document owner, runs
//! without access to the document, and its result re-enters the owner.

use serde::{Deserialize, Serialize};

use crate::agents::{generate_summary, AgentProfile};
use crate::clock::Timestamp;
use crate::comments::{run_conversation, ConversationInput, ConversationOutcome};
use crate::document::sequence::ElementId;
use crate::gateway::Gateway;
use crate::ids::{AgentId, MessageId, RunId, TaskId, ThreadId};
use crate::tasks::{auto_assign, execute_run, generate_title, AssigneeDecision, RunInput, RunOutput};
use crate::triggers::TriggerKind;

pub type JobId = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "job", rename_all = "snake_case")]
pub enum JobSpec {
    AgentReply {
        thread: ThreadId,
        message: MessageId,
        /// Agents shown as typing when the job was queued.
        typing: Vec<AgentId>,
        input: ConversationInput,
    },
    TaskRun {
        task: TaskId,
        run_id: RunId,
        trigger: Option<TriggerKind>,
        started_at: Timestamp,
        /// Visible element ids of the captured text, to anchor results.
        visible_ids: Vec<ElementId>,
        input: Box<RunInput>,
    },
    Summary {
        agent: AgentId,
        version: u64,
        profile: AgentProfile,
    },
    TaskSetup {
        task: TaskId,
        version: u64,
        description: String,
        /// Also pick an assignee.
        assign: bool,
        agents: Vec<AgentProfile>,
        default_agent: AgentId,
    },
}

impl JobSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            JobSpec::AgentReply { .. } => "agent_reply",
            JobSpec::TaskRun { .. } => "task_run",
            JobSpec::Summary { .. } => "summary",
            JobSpec::TaskSetup { .. } => "task_setup",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "job", content = "result", rename_all = "snake_case")]
pub enum JobResult {
    AgentReply(ConversationOutcome),
    TaskRun(Box<RunOutput>),
    Summary(Result<String, String>),
    TaskSetup { title: String, decision: Option<AssigneeDecision> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedJob {
    pub id: JobId,
    pub spec: JobSpec,
}

impl PreparedJob {
    /// Runs the model calls. Touches nothing but the gateway.
    pub fn execute(&self, gateway: &Gateway) -> JobResult {
        match &self.spec {
            JobSpec::AgentReply { input, .. } => JobResult::AgentReply(run_conversation(gateway, input)),
            JobSpec::TaskRun { input, .. } => JobResult::TaskRun(Box::new(execute_run(gateway, input))),
            JobSpec::Summary { profile, .. } => {
                JobResult::Summary(generate_summary(gateway, profile).map_err(|e| e.to_string()))
            }
            JobSpec::TaskSetup { description, assign, agents, default_agent, .. } => {
                let (title, err) = generate_title(gateway, description);
                if let Some(e) = err {
                    tracing::warn!(error = %e, "title generation failed, using description");
                }
                let decision = assign.then(|| auto_assign(gateway, description, agents, default_agent));
                JobResult::TaskSetup { title, decision }
            }
        }
    }
}
