//! Generic agent runtime.
//!
//! An agent step drains the mailbox into the transcript, makes one model
//! call, parses the response into actions, checks each against the role
//! policy and hands the survivors to an [`ActionExecutor`] (the engine). Every
//! executed or rejected action, and every instruction received from above,
//! becomes an [`ActionRecord`] in `agents/<id>/trajectory.jsonl`.
//!
//! A step is split in two halves, [`prepare_step`] and [`finish_step`], so the
//! engine can issue the model calls of several agents concurrently while
//! applying their effects one at a time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bus::{AgentId, Bus, BusError, Message, MessageKind, Outgoing};
use crate::model::{
    parse_actions, protocol_tool_schemas, ModelError, ModelRequest, ModelResponse, Turn, PROTOCOL_TOOLS,
};
use crate::report::ReportDelta;
use crate::tools::capability_schema;
use crate::workspace::{Workspace, WorkspaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    ProjectCoordinator,
    WorkstreamCoordinator,
    Reviewer,
    LiteratureAgent,
    CodingAgent,
    ProverAgent,
}

impl AgentRole {
    pub fn tag(self) -> &'static str {
        match self {
            Self::ProjectCoordinator => "project_coordinator",
            Self::WorkstreamCoordinator => "workstream_coordinator",
            Self::Reviewer => "reviewer",
            Self::LiteratureAgent => "literature_agent",
            Self::CodingAgent => "coding_agent",
            Self::ProverAgent => "prover_agent",
        }
    }

    /// Short form used when naming spawned agents.
    pub fn short(self) -> &'static str {
        match self {
            Self::ProjectCoordinator => "coordinator",
            Self::WorkstreamCoordinator => "coordinator",
            Self::Reviewer => "rev",
            Self::LiteratureAgent => "literature",
            Self::CodingAgent => "coding",
            Self::ProverAgent => "prover",
        }
    }

    pub fn is_coordinator(self) -> bool {
        matches!(self, Self::ProjectCoordinator | Self::WorkstreamCoordinator)
    }

    pub fn all() -> [AgentRole; 6] {
        [
            Self::ProjectCoordinator,
            Self::WorkstreamCoordinator,
            Self::Reviewer,
            Self::LiteratureAgent,
            Self::CodingAgent,
            Self::ProverAgent,
        ]
    }
}

/// Tools every reviewer needs to cross-check references and code.
pub const REVIEWER_TOOLS: &[&str] = &["execute_code", "fetch_document", "read_file", "search_literature"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    pub role: AgentRole,
    pub prompt_profile: String,
    pub tool_allowlist: BTreeSet<String>,
    pub parent: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_binding: Option<String>,
    #[serde(default)]
    pub instructions: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workstream: Option<String>,
}

/// What a coordinator asks for when creating a sub-agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnRequest {
    pub role: AgentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_profile: Option<String>,
    #[serde(default)]
    pub tool_allowlist: Vec<String>,
    #[serde(default)]
    pub instructions: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_binding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    CallTool {
        name: String,
        args: Value,
    },
    SendMessage(Outgoing),
    UpdateReport(ReportDelta),
    SpawnSubAgent(SpawnRequest),
    SubmitForReview {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report_version: Option<u32>,
    },
    MarkComplete,
    Escalate {
        body: String,
        #[serde(default)]
        attachments: Vec<String>,
    },
    GiveFinalAnswer {
        text: String,
    },
    ProposeGoals {
        question: String,
        goals: Vec<String>,
    },
    CreateWorkstream {
        goal: String,
        instructions: String,
    },
    Abandon {
        summary: String,
    },
    Wait,
}

impl Action {
    /// Whether the agent should wait for mail after this action.
    pub fn yields(&self) -> bool {
        matches!(
            self,
            Action::SendMessage(_)
                | Action::Wait
                | Action::Escalate { .. }
                | Action::SubmitForReview { .. }
                | Action::GiveFinalAnswer { .. }
                | Action::ProposeGoals { .. }
                | Action::MarkComplete
                | Action::Abandon { .. }
        )
    }

    pub fn label(&self) -> String {
        match self {
            Action::CallTool { name, .. } => format!("call_tool:{name}"),
            Action::SendMessage(m) => format!("send_message:{:?}", m.kind),
            Action::UpdateReport(_) => "update_report".into(),
            Action::SpawnSubAgent(r) => format!("spawn_agent:{}", r.role.tag()),
            Action::SubmitForReview { .. } => "submit_for_review".into(),
            Action::MarkComplete => "mark_complete".into(),
            Action::Escalate { .. } => "escalate".into(),
            Action::GiveFinalAnswer { .. } => "give_final_answer".into(),
            Action::ProposeGoals { .. } => "propose_goals".into(),
            Action::CreateWorkstream { .. } => "create_workstream".into(),
            Action::Abandon { .. } => "abandon".into(),
            Action::Wait => "wait".into(),
        }
    }
}

/// Checks `action` against what `spec`'s role may do.
pub fn check_role_policy(spec: &AgentSpec, action: &Action) -> Result<(), String> {
    use AgentRole::*;
    let role = spec.role;
    let only = |allowed: &[AgentRole], what: &str| {
        if allowed.contains(&role) {
            Ok(())
        } else {
            Err(format!("{} may not {what}", role.tag()))
        }
    };
    match action {
        Action::CallTool { name, .. } => {
            if spec.tool_allowlist.contains(name) && !PROTOCOL_TOOLS.contains(&name.as_str()) {
                Ok(())
            } else {
                Err(format!("tool {name} is not in the allowlist"))
            }
        }
        Action::SpawnSubAgent(_) => {
            if role.is_coordinator() {
                Ok(())
            } else {
                Err(format!("SpawnDenied: {} may not spawn agents", role.tag()))
            }
        }
        Action::UpdateReport(_) => only(&[WorkstreamCoordinator], "update the report"),
        Action::SubmitForReview { .. } => only(&[WorkstreamCoordinator], "submit for review"),
        Action::MarkComplete => only(&[WorkstreamCoordinator], "mark work complete"),
        Action::Abandon { .. } => only(&[WorkstreamCoordinator], "abandon a workstream"),
        Action::GiveFinalAnswer { .. } => only(&[ProjectCoordinator], "give the final answer"),
        Action::ProposeGoals { .. } => only(&[ProjectCoordinator], "propose goals"),
        Action::CreateWorkstream { .. } => only(&[ProjectCoordinator], "create workstreams"),
        Action::SendMessage(_) | Action::Escalate { .. } | Action::Wait => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    /// Has work to do without new mail.
    Active,
    /// Runs again when mail arrives.
    Waiting,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub spec: AgentSpec,
    pub status: AgentStatus,
    pub steps: u64,
    pub records: u64,
    pub transcript: Vec<Turn>,
    pub failures: u32,
}

/// Turns kept in the persisted transcript; requests use the last K of these.
const TRANSCRIPT_CAP: usize = 200;

impl AgentState {
    fn push_turn(&mut self, turn: Turn) {
        self.transcript.push(turn);
        if self.transcript.len() > TRANSCRIPT_CAP {
            let excess = self.transcript.len() - TRANSCRIPT_CAP;
            self.transcript.drain(..excess);
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.status == AgentStatus::Terminated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entry {
    Action { action: Action },
    Received { message: Message },
    Invalid { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub agent: AgentId,
    /// Position in the trajectory; gap-free from 0.
    pub index: u64,
    /// Agent step that produced the record.
    pub step: u64,
    pub triggered_by: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_call: Option<String>,
    pub entry: Entry,
    pub accepted: bool,
    pub outcome: String,
    pub at: u64,
}

pub fn trajectory_path(agent: &AgentId) -> String {
    format!("agents/{agent}/trajectory.jsonl")
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("SpawnDenied: {0}")]
    SpawnDenied(String),
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("agent {0} is terminated")]
    Terminated(AgentId),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Registers a new agent under `spec.parent`.
pub fn spawn_agent(
    agents: &mut BTreeMap<AgentId, AgentState>,
    bus: &Bus,
    spec: AgentSpec,
) -> Result<AgentId, AgentError> {
    if spec.id.as_str().is_empty() || spec.id.is_user() || spec.id.as_str().contains('/') {
        return Err(AgentError::InvalidSpec(format!("bad agent id {:?}", spec.id.as_str())));
    }
    if agents.contains_key(&spec.id) {
        return Err(AgentError::InvalidSpec(format!("{} already exists", spec.id)));
    }
    if let Some(t) = spec
        .tool_allowlist
        .iter()
        .find(|t| PROTOCOL_TOOLS.contains(&t.as_str()))
    {
        return Err(AgentError::InvalidSpec(format!("{t} is a protocol verb, not a tool")));
    }
    if spec.parent.is_user() {
        if spec.role != AgentRole::ProjectCoordinator {
            return Err(AgentError::SpawnDenied(
                "only the project coordinator reports to the user".into(),
            ));
        }
    } else {
        let parent = agents
            .get(&spec.parent)
            .ok_or_else(|| AgentError::UnknownAgent(spec.parent.clone()))?;
        if parent.is_terminated() {
            return Err(AgentError::Terminated(spec.parent.clone()));
        }
        if !parent.spec.role.is_coordinator() {
            return Err(AgentError::SpawnDenied(format!(
                "{} ({}) may not spawn agents",
                spec.parent,
                parent.spec.role.tag()
            )));
        }
        if spec.role == AgentRole::ProjectCoordinator {
            return Err(AgentError::InvalidSpec(
                "a project coordinator must report to the user".into(),
            ));
        }
    }
    if spec.role == AgentRole::Reviewer {
        if let Some(missing) = ["execute_code", "fetch_document"]
            .iter()
            .find(|t| !spec.tool_allowlist.contains(**t))
        {
            return Err(AgentError::InvalidSpec(format!("reviewers need the {missing} tool")));
        }
    }
    bus.register(spec.id.clone(), spec.parent.clone())?;
    let status = if spec.role == AgentRole::Reviewer {
        AgentStatus::Waiting
    } else {
        AgentStatus::Active
    };
    let id = spec.id.clone();
    agents.insert(
        id.clone(),
        AgentState {
            spec,
            status,
            steps: 0,
            records: 0,
            transcript: vec![Turn::new(
                "engine",
                "You have been started. Your assignment is in the system prompt.",
            )],
            failures: 0,
        },
    );
    Ok(id)
}

/// Reads an agent's trajectory. Agents that never acted have an empty one.
pub fn trajectory(
    agents: &BTreeMap<AgentId, AgentState>,
    workspace: &Workspace,
    agent: &AgentId,
) -> Result<Vec<ActionRecord>, AgentError> {
    if !agents.contains_key(agent) {
        return Err(AgentError::UnknownAgent(agent.clone()));
    }
    read_trajectory(workspace, agent)
}

pub fn read_trajectory(workspace: &Workspace, agent: &AgentId) -> Result<Vec<ActionRecord>, AgentError> {
    let path = trajectory_path(agent);
    if !workspace.exists(&path) {
        return Ok(Vec::new());
    }
    let text = workspace.read_text(&path, None)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

/// Outcome of an executed action.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Executed {
    pub summary: String,
    /// Text fed back to the agent as its next transcript turn.
    pub feedback: Option<String>,
}

impl Executed {
    pub fn quiet(summary: impl Into<String>) -> Self {
        Self {
            summary: summary.into(),
            feedback: None,
        }
    }

    pub fn with_feedback(summary: impl Into<String>, feedback: impl Into<String>) -> Self {
        Self {
            summary: summary.into(),
            feedback: Some(feedback.into()),
        }
    }
}

/// Applies actions to the world. Errors are rejections and are recorded.
pub trait ActionExecutor {
    fn execute(&mut self, agent: &AgentSpec, action: &Action) -> Result<Executed, String>;

    /// Whether executing an action concluded `agent` (e.g. on completion).
    fn concluded(&self, _agent: &AgentId) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct StepContext {
    pub profile: String,
    /// Extra system text, e.g. a digest of the agent's report.
    pub extra_system: String,
    pub context_turns: usize,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStep {
    pub agent: AgentId,
    pub step: u64,
    pub triggered_by: Vec<String>,
    pub request: ModelRequest,
}

fn message_turn(m: &Message) -> Turn {
    let mut text = format!("[{:?}] {}", m.kind, m.body);
    if !m.attachments.is_empty() {
        text.push_str(&format!("\n(attachments: {})", m.attachments.join(", ")));
    }
    Turn::new(m.sender.as_str(), text)
}

fn append_record(
    workspace: &Workspace,
    state: &mut AgentState,
    mut record: ActionRecord,
) -> Result<ActionRecord, AgentError> {
    record.index = state.records;
    let mut line = serde_json::to_vec(&record).expect("record serializes");
    line.push(b'\n');
    workspace.append(&trajectory_path(&state.spec.id), &line, state.spec.id.as_str())?;
    state.records += 1;
    Ok(record)
}

/// Drains the mailbox and builds the model request for the next step.
pub fn prepare_step(
    state: &mut AgentState,
    bus: &Bus,
    workspace: &Workspace,
    ctx: &StepContext,
) -> Result<PreparedStep, AgentError> {
    let id = state.spec.id.clone();
    if state.is_terminated() {
        return Err(AgentError::Terminated(id));
    }
    let step = state.steps;
    state.steps += 1;
    let mail = bus.poll(&id, usize::MAX)?;
    let mut triggered_by = Vec::with_capacity(mail.len());
    for m in mail {
        triggered_by.push(m.id.clone());
        state.push_turn(message_turn(&m));
        if matches!(m.kind, MessageKind::Instruction | MessageKind::UserChat) {
            let rec = ActionRecord {
                agent: id.clone(),
                index: 0,
                step,
                triggered_by: vec![m.id.clone()],
                model_call: None,
                outcome: format!("received {:?} from {}", m.kind, m.sender),
                entry: Entry::Received { message: m },
                accepted: true,
                at: workspace.clock().now(),
            };
            append_record(workspace, state, rec)?;
        }
    }

    let spec = &state.spec;
    let mut system = ctx.profile.trim_end().to_string();
    system.push_str(&format!(
        "\n\nYou are agent {} ({}), reporting to {}.",
        spec.id,
        spec.role.tag(),
        spec.parent
    ));
    if !spec.instructions.is_empty() {
        system.push_str("\n\nAssignment:\n");
        system.push_str(&spec.instructions);
    }
    if !ctx.extra_system.is_empty() {
        system.push_str("\n\n");
        system.push_str(&ctx.extra_system);
    }
    let mut tool_schemas = protocol_tool_schemas(spec.role);
    tool_schemas.extend(spec.tool_allowlist.iter().map(|t| capability_schema(t)));
    let k = ctx.context_turns.max(1);
    let start = state.transcript.len().saturating_sub(k);
    let request = ModelRequest {
        agent_role: spec.role,
        agent_id: id.clone(),
        binding: spec.backend_binding.clone(),
        system,
        transcript: state.transcript[start..].to_vec(),
        tool_schemas,
        max_output_tokens: ctx.max_output_tokens,
        seed: Some(step),
    };
    Ok(PreparedStep {
        agent: id,
        step,
        triggered_by,
        request,
    })
}

/// Parses the model's answer, executes the resulting actions and records
/// everything. `result` carries the call-log id alongside the response.
pub fn finish_step(
    state: &mut AgentState,
    prepared: &PreparedStep,
    call_id: Option<String>,
    result: Result<ModelResponse, ModelError>,
    executor: &mut dyn ActionExecutor,
    workspace: &Workspace,
    max_failures: u32,
) -> Result<Vec<ActionRecord>, AgentError> {
    let mut out = Vec::new();
    let agent_id = state.spec.id.clone();
    let base = |entry: Entry, accepted: bool, outcome: String| ActionRecord {
        agent: agent_id.clone(),
        index: 0,
        step: prepared.step,
        triggered_by: prepared.triggered_by.clone(),
        model_call: call_id.clone(),
        entry,
        accepted,
        outcome,
        at: 0,
    };

    let parsed = result.map_err(|e| e.to_string()).and_then(|resp| {
        let parent = state.spec.parent.clone();
        parse_actions(&resp, state.spec.role, &parent, &state.spec.tool_allowlist)
            .map_err(|e| e.to_string())
            .and_then(|p| {
                if p.refused {
                    Err("the model refused to act".to_string())
                } else {
                    Ok(p.actions)
                }
            })
    });

    let actions = match parsed {
        Ok(actions) => {
            state.failures = 0;
            actions
        }
        Err(error) => {
            state.failures += 1;
            let mut rec = base(Entry::Invalid { error: error.clone() }, false, "no action taken".into());
            rec.at = workspace.clock().now();
            out.push(append_record(workspace, state, rec)?);
            state.push_turn(Turn::new(
                "engine",
                format!("Your last response could not be used: {error}"),
            ));
            if state.failures < max_failures {
                state.status = AgentStatus::Active;
                return Ok(out);
            }
            state.failures = 0;
            vec![Action::Escalate {
                body: format!(
                    "{} could not produce a valid action after {max_failures} attempts; last error: {error}",
                    state.spec.id
                ),
                attachments: Vec::new(),
            }]
        }
    };

    let mut keep_running = false;
    for action in actions {
        if action == Action::Wait {
            continue;
        }
        let spec = state.spec.clone();
        state.push_turn(Turn::new(
            spec.id.as_str(),
            serde_json::to_string(&action).expect("action serializes"),
        ));
        let (accepted, outcome, feedback) = match check_role_policy(&spec, &action) {
            Err(reason) => (
                false,
                format!("rejected: {reason}"),
                Some(format!("Rejected: {reason}")),
            ),
            Ok(()) => match executor.execute(&spec, &action) {
                Ok(done) => (true, done.summary, done.feedback),
                Err(reason) => (
                    false,
                    format!("rejected: {reason}"),
                    Some(format!("Rejected: {reason}")),
                ),
            },
        };
        if !accepted || !action.yields() {
            keep_running = true;
        }
        if let Some(text) = feedback {
            let speaker = if matches!(action, Action::CallTool { .. }) && accepted {
                "tool"
            } else {
                "engine"
            };
            state.push_turn(Turn::new(speaker, text));
        }
        let mut rec = base(Entry::Action { action }, accepted, outcome);
        rec.at = workspace.clock().now();
        out.push(append_record(workspace, state, rec)?);
        if executor.concluded(&agent_id) {
            state.status = AgentStatus::Terminated;
        }
        if state.is_terminated() {
            return Ok(out);
        }
    }
    if !state.is_terminated() {
        state.status = if keep_running {
            AgentStatus::Active
        } else {
            AgentStatus::Waiting
        };
    }
    Ok(out)
}

/// Summary line for a capability call result fed back to the agent.
pub fn clip(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        text.to_string()
    } else {
        text.chars().take(max_chars).collect::<String>() + "…(truncated)"
    }
}

/// Convenience: build an [`Outgoing`] status update to the parent.
pub fn status_update(spec: &AgentSpec, body: impl Into<String>) -> Outgoing {
    Outgoing::new(spec.parent.clone(), MessageKind::StatusUpdate, body)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::clock::Clock;

    struct Fixture {
        _dir: tempfile::TempDir,
        ws: Arc<Workspace>,
        bus: Bus,
        agents: BTreeMap<AgentId, AgentState>,
    }

    fn spec(id: &str, role: AgentRole, parent: &str, tools: &[&str]) -> AgentSpec {
        AgentSpec {
            id: id.into(),
            role,
            prompt_profile: role.tag().into(),
            tool_allowlist: tools.iter().map(|s| s.to_string()).collect(),
            parent: parent.into(),
            backend_binding: None,
            instructions: String::new(),
            workstream: None,
        }
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let ws = Arc::new(Workspace::open(dir.path(), Arc::new(Clock::logical())).unwrap());
        let bus = Bus::new(ws.clone());
        let mut agents = BTreeMap::new();
        spawn_agent(
            &mut agents,
            &bus,
            spec("pc", AgentRole::ProjectCoordinator, "user", &[]),
        )
        .unwrap();
        spawn_agent(
            &mut agents,
            &bus,
            spec("wsc", AgentRole::WorkstreamCoordinator, "pc", &["search_literature"]),
        )
        .unwrap();
        Fixture {
            _dir: dir,
            ws,
            bus,
            agents,
        }
    }

    struct Recorder(Vec<Action>);

    impl ActionExecutor for Recorder {
        fn execute(&mut self, _: &AgentSpec, action: &Action) -> Result<Executed, String> {
            self.0.push(action.clone());
            match action {
                Action::MarkComplete => Err("review session not approved".into()),
                _ => Ok(Executed::quiet("ok")),
            }
        }
    }

    fn ctx() -> StepContext {
        StepContext {
            profile: "profile".into(),
            extra_system: String::new(),
            context_turns: 20,
            max_output_tokens: 1024,
        }
    }

    fn run(
        f: &mut Fixture,
        id: &str,
        resp: Result<ModelResponse, ModelError>,
        exec: &mut Recorder,
    ) -> Vec<ActionRecord> {
        let st = f.agents.get_mut(&AgentId::new(id)).unwrap();
        let p = prepare_step(st, &f.bus, &f.ws, &ctx()).unwrap();
        finish_step(st, &p, Some("c1".into()), resp, exec, &f.ws, 3).unwrap()
    }

    #[test]
    fn spawn_rules() {
        let mut f = fixture();
        let coding = spawn_agent(
            &mut f.agents,
            &f.bus,
            spec("coding1", AgentRole::CodingAgent, "wsc", &[]),
        )
        .unwrap();
        assert!(f.bus.is_registered(&coding));
        assert!(trajectory(&f.agents, &f.ws, &coding).unwrap().is_empty());
        assert!(matches!(
            spawn_agent(&mut f.agents, &f.bus, spec("x", AgentRole::CodingAgent, "coding1", &[])),
            Err(AgentError::SpawnDenied(_))
        ));
        assert!(matches!(
            spawn_agent(
                &mut f.agents,
                &f.bus,
                spec("r", AgentRole::Reviewer, "wsc", &["read_file"])
            ),
            Err(AgentError::InvalidSpec(_))
        ));
        assert!(matches!(
            trajectory(&f.agents, &f.ws, &"ghost".into()),
            Err(AgentError::UnknownAgent(_))
        ));
    }

    #[test]
    fn garbage_three_times_escalates() {
        let mut f = fixture();
        let mut exec = Recorder(Vec::new());
        let garbage = || Ok(ModelResponse::text("```action\n{oops\n```"));
        for _ in 0..2 {
            let recs = run(&mut f, "wsc", garbage(), &mut exec);
            assert!(matches!(recs[0].entry, Entry::Invalid { .. }));
        }
        assert!(exec.0.is_empty());
        let recs = run(&mut f, "wsc", garbage(), &mut exec);
        assert!(matches!(exec.0[..], [Action::Escalate { .. }]));
        assert_eq!(recs.len(), 2);
        let traj = trajectory(&f.agents, &f.ws, &"wsc".into()).unwrap();
        assert_eq!(traj.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn instruction_is_recorded_and_in_context() {
        let mut f = fixture();
        f.bus
            .send(
                &"pc".into(),
                Outgoing::new("wsc".into(), MessageKind::Instruction, "use pruning"),
            )
            .unwrap();
        let st = f.agents.get_mut(&AgentId::new("wsc")).unwrap();
        let p = prepare_step(st, &f.bus, &f.ws, &ctx()).unwrap();
        assert!(p.request.transcript.last().unwrap().text.contains("use pruning"));
        let traj = read_trajectory(&f.ws, &"wsc".into()).unwrap();
        assert!(matches!(&traj[0].entry, Entry::Received { message } if message.body == "use pruning"));
    }

    #[test]
    fn policy_rejections_are_recorded() {
        let mut f = fixture();
        spawn_agent(
            &mut f.agents,
            &f.bus,
            spec("coding1", AgentRole::CodingAgent, "wsc", &[]),
        )
        .unwrap();
        let mut exec = Recorder(Vec::new());
        let spawn = ModelResponse::tools(vec![crate::model::ToolCall {
            name: "spawn_agent".into(),
            arguments: serde_json::json!({"role": "coding_agent"}),
        }]);
        let recs = run(&mut f, "coding1", Ok(spawn), &mut exec);
        assert!(!recs[0].accepted && recs[0].outcome.contains("SpawnDenied"));
        assert!(exec.0.is_empty());

        let mark = ModelResponse::tools(vec![crate::model::ToolCall {
            name: "mark_complete".into(),
            arguments: serde_json::json!({}),
        }]);
        let recs = run(&mut f, "wsc", Ok(mark), &mut exec);
        assert!(!recs[0].accepted);
        assert_eq!(f.agents[&AgentId::new("wsc")].status, AgentStatus::Active);
    }

    #[test]
    fn wait_is_not_recorded() {
        let mut f = fixture();
        let mut exec = Recorder(Vec::new());
        let recs = run(&mut f, "pc", Ok(ModelResponse::wait()), &mut exec);
        assert!(recs.is_empty());
        assert_eq!(f.agents[&AgentId::new("pc")].status, AgentStatus::Waiting);
    }
}
