//! The orchestration engine.
//!
//! An [`Engine`] owns one project: its workspace, bus, agents, workstreams
//! and review sessions. Work advances in ticks. A tick picks up to
//! `step_budget` runnable agents round-robin, asks the model for each of
//! them (concurrently), then applies the resulting actions one agent at a
//! time in pick order, so a scripted backend always yields the same history.
//!
//! State is written to `<project>/state/` at the end of every tick; the
//! workspace itself is the durable record of everything agents produced.

mod events;
mod exec;
mod final_answer;
mod handle;
mod profiles;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{
    finish_step, prepare_step, read_trajectory, spawn_agent, ActionRecord, AgentError, AgentRole, AgentSpec,
    AgentState, AgentStatus, PreparedStep, StepContext,
};
use crate::bus::{AgentId, Bus, BusError, BusSnapshot, MessageKind, Outgoing};
use crate::clock::{Clock, ClockMode};
use crate::model::{Completion, ModelBackend, ModelError, ModelGateway};
use crate::report::{render, report_path, RenderFormat, Report, ReportError};
use crate::review::{review_path, ReviewConfig, ReviewError, ReviewSession};
use crate::tools::{ToolError, Toolbox};
use crate::workspace::{normalize_path, write_atomic, Workspace, WorkspaceError};

pub use events::{EventKind, EventLog, ProjectEvent, EVENTS_PATH};
pub use final_answer::{grace_for, run_final_answer_mode, FinalAnswerOptions};
pub use handle::ProjectHandle;
pub use profiles::{default_profile, profile_path};

pub const CHAT_LOG_PATH: &str = "chat/log.jsonl";
pub const STATE_DIR: &str = "state";
pub const PROJECT_COORDINATOR: &str = "coordinator";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("GoalNotApproved: {0}")]
    GoalNotApproved(String),
    #[error("unknown goal {0}")]
    UnknownGoal(String),
    #[error("NotUser: {0} may not approve goals")]
    NotUser(AgentId),
    #[error("NoGoalsApproved: at least one goal must be approved")]
    NoGoalsApproved,
    #[error("GateViolation: {0}")]
    GateViolation(String),
    #[error("unknown workstream {0}")]
    UnknownWorkstream(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("state files: {0}")]
    State(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectPhase {
    Onboarding,
    GoalsProposed,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectMode {
    Interactive,
    FinalAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalStatus {
    Proposed,
    Approved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: String,
    pub text: String,
    pub status: GoalStatus,
    #[serde(default)]
    pub workstreams: Vec<String>,
}

/// What the user decides for a proposed goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalDecision {
    Approve,
    /// Approve with revised wording.
    Edit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkstreamStatus {
    Pending,
    Running,
    InReview,
    Completed,
    Failed,
    Unfinished,
}

impl WorkstreamStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Failed | Self::Unfinished)
    }

    /// The allowed transition relation.
    pub fn can_become(self, to: WorkstreamStatus) -> bool {
        use WorkstreamStatus::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Running, InReview)
                | (InReview, Running)
                | (InReview, Completed)
                | (Running, Failed)
                | (InReview, Unfinished)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: WorkstreamStatus,
    pub to: WorkstreamStatus,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workstream {
    pub id: String,
    pub goal: String,
    pub coordinator: AgentId,
    pub instructions: String,
    pub status: WorkstreamStatus,
    pub report_path: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Review session ids, oldest first.
    #[serde(default)]
    pub sessions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEntry {
    pub message_id: String,
    pub from: AgentId,
    pub to: AgentId,
    pub kind: MessageKind,
    pub text: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertEntry {
    pub message_id: String,
    /// The escalation this alert surfaces.
    pub escalation_id: String,
    pub body: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub produced_at: u64,
    pub forced: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub state: ProjectPhase,
    pub mode: ProjectMode,
    pub research_question: String,
    pub goals: Vec<Goal>,
    pub workstreams: Vec<String>,
    pub chat: Vec<ChatEntry>,
    pub alerts: Vec<AlertEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<FinalAnswer>,
    /// Set once the time-limit instruction went out.
    #[serde(default)]
    pub forced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub review: ReviewConfig,
    /// Consecutive unusable model answers before an agent escalates.
    pub max_failures: u32,
    pub context_turns: usize,
    pub max_output_tokens: u32,
    /// Agent steps per tick.
    pub step_budget: usize,
    /// Steps a reviewer may take without a verdict before one is assumed.
    pub reviewer_patience: u32,
    pub report_digest_chars: usize,
    pub clock: ClockMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            review: ReviewConfig::default(),
            max_failures: 3,
            context_turns: 20,
            max_output_tokens: 4096,
            step_budget: 16,
            reviewer_patience: 3,
            report_digest_chars: 6000,
            clock: ClockMode::Logical,
        }
    }
}

/// What one tick did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TickSummary {
    pub tick: u64,
    pub stepped: Vec<AgentId>,
    pub records: usize,
}

impl TickSummary {
    pub fn is_idle(&self) -> bool {
        self.stepped.is_empty()
    }
}

/// Serializable overview for clients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectView {
    #[serde(flatten)]
    pub project: Project,
    pub workstream_details: Vec<Workstream>,
    pub idle: bool,
    pub ticks: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Runtime {
    config: EngineConfig,
    clock: u64,
    next_call: u64,
    ticks: u64,
    #[serde(default)]
    cursor: Option<AgentId>,
    #[serde(default)]
    fetched: BTreeSet<String>,
    #[serde(default)]
    reviewer_idle: BTreeMap<AgentId, u32>,
    #[serde(default)]
    backend: Option<Value>,
}

#[derive(Serialize, Deserialize)]
struct ProjectFile {
    project: Project,
    workstreams: BTreeMap<String, Workstream>,
}

pub struct Engine {
    dir: PathBuf,
    config: EngineConfig,
    workspace: Arc<Workspace>,
    bus: Arc<Bus>,
    gateway: Arc<ModelGateway>,
    tools: Arc<Toolbox>,
    events: Arc<EventLog>,
    project: Project,
    workstreams: BTreeMap<String, Workstream>,
    agents: BTreeMap<AgentId, AgentState>,
    reviews: BTreeMap<String, ReviewSession>,
    ticks: u64,
    cursor: Option<AgentId>,
    fetched: BTreeSet<String>,
    reviewer_idle: BTreeMap<AgentId, u32>,
    /// Agents concluded while the current action executed.
    concluded: BTreeSet<AgentId>,
    /// Alert message id -> escalation it relays.
    alert_source: BTreeMap<String, String>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("project", &self.project.id)
            .field("ticks", &self.ticks)
            .finish()
    }
}

fn state_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(STATE_DIR).join(name)
}

fn read_state<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = state_file(dir, name);
    let bytes = std::fs::read(&path).map_err(|e| EngineError::State(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| EngineError::State(format!("{}: {e}", path.display())))
}

/// True when `dir` holds a project created by [`Engine::create`].
pub fn is_project_dir(dir: &Path) -> bool {
    state_file(dir, "runtime.json").exists()
}

/// Reads the persisted project overview without opening an engine.
pub fn load_project(dir: &Path) -> Result<(Project, BTreeMap<String, Workstream>)> {
    let file: ProjectFile = read_state(dir, "project.json")?;
    Ok((file.project, file.workstreams))
}

/// Default capability tools per role.
pub fn default_tools(role: AgentRole) -> BTreeSet<String> {
    let names: &[&str] = match role {
        AgentRole::ProjectCoordinator => &["list_files", "read_file"],
        AgentRole::WorkstreamCoordinator => &[
            "execute_code",
            "execute_parallel",
            "fetch_document",
            "list_files",
            "read_file",
            "search_literature",
        ],
        AgentRole::Reviewer => crate::agent::REVIEWER_TOOLS,
        AgentRole::LiteratureAgent => &["fetch_document", "read_file", "search_literature"],
        AgentRole::CodingAgent => &["execute_code", "execute_parallel", "list_files", "read_file"],
        AgentRole::ProverAgent => &["execute_code", "read_file"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Runs prepared steps against the gateway concurrently, keeping order.
pub fn call_all(
    gateway: &ModelGateway,
    steps: Vec<PreparedStep>,
) -> Vec<(PreparedStep, Result<Completion, ModelError>)> {
    if steps.len() <= 1 {
        return steps
            .into_iter()
            .map(|s| {
                let r = gateway.call(&s.request);
                (s, r)
            })
            .collect();
    }
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = steps.iter().map(|s| scope.spawn(|| gateway.call(&s.request))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(ModelError::BackendUnavailable {
                        attempts: 1,
                        reason: "model call panicked".into(),
                    })
                })
            })
            .collect()
    });
    steps.into_iter().zip(results).collect()
}

impl Engine {
    /// Creates a fresh project in `dir`. The directory must not already hold one.
    pub fn create(
        dir: impl Into<PathBuf>,
        project_id: impl Into<String>,
        config: EngineConfig,
        backend: Arc<dyn ModelBackend>,
        tools: Arc<Toolbox>,
    ) -> Result<Engine> {
        let dir = dir.into();
        if is_project_dir(&dir) {
            return Err(EngineError::InvalidState(format!(
                "{} already holds a project",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir.join(STATE_DIR))?;
        let clock = Arc::new(Clock::new(config.clock, 0));
        let workspace = Arc::new(Workspace::open(&dir, clock)?);
        let bus = Arc::new(Bus::new(workspace.clone()));
        let gateway = Arc::new(ModelGateway::new(backend, workspace.clone(), 0));
        let events = Arc::new(EventLog::open(workspace.clone())?);
        for role in AgentRole::all() {
            let path = profile_path(role.tag());
            if !workspace.exists(&path) {
                workspace.write_file(&path, default_profile(role).as_bytes(), "system", Some(0))?;
            }
        }
        let engine = Engine {
            dir,
            config,
            workspace,
            bus,
            gateway,
            tools,
            events,
            project: Project {
                id: project_id.into(),
                state: ProjectPhase::Onboarding,
                mode: ProjectMode::Interactive,
                research_question: String::new(),
                goals: Vec::new(),
                workstreams: Vec::new(),
                chat: Vec::new(),
                alerts: Vec::new(),
                final_answer: None,
                forced: false,
            },
            workstreams: BTreeMap::new(),
            agents: BTreeMap::new(),
            reviews: BTreeMap::new(),
            ticks: 0,
            cursor: None,
            fetched: BTreeSet::new(),
            reviewer_idle: BTreeMap::new(),
            concluded: BTreeSet::new(),
            alert_source: BTreeMap::new(),
        };
        engine.persist()?;
        Ok(engine)
    }

    /// Reopens a persisted project, restoring the backend's checkpoint.
    pub fn open(dir: impl Into<PathBuf>, backend: Arc<dyn ModelBackend>, tools: Arc<Toolbox>) -> Result<Engine> {
        let dir = dir.into();
        let rt: Runtime = read_state(&dir, "runtime.json")?;
        let file: ProjectFile = read_state(&dir, "project.json")?;
        let agents: BTreeMap<AgentId, AgentState> = read_state(&dir, "agents.json")?;
        let reviews: BTreeMap<String, ReviewSession> = read_state(&dir, "reviews.json")?;
        let bus_state: BusSnapshot = read_state(&dir, "bus.json")?;
        let clock = Arc::new(Clock::new(rt.config.clock, rt.clock));
        let workspace = Arc::new(Workspace::open(&dir, clock)?);
        if let Some(cp) = &rt.backend {
            backend.restore(cp)?;
        }
        let bus = Arc::new(Bus::restore(workspace.clone(), bus_state));
        let gateway = Arc::new(ModelGateway::new(backend, workspace.clone(), rt.next_call));
        let events = Arc::new(EventLog::open(workspace.clone())?);
        Ok(Engine {
            dir,
            config: rt.config,
            workspace,
            bus,
            gateway,
            tools,
            events,
            project: file.project,
            workstreams: file.workstreams,
            agents,
            reviews,
            ticks: rt.ticks,
            cursor: rt.cursor,
            fetched: rt.fetched,
            reviewer_idle: rt.reviewer_idle,
            concluded: BTreeSet::new(),
            alert_source: BTreeMap::new(),
        })
    }

    /// Writes all engine state atomically, one file per concern.
    pub fn persist(&self) -> Result<()> {
        let put = |name: &str, v: Value| -> Result<()> {
            let mut bytes = serde_json::to_vec_pretty(&v).expect("state serializes");
            bytes.push(b'\n');
            write_atomic(&state_file(&self.dir, name), &bytes)?;
            Ok(())
        };
        put(
            "project.json",
            json!({"project": self.project, "workstreams": self.workstreams}),
        )?;
        put(
            "agents.json",
            serde_json::to_value(&self.agents).expect("agents serialize"),
        )?;
        put(
            "reviews.json",
            serde_json::to_value(&self.reviews).expect("reviews serialize"),
        )?;
        put(
            "bus.json",
            serde_json::to_value(self.bus.snapshot()).expect("bus serializes"),
        )?;
        let rt = Runtime {
            config: self.config,
            clock: self.workspace.clock().current(),
            next_call: self.gateway.next_call(),
            ticks: self.ticks,
            cursor: self.cursor.clone(),
            fetched: self.fetched.clone(),
            reviewer_idle: self.reviewer_idle.clone(),
            backend: self.gateway.backend().checkpoint(),
        };
        put("runtime.json", serde_json::to_value(rt).expect("runtime serializes"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.workspace
    }

    pub fn bus(&self) -> &Arc<Bus> {
        &self.bus
    }

    pub fn gateway(&self) -> &Arc<ModelGateway> {
        &self.gateway
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn project(&self) -> &Project {
        &self.project
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn workstreams(&self) -> &BTreeMap<String, Workstream> {
        &self.workstreams
    }

    pub fn workstream(&self, id: &str) -> Result<&Workstream> {
        self.workstreams
            .get(id)
            .ok_or_else(|| EngineError::UnknownWorkstream(id.to_string()))
    }

    pub fn agents(&self) -> &BTreeMap<AgentId, AgentState> {
        &self.agents
    }

    pub fn reviews(&self) -> &BTreeMap<String, ReviewSession> {
        &self.reviews
    }

    pub fn view(&self) -> ProjectView {
        ProjectView {
            project: self.project.clone(),
            workstream_details: self.workstreams.values().cloned().collect(),
            idle: self.is_idle(),
            ticks: self.ticks,
        }
    }

    fn pc_id() -> AgentId {
        AgentId::new(PROJECT_COORDINATOR)
    }

    fn spawn_project_coordinator(&mut self, instructions: String) -> Result<()> {
        let spec = AgentSpec {
            id: Self::pc_id(),
            role: AgentRole::ProjectCoordinator,
            prompt_profile: AgentRole::ProjectCoordinator.tag().into(),
            tool_allowlist: default_tools(AgentRole::ProjectCoordinator),
            parent: AgentId::user(),
            backend_binding: None,
            instructions,
            workstream: None,
        };
        spawn_agent(&mut self.agents, &self.bus, spec)?;
        Ok(())
    }

    /// Starts an interactive project from the user's brief.
    pub fn start(&mut self, brief: &str, attachments: &[(String, Vec<u8>)]) -> Result<String> {
        if self.agents.contains_key(&Self::pc_id()) {
            return Err(EngineError::InvalidState("project already started".into()));
        }
        self.spawn_project_coordinator(
            "Onboard the user: discuss their brief (the first user message), then propose a research \
question and goals for approval."
                .into(),
        )?;
        let id = self.handle_user_message(brief, attachments)?;
        self.persist()?;
        Ok(id)
    }

    /// Starts a project in final-answer mode: onboarding is skipped and the
    /// single goal "solve the problem" is approved up front.
    pub fn start_final_answer(&mut self, problem: &str) -> Result<String> {
        if self.agents.contains_key(&Self::pc_id()) {
            return Err(EngineError::InvalidState("project already started".into()));
        }
        self.project.mode = ProjectMode::FinalAnswer;
        self.project.state = ProjectPhase::Active;
        self.project.research_question = problem.trim().to_string();
        self.project.goals = vec![Goal {
            id: "g1".into(),
            text: "solve the problem".into(),
            status: GoalStatus::Approved,
            workstreams: Vec::new(),
        }];
        self.spawn_project_coordinator(format!(
            "Final-answer mode. Solve the problem below. Goal g1 \"solve the problem\" is already approved; \
create workstreams for it as needed and deliver the answer with give_final_answer before the time limit.\n\n\
Problem:\n{}",
            problem.trim()
        ))?;
        self.emit_goals()?;
        let id = self.handle_user_message(problem, &[])?;
        self.persist()?;
        Ok(id)
    }

    /// Delivers a chat message from the user to the project coordinator.
    /// Valid in every project state.
    pub fn handle_user_message(&mut self, text: &str, attachments: &[(String, Vec<u8>)]) -> Result<String> {
        let pc = Self::pc_id();
        if !self.agents.contains_key(&pc) {
            return Err(EngineError::InvalidState("project has not started".into()));
        }
        let mut paths = Vec::new();
        for (name, bytes) in attachments {
            let path = normalize_path(&format!("uploads/{name}"))?;
            self.workspace.write_file(&path, bytes, "user", None)?;
            paths.push(path);
        }
        let user = AgentId::user();
        let id = self.bus.send(
            &user,
            Outgoing::new(pc.clone(), MessageKind::UserChat, text).with_attachments(paths.clone()),
        )?;
        self.log_chat(ChatEntry {
            message_id: id.clone(),
            from: user,
            to: pc,
            kind: MessageKind::UserChat,
            text: text.to_string(),
            attachments: paths,
            at: self.workspace.clock().now(),
        })?;
        self.persist()?;
        Ok(id)
    }

    fn log_chat(&mut self, entry: ChatEntry) -> Result<()> {
        let mut line = serde_json::to_vec(&entry).expect("chat entry serializes");
        line.push(b'\n');
        self.workspace.append(CHAT_LOG_PATH, &line, "engine")?;
        self.events.emit(
            EventKind::ChatMessage,
            serde_json::to_value(&entry).expect("chat entry serializes"),
        )?;
        self.project.chat.push(entry);
        Ok(())
    }

    fn emit_goals(&self) -> Result<()> {
        self.events.emit(
            EventKind::GoalUpdate,
            json!({
                "state": self.project.state,
                "research_question": self.project.research_question,
                "goals": self.project.goals,
            }),
        )?;
        Ok(())
    }

    /// Applies the user's decisions on proposed goals. Any approval moves
    /// the project to Active; the coordinator is told which goals passed.
    pub fn approve_goals(&mut self, actor: &AgentId, decisions: &BTreeMap<String, GoalDecision>) -> Result<Vec<Goal>> {
        if !actor.is_user() {
            return Err(EngineError::NotUser(actor.clone()));
        }
        if self.project.mode == ProjectMode::FinalAnswer {
            return Err(EngineError::InvalidState("goals are fixed in final-answer mode".into()));
        }
        if self.project.goals.is_empty() {
            return Err(EngineError::InvalidState("no goals have been proposed".into()));
        }
        for id in decisions.keys() {
            if !self.project.goals.iter().any(|g| &g.id == id) {
                return Err(EngineError::UnknownGoal(id.clone()));
            }
        }
        let already = self.project.goals.iter().any(|g| g.status == GoalStatus::Approved);
        if decisions.is_empty() && !already {
            return Err(EngineError::NoGoalsApproved);
        }
        let mut approved = Vec::new();
        for g in self.project.goals.iter_mut() {
            match decisions.get(&g.id) {
                Some(GoalDecision::Approve) => {}
                Some(GoalDecision::Edit(text)) if !text.trim().is_empty() => g.text = text.trim().to_string(),
                Some(GoalDecision::Edit(_)) => {
                    return Err(EngineError::InvalidState(format!("empty wording for goal {}", g.id)))
                }
                None => continue,
            }
            g.status = GoalStatus::Approved;
            approved.push(g.clone());
        }
        self.project.state = ProjectPhase::Active;
        self.emit_goals()?;
        let mut body = String::from("Goals approved:\n");
        for g in &approved {
            body.push_str(&format!("- {}: {}\n", g.id, g.text));
        }
        let user = AgentId::user();
        let pc = Self::pc_id();
        let id = self
            .bus
            .send(&user, Outgoing::new(pc.clone(), MessageKind::UserChat, body.clone()))?;
        self.log_chat(ChatEntry {
            message_id: id,
            from: user,
            to: pc,
            kind: MessageKind::UserChat,
            text: body,
            attachments: Vec::new(),
            at: self.workspace.clock().now(),
        })?;
        self.persist()?;
        Ok(approved)
    }

    /// Sends the time-limit instruction to the project coordinator.
    pub fn force_answer(&mut self) -> Result<()> {
        if self.project.forced {
            return Ok(());
        }
        self.bus.send(
            &AgentId::user(),
            Outgoing::new(
                Self::pc_id(),
                MessageKind::Instruction,
                "Time limit reached: give your final answer now with give_final_answer, using the best result \
available.",
            ),
        )?;
        self.project.forced = true;
        self.persist()
    }

    fn runnable(&self) -> Vec<AgentId> {
        self.agents
            .iter()
            .filter(|(id, st)| !st.is_terminated() && (st.status == AgentStatus::Active || self.bus.pending(id) > 0))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Whether no agent can make progress without outside input.
    pub fn is_idle(&self) -> bool {
        self.is_finished() || self.runnable().is_empty()
    }

    fn is_finished(&self) -> bool {
        self.project.mode == ProjectMode::FinalAnswer && self.project.final_answer.is_some()
    }

    fn read_profile(&self, name: &str, role: AgentRole) -> String {
        self.workspace
            .read_text(&profile_path(name), None)
            .unwrap_or_else(|_| default_profile(role).to_string())
    }

    fn report_digest(&self, ws: &str) -> String {
        let path = report_path(ws);
        match (self.load_report(ws), self.workspace.latest_version(&path)) {
            (Ok(r), Some(v)) => format!(
                "Working paper {path} (version {v}):\n{}",
                r.digest(self.config.report_digest_chars)
            ),
            _ => String::new(),
        }
    }

    fn project_digest(&self) -> String {
        let p = &self.project;
        let mut s = format!("Project {} is {:?}.", p.id, p.state);
        if !p.research_question.is_empty() {
            s.push_str(&format!("\nResearch question: {}", p.research_question));
        }
        for g in &p.goals {
            s.push_str(&format!("\nGoal {} [{:?}]: {}", g.id, g.status, g.text));
            for w in &g.workstreams {
                if let Some(ws) = self.workstreams.get(w) {
                    s.push_str(&format!("\n  workstream {w}: {:?}", ws.status));
                }
            }
        }
        s
    }

    fn step_context(&self, id: &AgentId) -> StepContext {
        let spec = &self.agents[id].spec;
        let extra_system = match (spec.role, &spec.workstream) {
            (AgentRole::ProjectCoordinator, _) => self.project_digest(),
            (AgentRole::WorkstreamCoordinator | AgentRole::Reviewer, Some(ws)) => self.report_digest(ws),
            _ => String::new(),
        };
        StepContext {
            profile: self.read_profile(&spec.prompt_profile, spec.role),
            extra_system,
            context_turns: self.config.context_turns,
            max_output_tokens: self.config.max_output_tokens,
        }
    }

    /// Picks runnable agents and builds their model requests.
    pub fn plan_tick(&mut self) -> Result<Vec<PreparedStep>> {
        if self.is_finished() {
            return Ok(Vec::new());
        }
        let mut runnable = self.runnable();
        if runnable.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(c) = &self.cursor {
            let start = runnable.iter().position(|a| a > c).unwrap_or(0);
            runnable.rotate_left(start);
        }
        runnable.truncate(self.config.step_budget.max(1));
        let mut steps = Vec::with_capacity(runnable.len());
        for id in &runnable {
            let ws = self.agents[id].spec.workstream.clone();
            if self.agents[id].spec.role == AgentRole::WorkstreamCoordinator {
                if let Some(w) = ws {
                    if self
                        .workstreams
                        .get(&w)
                        .is_some_and(|w| w.status == WorkstreamStatus::Pending)
                    {
                        self.transition(&w, WorkstreamStatus::Running)?;
                    }
                }
            }
            let ctx = self.step_context(id);
            let state = self.agents.get_mut(id).expect("runnable agent exists");
            steps.push(prepare_step(state, &self.bus, &self.workspace, &ctx)?);
        }
        self.cursor = runnable.last().cloned();
        Ok(steps)
    }

    fn awaiting_verdict(&self, id: &AgentId) -> bool {
        self.reviews.values().any(|s| s.awaiting().contains(id))
    }

    /// Records model results and executes the actions, in step order.
    pub fn apply_tick(&mut self, results: Vec<(PreparedStep, Result<Completion, ModelError>)>) -> Result<TickSummary> {
        let mut stepped = Vec::new();
        let mut records = 0;
        for (prepared, result) in results {
            let call_id = self.gateway.record(&prepared.request, &result)?;
            let id = prepared.agent.clone();
            let mut state = match self.agents.get(&id) {
                Some(s) if !s.is_terminated() => s.clone(),
                _ => continue,
            };
            let awaiting = self.awaiting_verdict(&id);
            let ws = self.workspace.clone();
            let max_failures = self.config.max_failures;
            self.concluded.clear();
            let recs = finish_step(
                &mut state,
                &prepared,
                Some(call_id),
                result.map(|c| c.response),
                self,
                &ws,
                max_failures,
            )?;
            if self.concluded.remove(&id) {
                state.status = AgentStatus::Terminated;
            }
            self.concluded.clear();
            records += recs.len();
            self.agents.insert(id.clone(), state);
            if awaiting {
                self.nudge_reviewer(&id)?;
            }
            self.drain_user_mailbox()?;
            self.settle_reviews()?;
            stepped.push(id);
        }
        self.ticks += 1;
        self.persist()?;
        Ok(TickSummary {
            tick: self.ticks,
            stepped,
            records,
        })
    }

    /// One full tick with model calls made concurrently.
    pub fn tick(&mut self) -> Result<TickSummary> {
        let steps = self.plan_tick()?;
        if steps.is_empty() {
            return Ok(TickSummary {
                tick: self.ticks,
                stepped: Vec::new(),
                records: 0,
            });
        }
        let gateway = self.gateway.clone();
        let results = call_all(&gateway, steps);
        self.apply_tick(results)
    }

    /// Ticks until idle or `max_ticks` ticks ran; returns ticks run.
    pub fn run_until_idle(&mut self, max_ticks: u64) -> Result<u64> {
        let mut n = 0;
        while n < max_ticks {
            if self.tick()?.is_idle() {
                break;
            }
            n += 1;
        }
        Ok(n)
    }

    /// A reviewer that went quiet without a verdict gets more steps, then
    /// an assumed rejection.
    fn nudge_reviewer(&mut self, id: &AgentId) -> Result<()> {
        if !self.awaiting_verdict(id) {
            self.reviewer_idle.remove(id);
            return Ok(());
        }
        let Some(state) = self.agents.get_mut(id) else {
            return Ok(());
        };
        if state.status != AgentStatus::Waiting {
            return Ok(());
        }
        let n = self.reviewer_idle.entry(id.clone()).or_insert(0);
        *n += 1;
        if *n < self.config.reviewer_patience {
            state.status = AgentStatus::Active;
            return Ok(());
        }
        self.reviewer_idle.remove(id);
        let verdict = crate::review::no_verdict_reject();
        for session in self.reviews.values_mut() {
            if session.awaiting().contains(id) {
                session.record_verdict(id, (&verdict).into())?;
            }
        }
        Ok(())
    }

    /// Moves messages addressed to the user into chat and alerts.
    fn drain_user_mailbox(&mut self) -> Result<()> {
        let user = AgentId::user();
        for m in self.bus.poll(&user, usize::MAX)? {
            match m.kind {
                MessageKind::Alert => {
                    let escalation_id = self.alert_source.remove(&m.id).unwrap_or_else(|| m.id.clone());
                    let alert = AlertEntry {
                        message_id: m.id.clone(),
                        escalation_id,
                        body: m.body.clone(),
                        attachments: m.attachments.clone(),
                        at: self.workspace.clock().now(),
                    };
                    self.events.emit(
                        EventKind::Alert,
                        serde_json::to_value(&alert).expect("alert serializes"),
                    )?;
                    self.project.alerts.push(alert);
                }
                kind => {
                    let entry = ChatEntry {
                        message_id: m.id.clone(),
                        from: m.sender.clone(),
                        to: user.clone(),
                        kind,
                        text: m.body.clone(),
                        attachments: m.attachments.clone(),
                        at: self.workspace.clock().now(),
                    };
                    self.log_chat(entry)?;
                    if kind == MessageKind::FinalAnswer && self.project.final_answer.is_none() {
                        let answer = FinalAnswer {
                            text: m.body,
                            produced_at: self.workspace.clock().now(),
                            forced: self.project.forced,
                            error: None,
                        };
                        self.events.emit(
                            EventKind::FinalAnswer,
                            serde_json::to_value(&answer).expect("answer serializes"),
                        )?;
                        self.project.final_answer = Some(answer);
                    }
                }
            }
        }
        Ok(())
    }

    fn transition(&mut self, ws_id: &str, to: WorkstreamStatus) -> Result<()> {
        let at = self.workspace.clock().now();
        let ws = self
            .workstreams
            .get_mut(ws_id)
            .ok_or_else(|| EngineError::UnknownWorkstream(ws_id.to_string()))?;
        if !ws.status.can_become(to) {
            return Err(EngineError::GateViolation(format!(
                "workstream {ws_id} cannot go from {:?} to {to:?}",
                ws.status
            )));
        }
        ws.transitions.push(Transition {
            from: ws.status,
            to,
            at,
        });
        ws.status = to;
        let payload = json!({"workstream": ws_id, "status": to, "warnings": ws.warnings});
        self.events.emit(EventKind::WorkstreamStatus, payload)?;
        Ok(())
    }

    /// Terminates `root` and every agent below it.
    fn terminate_subtree(&mut self, root: &AgentId) {
        let mut ids = self.bus.chart().descendants(root);
        ids.push(root.clone());
        for id in ids {
            if let Some(st) = self.agents.get_mut(&id) {
                st.status = AgentStatus::Terminated;
            }
            self.reviewer_idle.remove(&id);
            self.concluded.insert(id);
        }
    }

    /// Moves a workstream to a terminal status. Completion requires an
    /// approved review session and a final report; the other outcomes
    /// require a summary.
    pub fn conclude_workstream(&mut self, ws_id: &str, outcome: WorkstreamStatus, summary: &str) -> Result<()> {
        let ws = self.workstream(ws_id)?.clone();
        match outcome {
            WorkstreamStatus::Completed => {
                let approved = ws
                    .sessions
                    .last()
                    .and_then(|s| self.reviews.get(s))
                    .is_some_and(|s| s.status == crate::review::SessionStatus::Approved);
                let final_report = self
                    .load_report(ws_id)
                    .is_ok_and(|r| r.status == crate::report::ReportStatus::Final);
                if !approved || !final_report {
                    return Err(EngineError::GateViolation(format!(
                        "workstream {ws_id} needs an approved review and a final report to complete"
                    )));
                }
            }
            WorkstreamStatus::Failed | WorkstreamStatus::Unfinished => {
                if summary.trim().is_empty() {
                    return Err(EngineError::GateViolation("a summary is required".into()));
                }
            }
            other => {
                return Err(EngineError::GateViolation(format!(
                    "{other:?} is not a terminal status"
                )))
            }
        }
        if !ws.status.can_become(outcome) {
            return Err(EngineError::GateViolation(format!(
                "workstream {ws_id} cannot go from {:?} to {outcome:?}",
                ws.status
            )));
        }
        {
            let w = self.workstreams.get_mut(ws_id).expect("checked above");
            w.summary = Some(summary.trim().to_string());
            if outcome != WorkstreamStatus::Completed {
                w.warnings.push(summary.trim().to_string());
            }
        }
        self.transition(ws_id, outcome)?;
        let mut attachments = vec![report_path(ws_id)];
        if self.workspace.exists(&review_path(ws_id)) {
            attachments.push(review_path(ws_id));
        }
        if let Some(parent) = self.bus.parent_of(&ws.coordinator) {
            self.bus.send(
                &ws.coordinator,
                Outgoing::new(
                    parent,
                    MessageKind::StatusUpdate,
                    format!("Workstream {ws_id} is {outcome:?}: {}", summary.trim()),
                )
                .with_attachments(attachments),
            )?;
        }
        self.terminate_subtree(&ws.coordinator);
        Ok(())
    }

    pub fn load_report(&self, ws: &str) -> Result<Report> {
        let bytes = self.workspace.read_file(&report_path(ws), None)?;
        Ok(Report::from_json(&bytes)?)
    }

    pub fn render_report(&self, ws: &str, format: RenderFormat, version: Option<u32>) -> Result<Vec<u8>> {
        self.workstream(ws)?;
        let bytes = self.workspace.read_file(&report_path(ws), version)?;
        Ok(render(&Report::from_json(&bytes)?, format))
    }

    /// The workstream coordinator's trajectory.
    pub fn trajectory(&self, ws: &str) -> Result<Vec<ActionRecord>> {
        let w = self.workstream(ws)?;
        Ok(read_trajectory(&self.workspace, &w.coordinator)?)
    }

    pub fn review(&self, ws: &str) -> Result<Value> {
        self.workstream(ws)?;
        let path = review_path(ws);
        if !self.workspace.exists(&path) {
            return Ok(json!({"workstream": ws, "sessions": []}));
        }
        let bytes = self.workspace.read_file(&path, None)?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::State(e.to_string()))
    }

    fn review_document(&self, ws: &str) -> Value {
        let sessions: Vec<Value> = self.workstreams[ws]
            .sessions
            .iter()
            .filter_map(|s| self.reviews.get(s))
            .map(|s| {
                let (raised, resolved) = s.issue_diff();
                let mut v = serde_json::to_value(s).expect("session serializes");
                v["latest_diff"] = json!({"raised": raised, "resolved": resolved});
                v
            })
            .collect();
        json!({"workstream": ws, "sessions": sessions})
    }

    fn write_review_file(&self, ws: &str) -> Result<()> {
        let path = review_path(ws);
        let mut bytes = serde_json::to_vec_pretty(&self.review_document(ws)).expect("json");
        bytes.push(b'\n');
        if self.workspace.read_file(&path, None).ok().as_deref() != Some(&bytes[..]) {
            self.workspace.write_file(&path, &bytes, "review", None)?;
        }
        Ok(())
    }

    /// Closes complete review rounds and acts on their outcome.
    fn settle_reviews(&mut self) -> Result<()> {
        let ready: Vec<String> = self
            .reviews
            .iter()
            .filter(|(_, s)| s.pending.is_some() && s.awaiting().is_empty())
            .map(|(id, _)| id.clone())
            .collect();
        for sid in ready {
            let session = self.reviews.get_mut(&sid).expect("listed above");
            session.finish_round()?;
            let status = session.status;
            let ws = session.workstream.clone();
            self.write_review_file(&ws)?;
            match status {
                crate::review::SessionStatus::Approved => {}
                crate::review::SessionStatus::Open => self.transition(&ws, WorkstreamStatus::Running)?,
                crate::review::SessionStatus::Stalled => self.handle_stall(&sid)?,
            }
        }
        Ok(())
    }

    /// Surfaces a stalled review: contested blocks get reviewer notes, the
    /// coordinator escalates to the project coordinator, the workstream ends
    /// Unfinished and the user receives exactly one alert.
    fn handle_stall(&mut self, sid: &str) -> Result<()> {
        let session = self.reviews[sid].clone();
        let ws_id = session.workstream.clone();
        let ws = self.workstreams[&ws_id].clone();
        let rpath = report_path(&ws_id);
        let vpath = review_path(&ws_id);

        let mut report = self.load_report(&ws_id)?;
        let latest = self.workspace.latest_version(&rpath).unwrap_or(0);
        let mut noted = false;
        if let Some(last) = session.latest_round() {
            let workspace = self.workspace.clone();
            let lookup = move |p: &str| workspace.latest_version(p);
            for issue in last.issues().values() {
                let Some(block) = report.block(&issue.location) else {
                    continue;
                };
                let len = crate::report::normalize_text(&block.text).chars().count();
                let anchor = crate::report::Anchor {
                    block: block.id.clone(),
                    span: crate::report::Span { start: 0, end: len },
                };
                report.annotate(
                    anchor,
                    format!("Contested in review {sid}: {}", issue.text),
                    crate::report::ProvenanceKind::Reviewer,
                    &vpath,
                    &lookup,
                )?;
                noted = true;
            }
        }
        if noted {
            let v = self
                .workspace
                .write_file(&rpath, &report.to_json(), ws.coordinator.as_str(), Some(latest))?;
            self.events.emit(
                EventKind::ReportUpdated,
                json!({"workstream": ws_id, "version": v.version, "status": report.status}),
            )?;
        }

        let summary = session.issue_summary();
        let attachments = vec![rpath.clone(), vpath.clone()];
        let escalation = self
            .bus
            .escalate(&ws.coordinator, summary.clone(), attachments.clone())?;
        self.reviews
            .get_mut(sid)
            .expect("session exists")
            .close_as_escalated(escalation.clone())?;
        self.write_review_file(&ws_id)?;
        self.conclude_workstream(
            &ws_id,
            WorkstreamStatus::Unfinished,
            &format!("Review stalled after {} round(s); see {vpath}", session.rounds.len()),
        )?;
        let alert = self.bus.escalate(
            &Self::pc_id(),
            format!("Workstream {ws_id} (goal: {}) is unfinished.\n{summary}", ws.goal),
            attachments,
        )?;
        self.alert_source.insert(alert, escalation);
        self.drain_user_mailbox()
    }
}
