//! The boundary between orchestration and model intelligence.
//!
//! Every agent decision goes through [`ModelBackend::call`]. Two backends ship:
//! [`ScriptedBackend`] replays a fixture deterministically, and [`WireBackend`]
//! speaks JSON over HTTP to a real completion endpoint. [`ModelGateway`] sits in
//! front of whichever backend is configured and appends every call to the
//! workspace log before the response reaches an agent.

mod actions;
mod scripted;
mod wire;

pub use actions::{parse_actions, protocol_tool_schemas, ParseError, ParsedActions, PROTOCOL_TOOLS};
pub use scripted::{load_script, FixtureEntry, FixtureMatch, ScriptFixture, ScriptedBackend};
pub use wire::{Dialect, WireBackend, WireConfig};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentRole;
use crate::bus::AgentId;
use crate::workspace::{Workspace, WorkspaceError};

pub const CALL_LOG_PATH: &str = "model/calls.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub agent_role: AgentRole,
    pub agent_id: AgentId,
    /// Backend mapping key; routes the call when several backends are configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
    pub system: String,
    pub transcript: Vec<Turn>,
    pub tool_schemas: Vec<ToolSchema>,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelRequest {
    pub fn last_turn(&self) -> Option<&Turn> {
        self.transcript.last()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tool_schemas {
            if !seen.insert(t.name.as_str()) {
                return Err(ModelError::InvalidRequest(format!("duplicate tool name {}", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default = "empty_object")]
    pub arguments: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finish {
    Stop,
    ToolCall,
    Length,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    pub finish: Finish,
}

impl ModelResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tool_calls: Vec::new(),
            finish: Finish::Stop,
        }
    }

    pub fn tools(calls: Vec<ToolCall>) -> Self {
        Self {
            text: String::new(),
            tool_calls: calls,
            finish: Finish::ToolCall,
        }
    }

    /// The response used when an agent has nothing to do.
    pub fn wait() -> Self {
        Self::tools(vec![ToolCall {
            name: "wait".into(),
            arguments: empty_object(),
        }])
    }

    pub fn is_well_formed(&self) -> bool {
        self.tool_calls.is_empty() != (self.finish == Finish::ToolCall)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no fixture entry matches {agent} ({role:?}): {detail}")]
    ScriptMismatch {
        role: AgentRole,
        agent: AgentId,
        detail: String,
    },
    #[error("fixture entries for {agent} ({role:?}) are exhausted")]
    ScriptExhausted { role: AgentRole, agent: AgentId },
    #[error("fixture parse error{}: {message}", index.map(|i| format!(" in entry {i}")).unwrap_or_default())]
    FixtureParse { index: Option<usize>, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A completed call plus transport details.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: ModelResponse,
    pub retries: u32,
}

pub trait ModelBackend: Send + Sync {
    fn call(&self, request: &ModelRequest) -> Result<Completion, ModelError>;

    /// Serializable replay position, for backends that have one.
    fn checkpoint(&self) -> Option<Value> {
        None
    }

    fn restore(&self, _state: &Value) -> Result<(), ModelError> {
        Ok(())
    }

    fn describe(&self) -> String;
}

/// Runs one completion against `backend`.
pub fn complete(backend: &dyn ModelBackend, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
    request.validate()?;
    let c = backend.call(request)?;
    if !c.response.is_well_formed() {
        return Err(ModelError::InvalidResponse(
            "tool_calls must be non-empty exactly when finish is tool_call".into(),
        ));
    }
    Ok(c.response)
}

/// Dispatches by binding key, then role tag, then a default backend.
pub struct RoutedBackend {
    default: Arc<dyn ModelBackend>,
    routes: BTreeMap<String, Arc<dyn ModelBackend>>,
}

impl RoutedBackend {
    pub fn new(default: Arc<dyn ModelBackend>) -> Self {
        Self {
            default,
            routes: BTreeMap::new(),
        }
    }

    pub fn route(mut self, key: impl Into<String>, backend: Arc<dyn ModelBackend>) -> Self {
        self.routes.insert(key.into(), backend);
        self
    }

    fn pick(&self, request: &ModelRequest) -> &Arc<dyn ModelBackend> {
        request
            .binding
            .as_ref()
            .and_then(|b| self.routes.get(b))
            .or_else(|| self.routes.get(request.agent_role.tag()))
            .unwrap_or(&self.default)
    }
}

impl ModelBackend for RoutedBackend {
    fn call(&self, request: &ModelRequest) -> Result<Completion, ModelError> {
        self.pick(request).call(request)
    }

    fn checkpoint(&self) -> Option<Value> {
        let mut map = serde_json::Map::new();
        if let Some(v) = self.default.checkpoint() {
            map.insert("default".into(), v);
        }
        for (k, b) in &self.routes {
            if let Some(v) = b.checkpoint() {
                map.insert(k.clone(), v);
            }
        }
        (!map.is_empty()).then_some(Value::Object(map))
    }

    fn restore(&self, state: &Value) -> Result<(), ModelError> {
        if let Some(v) = state.get("default") {
            self.default.restore(v)?;
        }
        for (k, b) in &self.routes {
            if let Some(v) = state.get(k) {
                b.restore(v)?;
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!("routed(default={})", self.default.describe())
    }
}

/// One line of `model/calls.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub id: String,
    pub agent: AgentId,
    pub request: ModelRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ModelResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub retries: u32,
    pub at: u64,
}

/// Front door to the configured backend with call logging.
///
/// `call` may run concurrently; `record` assigns the call id and writes the
/// log line, and is invoked by the engine in a deterministic order.
pub struct ModelGateway {
    backend: Arc<dyn ModelBackend>,
    workspace: Arc<Workspace>,
    next_call: AtomicU64,
}

impl ModelGateway {
    pub fn new(backend: Arc<dyn ModelBackend>, workspace: Arc<Workspace>, next_call: u64) -> Self {
        Self {
            backend,
            workspace,
            next_call: AtomicU64::new(next_call),
        }
    }

    pub fn backend(&self) -> &Arc<dyn ModelBackend> {
        &self.backend
    }

    pub fn next_call(&self) -> u64 {
        self.next_call.load(Ordering::SeqCst)
    }

    pub fn call(&self, request: &ModelRequest) -> Result<Completion, ModelError> {
        request.validate()?;
        let c = self.backend.call(request)?;
        if !c.response.is_well_formed() {
            return Err(ModelError::InvalidResponse(
                "tool_calls must be non-empty exactly when finish is tool_call".into(),
            ));
        }
        Ok(c)
    }

    pub fn record(
        &self,
        request: &ModelRequest,
        result: &Result<Completion, ModelError>,
    ) -> Result<String, WorkspaceError> {
        let n = self.next_call.fetch_add(1, Ordering::SeqCst) + 1;
        let id = format!("c{n:06}");
        let (response, error, retries) = match result {
            Ok(c) => (Some(c.response.clone()), None, c.retries),
            Err(e) => (None, Some(e.to_string()), 0),
        };
        let rec = CallRecord {
            id: id.clone(),
            agent: request.agent_id.clone(),
            request: request.clone(),
            response,
            error,
            retries,
            at: self.workspace.clock().now(),
        };
        let mut line = serde_json::to_vec(&rec).expect("call record serializes");
        line.push(b'\n');
        self.workspace.append(CALL_LOG_PATH, &line, "model")?;
        Ok(id)
    }

    /// Calls and records in one go; returns the call id with the result.
    pub fn complete(
        &self,
        request: &ModelRequest,
    ) -> Result<(String, Result<ModelResponse, ModelError>), WorkspaceError> {
        let result = self.call(request);
        let id = self.record(request, &result)?;
        Ok((id, result.map(|c| c.response)))
    }
}

/// Reads all records of the call log.
pub fn read_call_log(workspace: &Workspace) -> Result<Vec<CallRecord>, WorkspaceError> {
    if !workspace.exists(CALL_LOG_PATH) {
        return Ok(Vec::new());
    }
    let text = workspace.read_text(CALL_LOG_PATH, None)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}
