//! Scripted user drivers for end-to-end runs.
//!
//! A user script (`*.user.json`) plays the human side of a project: the
//! brief, then chat messages and goal approvals. Each step is taken only
//! once the engine is idle, so a scripted model sees the same inputs on
//! every run.
//!
//! ```json
//! { "brief": "…", "steps": [ { "say": "…" }, { "approve": "all" } ] }
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bus::AgentId;
use crate::engine::{Engine, EngineError, GoalDecision, GoalStatus, Project};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoalSelection {
    /// `"all"`: every goal currently Proposed.
    All(String),
    Ids(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum UserStep {
    Say(String),
    Approve(GoalSelection),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserScript {
    pub brief: String,
    #[serde(default)]
    pub steps: Vec<UserStep>,
}

impl UserScript {
    pub fn parse(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

impl GoalSelection {
    /// Resolves the selection into approve decisions against `project`.
    pub fn decisions(&self, project: &Project) -> BTreeMap<String, GoalDecision> {
        let ids: Vec<String> = match self {
            GoalSelection::All(_) => project
                .goals
                .iter()
                .filter(|g| g.status == GoalStatus::Proposed)
                .map(|g| g.id.clone())
                .collect(),
            GoalSelection::Ids(ids) => ids.clone(),
        };
        ids.into_iter().map(|id| (id, GoalDecision::Approve)).collect()
    }
}

/// Starts the project from the script's brief and plays every step,
/// running to idle in between. `max_ticks` bounds each idle wait.
pub fn drive(engine: &mut Engine, script: &UserScript, max_ticks: u64) -> Result<(), EngineError> {
    engine.start(&script.brief, &[])?;
    engine.run_until_idle(max_ticks)?;
    for step in &script.steps {
        match step {
            UserStep::Say(text) => {
                engine.handle_user_message(text, &[])?;
            }
            UserStep::Approve(sel) => {
                let decisions = sel.decisions(engine.project());
                engine.approve_goals(&AgentId::user(), &decisions)?;
            }
        }
        engine.run_until_idle(max_ticks)?;
    }
    Ok(())
}
