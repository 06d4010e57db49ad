//! Project event log.
//!
//! Every user-visible state change is appended as a [`ProjectEvent`] with a
//! gap-free id, mirrored to `events.jsonl` in the workspace, and pushed to
//! any registered listeners (the HTTP layer uses this to wake streams).

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::workspace::{Workspace, WorkspaceError};

pub const EVENTS_PATH: &str = "events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ChatMessage,
    GoalUpdate,
    WorkstreamStatus,
    ReportUpdated,
    Alert,
    FinalAnswer,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChatMessage => "chat_message",
            Self::GoalUpdate => "goal_update",
            Self::WorkstreamStatus => "workstream_status",
            Self::ReportUpdated => "report_updated",
            Self::Alert => "alert",
            Self::FinalAnswer => "final_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectEvent {
    pub event_id: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub at: u64,
}

/// Returns false to unsubscribe.
type Listener = Box<dyn Fn(&ProjectEvent) -> bool + Send + Sync>;

pub struct EventLog {
    workspace: Arc<Workspace>,
    events: Mutex<Vec<ProjectEvent>>,
    listeners: Mutex<Vec<Listener>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("len", &self.len()).finish()
    }
}

impl EventLog {
    /// Loads the persisted log, if any.
    pub fn open(workspace: Arc<Workspace>) -> Result<Self, WorkspaceError> {
        let events = if workspace.exists(EVENTS_PATH) {
            workspace
                .read_text(EVENTS_PATH, None)?
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            workspace,
            events: Mutex::new(events),
            listeners: Mutex::new(Vec::new()),
        })
    }

    pub fn emit(&self, kind: EventKind, payload: Value) -> Result<u64, WorkspaceError> {
        let event = {
            let mut events = self.events.lock().unwrap();
            let event = ProjectEvent {
                event_id: events.len() as u64 + 1,
                kind,
                payload,
                at: self.workspace.clock().now(),
            };
            let mut line = serde_json::to_vec(&event).expect("event serializes");
            line.push(b'\n');
            self.workspace.append(EVENTS_PATH, &line, "engine")?;
            events.push(event.clone());
            event
        };
        self.listeners.lock().unwrap().retain(|l| l(&event));
        Ok(event.event_id)
    }

    /// Registers `listener` for future events until it returns false.
    pub fn subscribe(&self, listener: impl Fn(&ProjectEvent) -> bool + Send + Sync + 'static) {
        self.listeners.lock().unwrap().push(Box::new(listener));
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events with id greater than `after`, in order.
    pub fn after(&self, after: u64) -> Vec<ProjectEvent> {
        let events = self.events.lock().unwrap();
        events.iter().skip(after as usize).cloned().collect()
    }

    pub fn all(&self) -> Vec<ProjectEvent> {
        self.after(0)
    }
}
