//! Internal message bus connecting the agent hierarchy.
//!
//! Messages may only travel along org-chart edges (parent <-> child), plus
//! escalations to any ancestor. The human user is a pseudo-agent at the root,
//! so chat and alerts use the same mailboxes as everything else. Every sent
//! message is mirrored, in send order, to `bus/log.jsonl` in the workspace.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::workspace::{Workspace, WorkspaceError};

pub const LOG_PATH: &str = "bus/log.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn user() -> Self {
        Self("user".to_string())
    }

    pub fn is_user(&self) -> bool {
        self.0 == "user"
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Instruction,
    StatusUpdate,
    Escalation,
    UserChat,
    ReviewRequest,
    ReviewVerdict,
    FinalAnswer,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub sender: AgentId,
    pub recipient: AgentId,
    pub kind: MessageKind,
    pub body: String,
    pub attachments: Vec<String>,
    pub in_reply_to: Option<String>,
    pub seq: u64,
}

/// A message before the bus assigns its id and sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outgoing {
    pub recipient: AgentId,
    pub kind: MessageKind,
    pub body: String,
    #[serde(default)]
    pub attachments: Vec<String>,
    #[serde(default)]
    pub in_reply_to: Option<String>,
}

impl Outgoing {
    pub fn new(recipient: AgentId, kind: MessageKind, body: impl Into<String>) -> Self {
        Self {
            recipient,
            kind,
            body: body.into(),
            attachments: Vec::new(),
            in_reply_to: None,
        }
    }

    pub fn with_attachments(mut self, attachments: Vec<String>) -> Self {
        self.attachments = attachments;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("unknown recipient {0}")]
    UnknownRecipient(AgentId),
    #[error("unknown sender {0}")]
    UnknownSender(AgentId),
    #[error("{kind:?} from {sender} to {recipient} is not an org-chart edge")]
    RoutingViolation {
        sender: AgentId,
        recipient: AgentId,
        kind: MessageKind,
    },
    #[error("{0} is already registered")]
    AlreadyRegistered(AgentId),
    #[error("{0} has no parent to escalate to")]
    NoParent(AgentId),
    #[error("attachment {0} does not exist in the workspace")]
    MissingAttachment(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Parent relation of the agent tree. The user is the implicit root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgChart {
    parent: BTreeMap<AgentId, AgentId>,
}

impl OrgChart {
    pub fn is_registered(&self, id: &AgentId) -> bool {
        id.is_user() || self.parent.contains_key(id)
    }

    /// Adds `agent` under `parent`. Acyclicity holds by construction since a
    /// parent must already exist and an id can be registered only once.
    pub fn register(&mut self, agent: AgentId, parent: AgentId) -> Result<(), BusError> {
        if self.is_registered(&agent) {
            return Err(BusError::AlreadyRegistered(agent));
        }
        if !self.is_registered(&parent) {
            return Err(BusError::UnknownRecipient(parent));
        }
        self.parent.insert(agent, parent);
        Ok(())
    }

    pub fn parent(&self, id: &AgentId) -> Option<&AgentId> {
        self.parent.get(id)
    }

    pub fn children(&self, id: &AgentId) -> Vec<AgentId> {
        self.parent
            .iter()
            .filter(|(_, p)| *p == id)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Ancestors from the direct parent up to the user.
    pub fn ancestors(&self, id: &AgentId) -> Vec<AgentId> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent.get(cur) {
            out.push(p.clone());
            cur = p;
        }
        out
    }

    pub fn is_ancestor(&self, ancestor: &AgentId, of: &AgentId) -> bool {
        self.ancestors(of).contains(ancestor)
    }

    /// All agents in the subtree below `id` (excluding `id`).
    pub fn descendants(&self, id: &AgentId) -> Vec<AgentId> {
        self.parent
            .keys()
            .filter(|a| self.is_ancestor(id, a))
            .cloned()
            .collect()
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.parent.keys()
    }

    pub fn check_route(&self, sender: &AgentId, recipient: &AgentId, kind: MessageKind) -> Result<(), BusError> {
        if !self.is_registered(sender) {
            return Err(BusError::UnknownSender(sender.clone()));
        }
        if !self.is_registered(recipient) {
            return Err(BusError::UnknownRecipient(recipient.clone()));
        }
        let violation = || BusError::RoutingViolation {
            sender: sender.clone(),
            recipient: recipient.clone(),
            kind,
        };
        if kind == MessageKind::Alert && !recipient.is_user() {
            return Err(violation());
        }
        let ok = if kind == MessageKind::Escalation {
            self.is_ancestor(recipient, sender)
        } else {
            self.parent(sender) == Some(recipient) || self.parent(recipient) == Some(sender)
        };
        if ok {
            Ok(())
        } else {
            Err(violation())
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub sent: u64,
    pub polled: u64,
}

/// Persistable bus state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusSnapshot {
    pub chart: OrgChart,
    pub mailboxes: BTreeMap<AgentId, VecDeque<Message>>,
    /// Last sequence number per "sender->recipient" pair.
    pub seqs: BTreeMap<String, u64>,
    pub next_id: u64,
    pub stats: BusStats,
}

pub struct Bus {
    workspace: Arc<Workspace>,
    state: Mutex<BusSnapshot>,
}

impl Bus {
    pub fn new(workspace: Arc<Workspace>) -> Self {
        Self::restore(workspace, BusSnapshot::default())
    }

    pub fn restore(workspace: Arc<Workspace>, snapshot: BusSnapshot) -> Self {
        Self {
            workspace,
            state: Mutex::new(snapshot),
        }
    }

    pub fn snapshot(&self) -> BusSnapshot {
        self.state.lock().unwrap().clone()
    }

    pub fn register(&self, agent: AgentId, parent: AgentId) -> Result<(), BusError> {
        self.state.lock().unwrap().chart.register(agent, parent)
    }

    pub fn chart(&self) -> OrgChart {
        self.state.lock().unwrap().chart.clone()
    }

    pub fn parent_of(&self, id: &AgentId) -> Option<AgentId> {
        self.state.lock().unwrap().chart.parent(id).cloned()
    }

    pub fn is_registered(&self, id: &AgentId) -> bool {
        self.state.lock().unwrap().chart.is_registered(id)
    }

    /// Routes and enqueues a message, returning its id.
    pub fn send(&self, sender: &AgentId, msg: Outgoing) -> Result<String, BusError> {
        let mut state = self.state.lock().unwrap();
        state.chart.check_route(sender, &msg.recipient, msg.kind)?;
        for path in &msg.attachments {
            if !self.workspace.exists(path) {
                return Err(BusError::MissingAttachment(path.clone()));
            }
        }
        state.next_id += 1;
        let id = format!("m{:06}", state.next_id);
        let pair = format!("{}->{}", sender, msg.recipient);
        let seq = {
            let s = state.seqs.entry(pair).or_insert(0);
            *s += 1;
            *s
        };
        let message = Message {
            id: id.clone(),
            sender: sender.clone(),
            recipient: msg.recipient.clone(),
            kind: msg.kind,
            body: msg.body,
            attachments: msg.attachments,
            in_reply_to: msg.in_reply_to,
            seq,
        };
        let mut line = serde_json::to_vec(&message).expect("message serializes");
        line.push(b'\n');
        self.workspace.append(LOG_PATH, &line, "bus")?;
        state
            .mailboxes
            .entry(message.recipient.clone())
            .or_default()
            .push_back(message);
        state.stats.sent += 1;
        Ok(id)
    }

    /// Removes up to `max` messages from `recipient`'s mailbox, oldest first.
    pub fn poll(&self, recipient: &AgentId, max: usize) -> Result<Vec<Message>, BusError> {
        let mut state = self.state.lock().unwrap();
        if !state.chart.is_registered(recipient) {
            return Err(BusError::UnknownRecipient(recipient.clone()));
        }
        let Some(mailbox) = state.mailboxes.get_mut(recipient) else {
            return Ok(Vec::new());
        };
        let n = max.min(mailbox.len());
        let out: Vec<Message> = mailbox.drain(..n).collect();
        state.stats.polled += out.len() as u64;
        Ok(out)
    }

    pub fn pending(&self, recipient: &AgentId) -> usize {
        self.state
            .lock()
            .unwrap()
            .mailboxes
            .get(recipient)
            .map_or(0, |m| m.len())
    }

    pub fn total_pending(&self) -> usize {
        self.state.lock().unwrap().mailboxes.values().map(|m| m.len()).sum()
    }

    pub fn stats(&self) -> BusStats {
        self.state.lock().unwrap().stats.clone()
    }

    /// Sends an escalation to `sender`'s parent. When the parent is the user
    /// the message is delivered as an [`MessageKind::Alert`].
    pub fn escalate(
        &self,
        sender: &AgentId,
        body: impl Into<String>,
        attachments: Vec<String>,
    ) -> Result<String, BusError> {
        let parent = {
            let state = self.state.lock().unwrap();
            if !state.chart.is_registered(sender) {
                return Err(BusError::UnknownSender(sender.clone()));
            }
            state
                .chart
                .parent(sender)
                .cloned()
                .ok_or_else(|| BusError::NoParent(sender.clone()))?
        };
        let kind = if parent.is_user() {
            MessageKind::Alert
        } else {
            MessageKind::Escalation
        };
        self.send(sender, Outgoing::new(parent, kind, body).with_attachments(attachments))
    }

    /// Full persisted log, in send order.
    pub fn log(&self) -> Result<Vec<Message>, BusError> {
        if !self.workspace.exists(LOG_PATH) {
            return Ok(Vec::new());
        }
        let text = self.workspace.read_text(LOG_PATH, None)?;
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }
}
