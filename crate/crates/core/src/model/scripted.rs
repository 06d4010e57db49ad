//! Deterministic fixture replay.
//!
//! A fixture (`*.fixture.json`) is an ordered list of entries. For each request
//! the backend looks at the *first* unconsumed entry addressed to the caller
//! (same role, and same agent id when the entry names one). If that entry's
//! optional `contains` text occurs in the last transcript turn, it is consumed
//! and its response returned. Otherwise a strict fixture fails and a lenient
//! one answers with a canned `wait`, leaving the entry queued.
//!
//! ```json
//! {
//!   "strict": false,
//!   "entries": [
//!     { "match": { "agent_role": "reviewer" },
//!       "respond": { "text": "APPROVE", "finish": "stop" } }
//!   ]
//! }
//! ```

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Completion, Finish, ModelBackend, ModelError, ModelRequest, ModelResponse, ToolCall};
use crate::agent::AgentRole;
use crate::bus::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureMatch {
    pub agent_role: AgentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseLiteral {
    #[serde(default)]
    text: String,
    #[serde(default)]
    tool_calls: Vec<ToolCall>,
    #[serde(default)]
    finish: Option<Finish>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    #[serde(rename = "match")]
    matcher: FixtureMatch,
    respond: ResponseLiteral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureEntry {
    pub matcher: FixtureMatch,
    pub respond: ModelResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptFixture {
    pub strict: bool,
    pub entries: Vec<FixtureEntry>,
}

impl ScriptFixture {
    /// Parses fixture JSON, naming the first offending entry on error.
    pub fn parse(bytes: &[u8]) -> Result<Self, ModelError> {
        let doc: Value = serde_json::from_slice(bytes).map_err(|e| ModelError::FixtureParse {
            index: None,
            message: e.to_string(),
        })?;
        let obj = doc.as_object().ok_or_else(|| ModelError::FixtureParse {
            index: None,
            message: "fixture must be a JSON object".into(),
        })?;
        if let Some(k) = obj
            .keys()
            .find(|k| !["strict", "entries", "description"].contains(&k.as_str()))
        {
            return Err(ModelError::FixtureParse {
                index: None,
                message: format!("unknown field {k:?}"),
            });
        }
        let strict = match obj.get("strict") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                return Err(ModelError::FixtureParse {
                    index: None,
                    message: "strict must be a boolean".into(),
                })
            }
        };
        let raw_entries = match obj.get("entries") {
            None => Vec::new(),
            Some(Value::Array(a)) => a.clone(),
            Some(_) => {
                return Err(ModelError::FixtureParse {
                    index: None,
                    message: "entries must be an array".into(),
                })
            }
        };
        let mut entries = Vec::with_capacity(raw_entries.len());
        for (i, raw) in raw_entries.into_iter().enumerate() {
            let bad = |message: String| ModelError::FixtureParse {
                index: Some(i),
                message,
            };
            let e: RawEntry = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;
            let finish = e.respond.finish.unwrap_or(if e.respond.tool_calls.is_empty() {
                Finish::Stop
            } else {
                Finish::ToolCall
            });
            let respond = ModelResponse {
                text: e.respond.text,
                tool_calls: e.respond.tool_calls,
                finish,
            };
            if !respond.is_well_formed() {
                return Err(bad(
                    "tool_calls must be non-empty exactly when finish is tool_call".into()
                ));
            }
            entries.push(FixtureEntry {
                matcher: e.matcher,
                respond,
            });
        }
        Ok(Self { strict, entries })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Cursor {
    consumed: Vec<bool>,
}

pub struct ScriptedBackend {
    fixture: ScriptFixture,
    cursor: Mutex<Cursor>,
}

/// Builds a scripted backend from fixture bytes.
pub fn load_script(fixture_bytes: &[u8]) -> Result<ScriptedBackend, ModelError> {
    Ok(ScriptedBackend::new(ScriptFixture::parse(fixture_bytes)?))
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptFixture) -> Self {
        let n = fixture.entries.len();
        Self {
            fixture,
            cursor: Mutex::new(Cursor {
                consumed: vec![false; n],
            }),
        }
    }

    pub fn remaining(&self) -> usize {
        self.cursor.lock().unwrap().consumed.iter().filter(|c| !**c).count()
    }

    fn addressed_to(m: &FixtureMatch, role: AgentRole, agent: &AgentId) -> bool {
        m.agent_role == role && m.agent.as_ref().is_none_or(|a| a == agent)
    }
}

impl ModelBackend for ScriptedBackend {
    fn call(&self, request: &ModelRequest) -> Result<Completion, ModelError> {
        let role = request.agent_role;
        let agent = &request.agent_id;
        let mut cursor = self.cursor.lock().unwrap();
        let next = self
            .fixture
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !cursor.consumed[*i] && Self::addressed_to(&e.matcher, role, agent));

        let fallback = |err: ModelError| {
            if self.fixture.strict {
                Err(err)
            } else {
                Ok(Completion {
                    response: ModelResponse::wait(),
                    retries: 0,
                })
            }
        };

        let Some((i, entry)) = next else {
            let ever = self
                .fixture
                .entries
                .iter()
                .any(|e| Self::addressed_to(&e.matcher, role, agent));
            let err = if ever {
                ModelError::ScriptExhausted {
                    role,
                    agent: agent.clone(),
                }
            } else {
                ModelError::ScriptMismatch {
                    role,
                    agent: agent.clone(),
                    detail: "no entry for this role".into(),
                }
            };
            return fallback(err);
        };

        if let Some(needle) = &entry.matcher.contains {
            let last = request.last_turn().map(|t| t.text.as_str()).unwrap_or("");
            if !last.contains(needle.as_str()) {
                return fallback(ModelError::ScriptMismatch {
                    role,
                    agent: agent.clone(),
                    detail: format!("entry {i} expects last turn to contain {needle:?}"),
                });
            }
        }
        cursor.consumed[i] = true;
        Ok(Completion {
            response: entry.respond.clone(),
            retries: 0,
        })
    }

    fn checkpoint(&self) -> Option<Value> {
        let cursor = self.cursor.lock().unwrap();
        let consumed: Vec<usize> = cursor
            .consumed
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(|(i, _)| i)
            .collect();
        Some(serde_json::json!({ "consumed": consumed }))
    }

    fn restore(&self, state: &Value) -> Result<(), ModelError> {
        let consumed: Vec<usize> = serde_json::from_value(state["consumed"].clone())
            .map_err(|e| ModelError::Config(format!("bad scripted checkpoint: {e}")))?;
        let mut cursor = self.cursor.lock().unwrap();
        cursor.consumed.iter_mut().for_each(|c| *c = false);
        for i in consumed {
            if let Some(c) = cursor.consumed.get_mut(i) {
                *c = true;
            }
        }
        Ok(())
    }

    fn describe(&self) -> String {
        format!(
            "scripted({} entries, strict={})",
            self.fixture.entries.len(),
            self.fixture.strict
        )
    }
}
