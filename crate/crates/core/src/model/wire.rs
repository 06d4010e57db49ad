//! JSON-over-HTTP backend for real completion endpoints.
//!
//! One endpoint, one dialect adapter. Transient failures (connection errors,
//! timeouts, 429 and 5xx) are retried with capped exponential backoff.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Completion, Finish, ModelBackend, ModelError, ModelRequest, ModelResponse, ToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// Posts the `ModelRequest` as-is and expects a `ModelResponse` back.
    Native,
    /// Chat-completions style (`messages`, `tools`, `choices`).
    #[serde(rename = "openai")]
    OpenAi,
    /// Messages style (`system`, `messages`, `content` blocks).
    Anthropic,
}

impl std::str::FromStr for Dialect {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(Self::Native),
            "openai" => Ok(Self::OpenAi),
            "anthropic" => Ok(Self::Anthropic),
            other => Err(ModelError::Config(format!("unknown dialect {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireConfig {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub dialect: Dialect,
    pub model: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key: None,
            dialect: Dialect::Native,
            model: String::new(),
            temperature: 0.0,
            timeout_ms: 600_000,
            max_retries: 4,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
        }
    }
}

impl WireConfig {
    /// Reads `MODEL_ENDPOINT`, `MODEL_API_KEY` and `MODEL_DIALECT`.
    pub fn from_env() -> Result<Self, ModelError> {
        let endpoint =
            std::env::var("MODEL_ENDPOINT").map_err(|_| ModelError::Config("MODEL_ENDPOINT is not set".into()))?;
        let dialect = match std::env::var("MODEL_DIALECT") {
            Ok(d) => d.parse()?,
            Err(_) => Dialect::Native,
        };
        Ok(Self {
            endpoint,
            api_key: std::env::var("MODEL_API_KEY").ok(),
            dialect,
            model: std::env::var("MODEL_NAME").unwrap_or_default(),
            ..Default::default()
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.backoff_cap_ms);
        Duration::from_millis(ms)
    }
}

pub struct WireBackend {
    config: WireConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Value),
    Transient { timeout: bool, reason: String },
    Fatal(ModelError),
}

impl WireBackend {
    pub fn new(config: WireConfig) -> Result<Self, ModelError> {
        if config.endpoint.is_empty() {
            return Err(ModelError::Config("empty endpoint".into()));
        }
        url::Url::parse(&config.endpoint).map_err(|e| ModelError::Config(format!("bad endpoint: {e}")))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &WireConfig {
        &self.config
    }

    fn attempt(&self, body: &[u8]) -> Attempt {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("content-type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = match self.config.dialect {
                Dialect::Anthropic => req.header("x-api-key", key).header("anthropic-version", "2023-06-01"),
                _ => req.header("authorization", format!("Bearer {key}")),
            };
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient {
                    timeout: true,
                    reason: "timeout".into(),
                }
            }
            Err(e) => {
                return Attempt::Transient {
                    timeout: false,
                    reason: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient {
                    timeout: true,
                    reason: "timeout reading body".into(),
                }
            }
            Err(e) => {
                return Attempt::Transient {
                    timeout: false,
                    reason: e.to_string(),
                }
            }
        };
        if status == 429 || status >= 500 {
            return Attempt::Transient {
                timeout: false,
                reason: format!("status {status}"),
            };
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(ModelError::Rejected { status, body: text });
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(ModelError::InvalidResponse(e.to_string())),
        }
    }
}

impl ModelBackend for WireBackend {
    fn call(&self, request: &ModelRequest) -> Result<Completion, ModelError> {
        let body = serde_json::to_vec(&encode_request(&self.config, request)).expect("request encodes");
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(v) => {
                    let response = decode_response(self.config.dialect, &v)?;
                    return Ok(Completion { response, retries });
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient { timeout, reason } => {
                    if retries >= self.config.max_retries {
                        let attempts = retries + 1;
                        return Err(if timeout {
                            ModelError::BackendTimeout { attempts }
                        } else {
                            ModelError::BackendUnavailable { attempts, reason }
                        });
                    }
                    log::warn!("model call failed ({reason}); retry {}", retries + 1);
                    std::thread::sleep(self.config.backoff(retries));
                    retries += 1;
                }
            }
        }
    }

    fn describe(&self) -> String {
        format!("wire({:?} {})", self.config.dialect, self.config.endpoint)
    }
}

/// Collapses the transcript into alternating user/assistant messages; the
/// agent's own turns are the assistant side.
fn chat_messages(request: &ModelRequest) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    for turn in &request.transcript {
        let (role, text) = if turn.speaker == request.agent_id.as_str() {
            ("assistant", turn.text.clone())
        } else {
            ("user", format!("[{}] {}", turn.speaker, turn.text))
        };
        match out.last_mut() {
            Some((r, t)) if *r == role => {
                t.push_str("\n\n");
                t.push_str(&text);
            }
            _ => out.push((role, text)),
        }
    }
    if out.first().is_some_and(|(r, _)| *r == "assistant") {
        out.insert(0, ("user", "(continue)".into()));
    }
    out
}

pub(crate) fn encode_request(config: &WireConfig, request: &ModelRequest) -> Value {
    match config.dialect {
        Dialect::Native => {
            let mut v = serde_json::to_value(request).expect("request serializes");
            v["temperature"] = json!(config.temperature);
            if !config.model.is_empty() {
                v["model"] = json!(config.model);
            }
            v
        }
        Dialect::OpenAi => {
            let mut messages = vec![json!({"role": "system", "content": request.system})];
            messages.extend(
                chat_messages(request)
                    .into_iter()
                    .map(|(role, content)| json!({"role": role, "content": content})),
            );
            let tools: Vec<Value> = request
                .tool_schemas
                .iter()
                .map(|t| {
                    json!({"type": "function", "function": {
                        "name": t.name, "description": t.description, "parameters": t.parameters}})
                })
                .collect();
            let mut v = json!({
                "model": config.model,
                "messages": messages,
                "max_tokens": request.max_output_tokens,
                "temperature": config.temperature,
            });
            if !tools.is_empty() {
                v["tools"] = json!(tools);
            }
            if let Some(seed) = request.seed {
                v["seed"] = json!(seed);
            }
            v
        }
        Dialect::Anthropic => {
            let messages: Vec<Value> = chat_messages(request)
                .into_iter()
                .map(|(role, content)| json!({"role": role, "content": content}))
                .collect();
            let tools: Vec<Value> = request
                .tool_schemas
                .iter()
                .map(|t| json!({"name": t.name, "description": t.description, "input_schema": t.parameters}))
                .collect();
            let mut v = json!({
                "model": config.model,
                "system": request.system,
                "messages": messages,
                "max_tokens": request.max_output_tokens,
                "temperature": config.temperature,
            });
            if !tools.is_empty() {
                v["tools"] = json!(tools);
            }
            v
        }
    }
}

pub(crate) fn decode_response(dialect: Dialect, v: &Value) -> Result<ModelResponse, ModelError> {
    let bad = |what: &str| ModelError::InvalidResponse(what.to_string());
    match dialect {
        Dialect::Native => serde_json::from_value(v.clone()).map_err(|e| bad(&e.to_string())),
        Dialect::OpenAi => {
            let choice = v["choices"].get(0).ok_or_else(|| bad("no choices"))?;
            let msg = &choice["message"];
            let text = msg["content"].as_str().unwrap_or_default().to_string();
            let mut tool_calls = Vec::new();
            if let Some(calls) = msg["tool_calls"].as_array() {
                for c in calls {
                    let name = c["function"]["name"]
                        .as_str()
                        .ok_or_else(|| bad("tool call without name"))?;
                    let raw = c["function"]["arguments"].as_str().unwrap_or("{}");
                    let arguments = serde_json::from_str(raw).unwrap_or(Value::String(raw.into()));
                    tool_calls.push(ToolCall {
                        name: name.into(),
                        arguments,
                    });
                }
            }
            let finish = match choice["finish_reason"].as_str() {
                _ if !tool_calls.is_empty() => Finish::ToolCall,
                Some("length") => Finish::Length,
                Some("content_filter") => Finish::Refusal,
                _ => Finish::Stop,
            };
            Ok(ModelResponse {
                text,
                tool_calls,
                finish,
            })
        }
        Dialect::Anthropic => {
            let blocks = v["content"].as_array().ok_or_else(|| bad("no content"))?;
            let mut text = String::new();
            let mut tool_calls = Vec::new();
            for b in blocks {
                match b["type"].as_str() {
                    Some("text") => text.push_str(b["text"].as_str().unwrap_or_default()),
                    Some("tool_use") => tool_calls.push(ToolCall {
                        name: b["name"].as_str().ok_or_else(|| bad("tool_use without name"))?.into(),
                        arguments: b["input"].clone(),
                    }),
                    _ => {}
                }
            }
            let finish = match v["stop_reason"].as_str() {
                _ if !tool_calls.is_empty() => Finish::ToolCall,
                Some("max_tokens") => Finish::Length,
                Some("refusal") => Finish::Refusal,
                _ => Finish::Stop,
            };
            Ok(ModelResponse {
                text,
                tool_calls,
                finish,
            })
        }
    }
}
