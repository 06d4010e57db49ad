//! Side-effectful capabilities agents can call.
//!
//! [`Toolbox::invoke`] is the single entry point used by the engine. It
//! decodes the arguments, runs the tool, saves bulky outputs (search results,
//! fetched documents, code runs) into the caller's workspace area, appends a
//! line with the result digest to `tools/log.jsonl`, and returns a compact
//! JSON summary for the agent's transcript.

mod providers;
mod sandbox;

pub use providers::{
    canonical_query, Document, DocumentFetcher, HttpFetcher, HttpSearch, LiteratureProvider, SearchHit, ToolFixture,
    Unconfigured,
};
pub use sandbox::{CodeJob, CodeResult, Limits, Sandbox, SandboxConfig, SandboxEvent, SandboxObserver, Usage};

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bus::AgentId;
use crate::model::ToolSchema;
use crate::workspace::{digest_hex, Workspace, WorkspaceError};

pub const TOOL_LOG_PATH: &str = "tools/log.jsonl";

pub const CAPABILITY_TOOLS: &[&str] = &[
    "execute_code",
    "execute_parallel",
    "search_literature",
    "fetch_document",
    "read_file",
    "list_files",
];

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("runtime {0:?} is not registered")]
    RuntimeUnavailable(String),
    #[error("sandbox setup failed: {0}")]
    SandboxSetupFailure(String),
    #[error("literature provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("query {0:?} is not in the fixture")]
    QueryNotInFixture(String),
    #[error("fetching {0} is not allowed")]
    FetchDenied(String),
    #[error("fetch failed: {0}")]
    FetchFailed(String),
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("tool fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Schema advertised to the model for a capability tool.
pub fn capability_schema(name: &str) -> ToolSchema {
    let limits = json!({"type": "object", "properties": {
        "wall_seconds": {"type": "number"}, "cpu_seconds": {"type": "integer"},
        "memory_bytes": {"type": "integer"}, "max_output_bytes": {"type": "integer"}}});
    let job = json!({"type": "object", "properties": {
        "runtime": {"type": "string"},
        "files": {"type": "object", "additionalProperties": {"type": "string"}},
        "entry": {"type": "string"}, "stdin": {"type": "string"}, "limits": limits},
        "required": ["runtime", "entry"]});
    let (description, parameters) = match name {
        "execute_code" => ("Run code in an isolated sandbox without network access.", job.clone()),
        "execute_parallel" => (
            "Run several independent code jobs concurrently.",
            json!({"type": "object", "properties": {"jobs": {"type": "array", "items": job},
                "max_concurrency": {"type": "integer"}}, "required": ["jobs"]}),
        ),
        "search_literature" => (
            "Search the research literature.",
            json!({"type": "object", "properties": {"query": {"type": "string"}, "k": {"type": "integer"}},
                "required": ["query"]}),
        ),
        "fetch_document" => (
            "Fetch a document by URI.",
            json!({"type": "object", "properties": {"uri": {"type": "string"}}, "required": ["uri"]}),
        ),
        "read_file" => (
            "Read a file from the shared workspace.",
            json!({"type": "object", "properties": {"path": {"type": "string"}, "version": {"type": "integer"}},
                "required": ["path"]}),
        ),
        "list_files" => (
            "List workspace paths under a prefix.",
            json!({"type": "object", "properties": {"prefix": {"type": "string"}}}),
        ),
        _ => ("Deployment-specific tool.", json!({"type": "object"})),
    };
    ToolSchema {
        name: name.to_string(),
        description: description.to_string(),
        parameters,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsConfig {
    pub sandbox: SandboxConfig,
    /// URI prefixes live fetches may reach.
    pub fetch_allowlist: Vec<String>,
    pub max_fetch_bytes: u64,
    /// `.toolfix.json` used for search and fetch instead of live providers.
    pub fixture: Option<PathBuf>,
    pub search_endpoint: Option<String>,
    pub http_timeout_ms: u64,
}

impl Default for ToolsConfig {
    fn default() -> Self {
        Self {
            sandbox: SandboxConfig::default(),
            fetch_allowlist: Vec::new(),
            max_fetch_bytes: 8 << 20,
            fixture: None,
            search_endpoint: None,
            http_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolLogEntry {
    pub agent: AgentId,
    pub tool: String,
    pub args: Value,
    pub ok: bool,
    pub result_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saved_to: Option<String>,
    pub at: u64,
}

pub struct Toolbox {
    sandbox: Arc<Sandbox>,
    search: Arc<dyn LiteratureProvider>,
    fetch: Arc<dyn DocumentFetcher>,
    max_fetch_bytes: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchArgs {
    query: String,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    5
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FetchArgs {
    uri: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadArgs {
    path: String,
    #[serde(default)]
    version: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ListArgs {
    #[serde(default)]
    prefix: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParallelArgs {
    jobs: Vec<CodeJob>,
    #[serde(default)]
    max_concurrency: Option<usize>,
}

/// Successful tool output: the agent-facing summary and where bulk data went.
struct Output {
    value: Value,
    saved_to: Option<String>,
}

fn parse<T: serde::de::DeserializeOwned>(args: &Value) -> Result<T, ToolError> {
    let v = if args.is_null() { json!({}) } else { args.clone() };
    serde_json::from_value(v).map_err(|e| ToolError::InvalidArguments(e.to_string()))
}

fn extension(content_type: &str) -> &'static str {
    let ct = content_type.split(';').next().unwrap_or("").trim();
    match ct {
        "text/html" => "html",
        "application/pdf" => "pdf",
        "application/json" => "json",
        t if t.starts_with("text/") => "txt",
        _ => "bin",
    }
}

impl Toolbox {
    pub fn new(
        sandbox: Arc<Sandbox>,
        search: Arc<dyn LiteratureProvider>,
        fetch: Arc<dyn DocumentFetcher>,
        max_fetch_bytes: u64,
    ) -> Self {
        Self {
            sandbox,
            search,
            fetch,
            max_fetch_bytes,
        }
    }

    pub fn from_config(config: &ToolsConfig) -> Result<Self, ToolError> {
        let sandbox = Arc::new(Sandbox::new(config.sandbox.clone()));
        let timeout = Duration::from_millis(config.http_timeout_ms);
        let (search, fetch): (Arc<dyn LiteratureProvider>, Arc<dyn DocumentFetcher>) = match &config.fixture {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| ToolError::Fixture(format!("{}: {e}", path.display())))?;
                let f = Arc::new(ToolFixture::parse(&bytes)?);
                (f.clone(), f)
            }
            None => {
                let search: Arc<dyn LiteratureProvider> = match &config.search_endpoint {
                    Some(e) => Arc::new(HttpSearch::new(e.clone(), timeout)),
                    None => Arc::new(Unconfigured),
                };
                let fetch: Arc<dyn DocumentFetcher> = if config.fetch_allowlist.is_empty() {
                    Arc::new(Unconfigured)
                } else {
                    Arc::new(HttpFetcher::new(
                        config.fetch_allowlist.clone(),
                        config.max_fetch_bytes,
                        timeout,
                    ))
                };
                (search, fetch)
            }
        };
        Ok(Self::new(sandbox, search, fetch, config.max_fetch_bytes))
    }

    pub fn sandbox(&self) -> &Arc<Sandbox> {
        &self.sandbox
    }

    pub fn search_literature(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        self.search.search(query, k)
    }

    pub fn fetch_document(&self, uri: &str) -> Result<Document, ToolError> {
        let doc = self.fetch.fetch(uri)?;
        if doc.bytes.len() as u64 > self.max_fetch_bytes {
            return Err(ToolError::FetchFailed(format!(
                "{uri} exceeds the size cap of {} bytes",
                self.max_fetch_bytes
            )));
        }
        Ok(doc)
    }

    pub fn execute_code(&self, job: &CodeJob) -> Result<CodeResult, ToolError> {
        self.sandbox.execute(job)
    }

    pub fn execute_parallel(&self, jobs: &[CodeJob], max_concurrency: usize) -> Vec<Result<CodeResult, ToolError>> {
        self.sandbox.execute_parallel(jobs, max_concurrency)
    }

    /// Runs `name` for `agent`, saving outputs under `scope` (e.g. `ws/ws1`)
    /// and logging the call.
    pub fn invoke(
        &self,
        workspace: &Workspace,
        agent: &AgentId,
        scope: &str,
        name: &str,
        args: &Value,
    ) -> Result<Value, ToolError> {
        let result = self.dispatch(workspace, agent, scope, name, args);
        let (ok, digest, error, saved_to) = match &result {
            Ok(o) => (
                true,
                digest_hex(o.value.to_string().as_bytes()),
                None,
                o.saved_to.clone(),
            ),
            Err(e) => (false, digest_hex(e.to_string().as_bytes()), Some(e.to_string()), None),
        };
        let entry = ToolLogEntry {
            agent: agent.clone(),
            tool: name.to_string(),
            args: args.clone(),
            ok,
            result_digest: digest,
            error,
            saved_to,
            at: workspace.clock().now(),
        };
        let mut line = serde_json::to_vec(&entry).expect("log entry serializes");
        line.push(b'\n');
        workspace.append(TOOL_LOG_PATH, &line, agent.as_str())?;
        result.map(|o| o.value)
    }

    fn next_slot(workspace: &Workspace, dir: &str) -> usize {
        let prefix = format!("{dir}/");
        let n = workspace
            .list_files(&prefix)
            .iter()
            .filter(|p| !p[prefix.len()..].contains('/'))
            .count();
        n + 1
    }

    fn save_run(
        &self,
        workspace: &Workspace,
        agent: &AgentId,
        dir: &str,
        n: usize,
        job: &CodeJob,
        r: &CodeResult,
    ) -> Result<Value, ToolError> {
        let mut produced = Vec::new();
        for (p, bytes) in &r.produced_files {
            let path = format!("{dir}/{n}/{p}");
            workspace.write_file(&path, bytes, agent.as_str(), None)?;
            produced.push(path);
        }
        let v = json!({
            "runtime": job.runtime,
            "entry": job.entry,
            "exit_code": r.exit_code,
            "timed_out": r.timed_out,
            "stdout": r.stdout,
            "stdout_truncated": r.stdout_truncated,
            "stderr": r.stderr,
            "stderr_truncated": r.stderr_truncated,
            "usage": r.usage,
            "produced_files": produced,
        });
        Ok(v)
    }

    fn dispatch(
        &self,
        workspace: &Workspace,
        agent: &AgentId,
        scope: &str,
        name: &str,
        args: &Value,
    ) -> Result<Output, ToolError> {
        let author = agent.as_str();
        match name {
            "search_literature" => {
                let a: SearchArgs = parse(args)?;
                let hits = self.search_literature(&a.query, a.k)?;
                let dir = format!("{scope}/search-results");
                let path = format!("{dir}/{}.json", Self::next_slot(workspace, &dir));
                let body = json!({"query": a.query, "k": a.k, "hits": hits});
                workspace.write_file(&path, &serde_json::to_vec_pretty(&body).expect("json"), author, Some(0))?;
                Ok(Output {
                    value: json!({"hits": hits, "saved_to": path}),
                    saved_to: Some(path),
                })
            }
            "fetch_document" => {
                let a: FetchArgs = parse(args)?;
                let doc = self.fetch_document(&a.uri)?;
                let dir = format!("{scope}/documents");
                let path = format!(
                    "{dir}/{}.{}",
                    Self::next_slot(workspace, &dir),
                    extension(&doc.content_type)
                );
                workspace.write_file(&path, &doc.bytes, author, Some(0))?;
                let preview = std::str::from_utf8(&doc.bytes)
                    .map(|t| t.chars().take(4000).collect::<String>())
                    .unwrap_or_default();
                Ok(Output {
                    value: json!({"uri": a.uri, "content_type": doc.content_type, "size": doc.bytes.len(),
                        "saved_to": path, "text": preview}),
                    saved_to: Some(path),
                })
            }
            "execute_code" => {
                let job: CodeJob = parse(args)?;
                let r = self.execute_code(&job)?;
                let dir = format!("{scope}/runs");
                let n = Self::next_slot(workspace, &dir);
                let v = self.save_run(workspace, agent, &dir, n, &job, &r)?;
                let path = format!("{dir}/{n}.json");
                workspace.write_file(&path, &serde_json::to_vec_pretty(&v).expect("json"), author, Some(0))?;
                let mut v = v;
                v["saved_to"] = json!(path);
                Ok(Output {
                    value: v,
                    saved_to: Some(path),
                })
            }
            "execute_parallel" => {
                let a: ParallelArgs = parse(args)?;
                let width = a.max_concurrency.unwrap_or(self.sandbox.config().max_concurrency);
                let results = self.execute_parallel(&a.jobs, width);
                let dir = format!("{scope}/runs");
                let n = Self::next_slot(workspace, &dir);
                let mut items = Vec::new();
                for (i, (job, r)) in a.jobs.iter().zip(&results).enumerate() {
                    items.push(match r {
                        Ok(r) => self.save_run(workspace, agent, &format!("{dir}/{n}"), i + 1, job, r)?,
                        Err(e) => json!({"error": e.to_string()}),
                    });
                }
                let v = json!({"results": items});
                let path = format!("{dir}/{n}.json");
                workspace.write_file(&path, &serde_json::to_vec_pretty(&v).expect("json"), author, Some(0))?;
                let mut v = v;
                v["saved_to"] = json!(path);
                Ok(Output {
                    value: v,
                    saved_to: Some(path),
                })
            }
            "read_file" => {
                let a: ReadArgs = parse(args)?;
                let bytes = workspace.read_file(&a.path, a.version)?;
                let version = a.version.or_else(|| workspace.latest_version(&a.path));
                Ok(Output {
                    value: json!({"path": a.path, "version": version,
                        "content": String::from_utf8_lossy(&bytes).chars().take(20_000).collect::<String>()}),
                    saved_to: None,
                })
            }
            "list_files" => {
                let a: ListArgs = parse(args)?;
                Ok(Output {
                    value: json!({"files": workspace.list_files(&a.prefix)}),
                    saved_to: None,
                })
            }
            other => Err(ToolError::UnknownTool(other.to_string())),
        }
    }
}

/// Reads the tool log.
pub fn read_tool_log(workspace: &Workspace) -> Result<Vec<ToolLogEntry>, WorkspaceError> {
    if !workspace.exists(TOOL_LOG_PATH) {
        return Ok(Vec::new());
    }
    Ok(workspace
        .read_text(TOOL_LOG_PATH, None)?
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}
