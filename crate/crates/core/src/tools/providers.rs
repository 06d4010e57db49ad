//! Literature search and document fetch providers.
//!
//! Offline runs use a `.toolfix.json` fixture mapping canonical queries and
//! URIs to frozen results:
//!
//! ```json
//! {
//!   "search": { "moving sofa upper bound": [ {"title": "...", "uri": "https://...", "snippet": "..."} ] },
//!   "fetch":  { "https://arxiv.org/abs/2411.19826": {"content_type": "text/html", "body": "..."} }
//! }
//! ```
//!
//! Queries are canonicalized (trimmed, lowercased, whitespace collapsed)
//! before lookup. Live mode talks to a JSON search endpoint and fetches over
//! HTTP, restricted to an allowlist of URI prefixes.

use std::collections::BTreeMap;
use std::io::Read;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::ToolError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub uri: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub content_type: String,
    pub bytes: Vec<u8>,
}

pub trait LiteratureProvider: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError>;
}

pub trait DocumentFetcher: Send + Sync {
    fn fetch(&self, uri: &str) -> Result<Document, ToolError>;
}

pub fn canonical_query(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn well_formed(uri: &str) -> bool {
    url::Url::parse(uri).is_ok_and(|u| u.has_host())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureDoc {
    content_type: String,
    #[serde(default)]
    body: Option<String>,
    #[serde(default)]
    body_base64: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawToolFixture {
    #[serde(default)]
    description: Option<String>,
    #[serde(default = "yes")]
    strict: bool,
    #[serde(default)]
    search: BTreeMap<String, Vec<SearchHit>>,
    #[serde(default)]
    fetch: BTreeMap<String, FixtureDoc>,
}

fn yes() -> bool {
    true
}

/// Frozen search and fetch results.
#[derive(Debug, Clone, Default)]
pub struct ToolFixture {
    strict: bool,
    search: BTreeMap<String, Vec<SearchHit>>,
    fetch: BTreeMap<String, Document>,
}

impl ToolFixture {
    pub fn parse(bytes: &[u8]) -> Result<Self, ToolError> {
        let bad = |m: String| ToolError::Fixture(m);
        let raw: RawToolFixture = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
        let _ = raw.description;
        let mut search = BTreeMap::new();
        for (q, hits) in raw.search {
            let hits: Vec<SearchHit> = hits
                .into_iter()
                .map(|mut h| {
                    if h.source.is_empty() {
                        h.source = "fixture".into();
                    }
                    h
                })
                .collect();
            if let Some(h) = hits.iter().find(|h| !well_formed(&h.uri)) {
                return Err(bad(format!("hit uri {:?} for query {q:?} is not well formed", h.uri)));
            }
            search.insert(canonical_query(&q), hits);
        }
        let mut fetch = BTreeMap::new();
        for (uri, d) in raw.fetch {
            let bytes = match (d.body, d.body_base64) {
                (Some(b), None) => b.into_bytes(),
                (None, Some(b)) => base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| bad(format!("{uri}: {e}")))?,
                _ => return Err(bad(format!("{uri}: exactly one of body/body_base64 required"))),
            };
            fetch.insert(
                uri,
                Document {
                    content_type: d.content_type,
                    bytes,
                },
            );
        }
        Ok(Self {
            strict: raw.strict,
            search,
            fetch,
        })
    }
}

impl LiteratureProvider for ToolFixture {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        match self.search.get(&canonical_query(query)) {
            Some(hits) => Ok(hits.iter().take(k).cloned().collect()),
            None if self.strict => Err(ToolError::QueryNotInFixture(query.to_string())),
            None => Ok(Vec::new()),
        }
    }
}

impl DocumentFetcher for ToolFixture {
    fn fetch(&self, uri: &str) -> Result<Document, ToolError> {
        self.fetch
            .get(uri)
            .cloned()
            .ok_or_else(|| ToolError::FetchDenied(uri.to_string()))
    }
}

/// Stands in when no provider is configured.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unconfigured;

impl LiteratureProvider for Unconfigured {
    fn search(&self, _query: &str, _k: usize) -> Result<Vec<SearchHit>, ToolError> {
        Err(ToolError::ProviderUnavailable(
            "no literature provider configured".into(),
        ))
    }
}

impl DocumentFetcher for Unconfigured {
    fn fetch(&self, uri: &str) -> Result<Document, ToolError> {
        Err(ToolError::FetchDenied(uri.to_string()))
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Queries `GET <endpoint>?q=<query>&k=<k>`, expecting a JSON array of hits.
pub struct HttpSearch {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpSearch {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: agent(timeout),
        }
    }
}

impl LiteratureProvider for HttpSearch {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let unavailable = |m: String| ToolError::ProviderUnavailable(m);
        let mut resp = self
            .agent
            .get(&self.endpoint)
            .query("q", query)
            .query("k", k.to_string())
            .call()
            .map_err(|e| unavailable(e.to_string()))?;
        if resp.status().as_u16() != 200 {
            return Err(unavailable(format!("search endpoint returned {}", resp.status())));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| unavailable(e.to_string()))?;
        let mut hits: Vec<SearchHit> = serde_json::from_str(&text).map_err(|e| unavailable(e.to_string()))?;
        hits.retain(|h| well_formed(&h.uri));
        hits.truncate(k);
        for h in &mut hits {
            h.source = "live".into();
        }
        Ok(hits)
    }
}

/// Fetches allowlisted URIs over HTTP(S).
pub struct HttpFetcher {
    allowlist: Vec<String>,
    max_bytes: u64,
    agent: ureq::Agent,
}

impl HttpFetcher {
    pub fn new(allowlist: Vec<String>, max_bytes: u64, timeout: Duration) -> Self {
        Self {
            allowlist,
            max_bytes,
            agent: agent(timeout),
        }
    }
}

impl DocumentFetcher for HttpFetcher {
    fn fetch(&self, uri: &str) -> Result<Document, ToolError> {
        if !well_formed(uri) || !self.allowlist.iter().any(|p| uri.starts_with(p.as_str())) {
            return Err(ToolError::FetchDenied(uri.to_string()));
        }
        let failed = |m: String| ToolError::FetchFailed(m);
        let mut resp = self.agent.get(uri).call().map_err(|e| failed(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(failed(format!("{uri} returned {}", resp.status())));
        }
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let mut bytes = Vec::new();
        resp.body_mut()
            .as_reader()
            .take(self.max_bytes + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| failed(e.to_string()))?;
        Ok(Document { content_type, bytes })
    }
}
