#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use futures::StreamExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::StatusCode;
use serde_json::{json, Value};
use workbench_api::events::decode_frames;
use workbench_api::{ApiConfig, BackendConfig, Server};
use workbench_core::engine::{Project, EVENTS_PATH};
use workbench_core::scenario::{UserScript, UserStep};

pub fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

/// A loopback config on an ephemeral port serving the sofa walkthrough fixtures.
pub fn sofa_config(data_dir: &Path) -> ApiConfig {
    let mut c = ApiConfig::new(
        BackendConfig::Scripted {
            fixture: core_fixture("sofa.fixture.json"),
        },
        data_dir,
    );
    c.listen = "127.0.0.1:0".into();
    c.tools.fixture = Some(core_fixture("sofa.toolfix.json"));
    c
}

pub async fn start(config: ApiConfig) -> Server {
    workbench_api::serve_with_token(config, None).await.unwrap()
}

#[derive(Clone)]
pub struct Client {
    pub base: String,
    pub http: reqwest::Client,
    pub token: Option<String>,
}

impl Client {
    pub fn new(server: &Server) -> Self {
        Self {
            base: server.url(),
            http: reqwest::Client::new(),
            token: None,
        }
    }

    fn auth(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self
            .auth(self.http.get(format!("{}{path}", self.base)))
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get_bytes(&self, path: &str) -> (StatusCode, reqwest::header::HeaderMap, Vec<u8>) {
        let r = self
            .auth(self.http.get(format!("{}{path}", self.base)))
            .send()
            .await
            .unwrap();
        let (status, headers) = (r.status(), r.headers().clone());
        (status, headers, r.bytes().await.unwrap().to_vec())
    }

    pub async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .auth(self.http.post(format!("{}{path}", self.base)).json(&body))
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    /// Polls the project until its ticker reports idle.
    pub async fn wait_idle(&self, project: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let (status, v) = self.get(&format!("/v1/projects/{project}")).await;
            assert_eq!(status, StatusCode::OK, "{v}");
            if v["idle"] == json!(true) {
                return v;
            }
            assert!(Instant::now() < deadline, "project {project} never went idle");
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Plays the sofa user script over HTTP; returns the project id.
    pub async fn play_sofa(&self) -> String {
        let script = UserScript::parse(&std::fs::read(core_fixture("sofa.user.json")).unwrap()).unwrap();
        let (status, v) = self.post("/v1/projects", json!({ "brief": script.brief })).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        let id = v["project_id"].as_str().unwrap().to_string();
        self.wait_idle(&id).await;
        for step in &script.steps {
            let (status, v) = match step {
                UserStep::Say(text) => {
                    self.post(&format!("/v1/projects/{id}/chat"), json!({ "text": text }))
                        .await
                }
                UserStep::Approve(sel) => {
                    let (_, view) = self.get(&format!("/v1/projects/{id}")).await;
                    let project: Project = serde_json::from_value(view).unwrap();
                    let decisions = sel.decisions(&project);
                    self.post(&format!("/v1/projects/{id}/goals"), json!({ "decisions": decisions }))
                        .await
                }
            };
            assert_eq!(status, StatusCode::OK, "{v}");
            self.wait_idle(&id).await;
        }
        id
    }

    /// Event ids in the persisted log.
    pub async fn logged_events(&self, project: &str) -> Vec<Value> {
        let (status, _, bytes) = self
            .get_bytes(&format!("/v1/projects/{project}/files/{EVENTS_PATH}"))
            .await;
        assert_eq!(status, StatusCode::OK);
        String::from_utf8(bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    /// Reads the event stream from `after`, taking at most `take` frames
    /// before hanging up.
    pub async fn read_events(&self, project: &str, after: Option<u64>, take: usize) -> Vec<(u64, Value)> {
        let mut rb = self.auth(self.http.get(format!("{}/v1/projects/{project}/events", self.base)));
        if let Some(a) = after {
            rb = rb.header("Last-Event-ID", a.to_string());
        }
        let resp = rb.send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        let mut stream = resp.bytes_stream();
        let (mut buf, mut out) = (String::new(), Vec::new());
        while out.len() < take {
            let chunk = match tokio::time::timeout(Duration::from_secs(2), stream.next()).await {
                Ok(Some(c)) => c.unwrap(),
                _ => break,
            };
            buf.push_str(std::str::from_utf8(&chunk).unwrap());
            let (frames, rest) = decode_frames(&buf);
            buf = rest;
            for (id, _, data) in frames {
                out.push((id, serde_json::from_str(&data).unwrap()));
            }
        }
        out.truncate(take);
        out
    }
}

/// Asserts `ids` is exactly 1..=n with no gaps or repeats.
pub fn assert_gap_free(ids: &[u64], n: usize) {
    let distinct: BTreeSet<u64> = ids.iter().copied().collect();
    assert_eq!(distinct.len(), ids.len(), "duplicate event ids");
    assert_eq!(ids, (1..=n as u64).collect::<Vec<_>>().as_slice());
}

pub fn workbench() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_workbench"))
}

/// Runs `workbench bench` on the sum problem; returns exit code, answer JSON
/// and wall time.
pub fn bench(fixture: &str, time_limit: &str) -> (i32, Value, Duration) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("answer.json");
    let started = Instant::now();
    let status = workbench()
        .args(["bench", "--time-limit", time_limit, "--problem"])
        .arg(core_fixture("sum.problem.txt"))
        .arg("--backend")
        .arg(format!("scripted:{}", core_fixture(fixture).display()))
        .arg("--out")
        .arg(&out)
        .arg("--dir")
        .arg(dir.path().join("project"))
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    let elapsed = started.elapsed();
    let answer = std::fs::read(&out)
        .map(|b| serde_json::from_slice(&b).unwrap())
        .unwrap_or(Value::Null);
    (status.code().unwrap_or(-1), answer, elapsed)
}

/// Plays The sofa walkthrough over HTTP and in process and checks the two end identically.
pub async fn http_parity() {
    let http_dir = tempfile::tempdir().unwrap();
    let server = start(sofa_config(http_dir.path())).await;
    let c = Client::new(&server);
    let id = c.play_sofa().await;
    assert_eq!(id, "p1");

    let (status, traj) = c.get("/v1/workstreams/p1.ws1/trajectory").await;
    assert_eq!(status, StatusCode::OK);
    let records: Vec<workbench_core::agent::ActionRecord> = serde_json::from_value(traj["records"].clone()).unwrap();
    let labels: Vec<String> = records.iter().map(common::checks::label).collect();
    assert_eq!(labels, common::checks::LITERATURE_TRAJECTORY);
    let (_, headers, md) = c.get_bytes("/v1/workstreams/p1.ws1/report?format=markdown").await;
    assert!(headers["content-type"].to_str().unwrap().starts_with("text/markdown"));
    assert_eq!(md, std::fs::read(common::fixture("sofa.ws1.report.md")).unwrap());
    let (status, review) = c.get("/v1/workstreams/p1.ws2/review").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(review["sessions"][0]["status"], "Stalled");
    server.shutdown().await.unwrap();

    let local_dir = tempfile::tempdir().unwrap();
    let dir = local_dir.path().to_path_buf();
    tokio::task::spawn_blocking(move || drop(common::run_sofa(&dir)))
        .await
        .unwrap();
    common::checks::assert_same_state(&http_dir.path().join("p1"), local_dir.path());
}

/// Follows the event stream of a live sofa walkthrough, hanging up after a few
/// frames each time; returns the number of reconnects.
pub async fn sse_resume(seed: u64) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let server = start(sofa_config(dir.path())).await;
    let c = Client::new(&server);
    let player = tokio::spawn({
        let c = c.clone();
        async move { c.play_sofa().await }
    });
    // Wait for the project to exist.
    while c.get("/v1/projects/p1").await.0 != StatusCode::OK {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let (mut seen, mut last, mut reconnects) = (Vec::<(u64, Value)>::new(), None, 0);
    let mut done_len = None;
    loop {
        let got = c.read_events("p1", last, rng.gen_range(1..6)).await;
        reconnects += 1;
        if let Some(&(id, _)) = got.last() {
            last = Some(id);
        }
        seen.extend(got);
        if done_len.is_none() && player.is_finished() {
            done_len = Some(c.logged_events("p1").await.len());
        }
        if done_len.is_some_and(|n| seen.len() >= n) {
            break;
        }
    }
    player.await.unwrap();
    let logged = c.logged_events("p1").await;
    let ids: Vec<u64> = seen.iter().map(|(id, _)| *id).collect();
    assert_gap_free(&ids, logged.len());
    for ((_, data), line) in seen.iter().zip(&logged) {
        assert_eq!(data, line);
    }
    server.shutdown().await.unwrap();
    reconnects
}
