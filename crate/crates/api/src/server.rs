//! HTTP routes over the project engine.
//!
//! Each project runs on its own ticker thread that steps the engine until
//! it is idle and then sleeps until a route wakes it. Routes only observe
//! state or feed user input (chat, goal decisions); nothing here can move a
//! workstream past an engine gate.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tower_http::cors::{AllowOrigin, CorsLayer};
use workbench_core::bus::AgentId;
use workbench_core::engine::{is_project_dir, Engine, EngineError, GoalDecision, ProjectHandle, Workstream};
use workbench_core::report::RenderFormat;
use workbench_core::tools::Toolbox;
use workbench_core::workspace::WorkspaceError;

use crate::config::{ApiConfig, ConfigError};
use crate::events::event_stream;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot reopen project {id}: {source}")]
    Reopen { id: String, source: EngineError },
}

/// Wakes a sleeping ticker.
#[derive(Default)]
struct Wake {
    pending: Mutex<bool>,
    cond: Condvar,
}

impl Wake {
    fn notify(&self) {
        *self.pending.lock().unwrap() = true;
        self.cond.notify_all();
    }

    fn wait(&self, timeout: Duration) {
        let guard = self.pending.lock().unwrap();
        let (mut guard, _) = self.cond.wait_timeout_while(guard, timeout, |p| !*p).unwrap();
        *guard = false;
    }
}

struct ProjectRuntime {
    handle: Arc<ProjectHandle>,
    wake: Arc<Wake>,
    idle: Arc<AtomicBool>,
    ticker: Mutex<Option<JoinHandle<()>>>,
}

impl ProjectRuntime {
    fn start(handle: Arc<ProjectHandle>, stop: Arc<AtomicBool>) -> Arc<Self> {
        let wake = Arc::new(Wake::default());
        let idle = Arc::new(AtomicBool::new(false));
        let (h, w, i) = (handle.clone(), wake.clone(), idle.clone());
        let ticker = std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                // Busy for the whole tick, so readers never see a half-applied step as idle.
                i.store(false, Ordering::SeqCst);
                match h.tick() {
                    Ok(s) if s.is_idle() => {
                        i.store(true, Ordering::SeqCst);
                        w.wait(Duration::from_millis(500));
                    }
                    Ok(_) => {}
                    Err(e) => {
                        log::error!("tick failed: {e}");
                        i.store(true, Ordering::SeqCst);
                        w.wait(Duration::from_secs(1));
                    }
                }
            }
        });
        Arc::new(Self {
            handle,
            wake,
            idle,
            ticker: Mutex::new(Some(ticker)),
        })
    }

    /// Marks the project busy and wakes its ticker.
    fn poke(&self) {
        self.idle.store(false, Ordering::SeqCst);
        self.wake.notify();
    }
}

pub struct AppState {
    config: ApiConfig,
    token: Option<String>,
    tools: Arc<Toolbox>,
    projects: RwLock<BTreeMap<String, Arc<ProjectRuntime>>>,
    create_lock: Mutex<()>,
    stop: Arc<AtomicBool>,
}

impl AppState {
    fn project(&self, id: &str) -> Result<Arc<ProjectRuntime>, ApiError> {
        self.projects
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown project {id}")))
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.config.data_dir.join(id)
    }

    fn add(&self, id: String, engine: Engine) -> Arc<ProjectRuntime> {
        let rt = ProjectRuntime::start(ProjectHandle::new(engine), self.stop.clone());
        self.projects.write().unwrap().insert(id, rt.clone());
        rt
    }

    fn next_id(&self) -> String {
        let projects = self.projects.read().unwrap();
        let mut n = projects.len() + 1;
        while projects.contains_key(&format!("p{n}")) || self.dir(&format!("p{n}")).exists() {
            n += 1;
        }
        format!("p{n}")
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use EngineError::*;
        let (status, kind) = match &e {
            GoalNotApproved(_) => (StatusCode::CONFLICT, "GoalNotApproved"),
            UnknownGoal(_) => (StatusCode::NOT_FOUND, "UnknownGoal"),
            NotUser(_) => (StatusCode::FORBIDDEN, "NotUser"),
            NoGoalsApproved => (StatusCode::UNPROCESSABLE_ENTITY, "NoGoalsApproved"),
            GateViolation(_) => (StatusCode::CONFLICT, "GateViolation"),
            UnknownWorkstream(_) => (StatusCode::NOT_FOUND, "UnknownWorkstream"),
            InvalidState(_) => (StatusCode::CONFLICT, "InvalidState"),
            Workspace(WorkspaceError::NotFound(_)) | Workspace(WorkspaceError::VersionOutOfRange { .. }) => {
                (StatusCode::NOT_FOUND, "NotFound")
            }
            Workspace(WorkspaceError::InvalidPath { .. }) => (StatusCode::BAD_REQUEST, "InvalidPath"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        EngineError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.kind, "message": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

/// Splits a workstream route id `<project>.<ws>`.
fn split_ws(id: &str) -> ApiResult<(&str, &str)> {
    id.split_once('.')
        .ok_or_else(|| ApiError::bad_request(format!("workstream id {id:?} must look like <project>.<workstream>")))
}

fn ws_json(project: &str, w: &Workstream) -> Value {
    let mut v = serde_json::to_value(w).expect("workstream serializes");
    v["route_id"] = json!(format!("{project}.{}", w.id));
    v["project"] = json!(project);
    v
}

/// Text plus uploaded files, from JSON or multipart form data.
struct UserInput {
    text: String,
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Deserialize)]
struct JsonInput {
    #[serde(alias = "brief")]
    text: String,
}

async fn user_input(req: Request, field: &'static str) -> ApiResult<UserInput> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        let Json(body): Json<Value> = Json::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        let input: JsonInput = serde_json::from_value(body.get(field).map_or(body.clone(), |t| json!({ "text": t })))
            .map_err(|_| ApiError::bad_request(format!("body must be {{\"{field}\": <text>}}")))?;
        return Ok(UserInput {
            text: input.text,
            files: Vec::new(),
        });
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut text = None;
    let mut files = Vec::new();
    while let Some(part) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        let name = part.name().unwrap_or_default().to_string();
        let file_name = part.file_name().map(str::to_string);
        let data = part.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        match file_name {
            Some(f) if !f.is_empty() => files.push((f, data.to_vec())),
            _ if name == field || name == "text" => {
                text = Some(String::from_utf8(data.to_vec()).map_err(|_| ApiError::bad_request("text is not UTF-8"))?)
            }
            _ => return Err(ApiError::bad_request(format!("unexpected form field {name:?}"))),
        }
    }
    Ok(UserInput {
        text: text.ok_or_else(|| ApiError::bad_request(format!("missing form field {field:?}")))?,
        files,
    })
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_project(State(s): State<Arc<AppState>>, req: Request) -> ApiResult<(StatusCode, Json<Value>)> {
    let input = user_input(req, "brief").await?;
    if input.text.trim().is_empty() {
        return Err(ApiError::bad_request("brief is empty"));
    }
    let state = s.clone();
    let (id, message_id) = blocking(move || {
        let _guard = state.create_lock.lock().unwrap();
        let id = state.next_id();
        let backend = state
            .config
            .model()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Backend", e.to_string()))?;
        let mut engine = Engine::create(state.dir(&id), &id, state.config.engine, backend, state.tools.clone())?;
        let message_id = engine.start(&input.text, &input.files)?;
        state.add(id.clone(), engine);
        Ok((id, message_id))
    })
    .await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "project_id": id, "message_id": message_id })),
    ))
}

async fn list_projects(State(s): State<Arc<AppState>>) -> Json<Value> {
    let ids: Vec<String> = s.projects.read().unwrap().keys().cloned().collect();
    Json(json!({ "projects": ids }))
}

async fn get_project(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let rt = s.project(&id)?;
    blocking(move || {
        let engine = rt.handle.lock();
        let mut v = serde_json::to_value(engine.view()).expect("view serializes");
        // Idle means the ticker found nothing to do and no input arrived since.
        v["idle"] = json!(rt.idle.load(Ordering::SeqCst) && engine.is_idle());
        v["workstream_details"] = engine.workstreams().values().map(|w| ws_json(&id, w)).collect();
        Ok(Json(v))
    })
    .await
}

async fn chat(State(s): State<Arc<AppState>>, Path(id): Path<String>, req: Request) -> ApiResult<Json<Value>> {
    let rt = s.project(&id)?;
    let input = user_input(req, "text").await?;
    blocking(move || {
        let message_id = rt.handle.lock().handle_user_message(&input.text, &input.files)?;
        rt.poke();
        Ok(Json(json!({ "message_id": message_id })))
    })
    .await
}

#[derive(Deserialize)]
struct GoalsBody {
    decisions: BTreeMap<String, GoalDecision>,
}

async fn goals(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<GoalsBody>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let rt = s.project(&id)?;
    blocking(move || {
        let approved = rt.handle.lock().approve_goals(&AgentId::user(), &body.decisions)?;
        rt.poke();
        Ok(Json(json!({ "approved": approved })))
    })
    .await
}

#[derive(Deserialize)]
struct AfterQuery {
    after: Option<u64>,
}

async fn events(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<AfterQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let rt = s.project(&id)?;
    let last_seen = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = q.after.or(last_seen).unwrap_or(0);
    let body = Body::from_stream(event_stream(rt.handle.events().clone(), after));
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(body)
        .expect("response builds"))
}

async fn list_workstreams(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let rt = s.project(&id)?;
    blocking(move || {
        let engine = rt.handle.lock();
        let list: Vec<Value> = engine.workstreams().values().map(|w| ws_json(&id, w)).collect();
        Ok(Json(json!({ "workstreams": list })))
    })
    .await
}

async fn get_workstream(State(s): State<Arc<AppState>>, Path(wid): Path<String>) -> ApiResult<Json<Value>> {
    let (p, ws) = split_ws(&wid)?;
    let rt = s.project(p)?;
    let (p, ws) = (p.to_string(), ws.to_string());
    blocking(move || Ok(Json(ws_json(&p, rt.handle.lock().workstream(&ws)?)))).await
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
    version: Option<u32>,
}

async fn report(
    State(s): State<Arc<AppState>>,
    Path(wid): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let format: RenderFormat = q
        .format
        .as_deref()
        .unwrap_or("structured")
        .parse()
        .map_err(ApiError::bad_request)?;
    let (p, ws) = split_ws(&wid)?;
    let rt = s.project(p)?;
    let ws = ws.to_string();
    let bytes = blocking(move || Ok(rt.handle.lock().render_report(&ws, format, q.version)?)).await?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}

async fn trajectory(State(s): State<Arc<AppState>>, Path(wid): Path<String>) -> ApiResult<Json<Value>> {
    let (p, ws) = split_ws(&wid)?;
    let rt = s.project(p)?;
    let ws = ws.to_string();
    blocking(move || {
        let records = rt.handle.lock().trajectory(&ws)?;
        Ok(Json(json!({ "records": records })))
    })
    .await
}

async fn review(State(s): State<Arc<AppState>>, Path(wid): Path<String>) -> ApiResult<Json<Value>> {
    let (p, ws) = split_ws(&wid)?;
    let rt = s.project(p)?;
    let ws = ws.to_string();
    blocking(move || Ok(Json(rt.handle.lock().review(&ws)?))).await
}

#[derive(Deserialize)]
struct FileQuery {
    version: Option<u32>,
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit_once('.').map(|(_, ext)| ext) {
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("md") => "text/markdown; charset=utf-8",
        Some("tex") => "application/x-latex",
        Some("html") => "text/html; charset=utf-8",
        Some("txt" | "py" | "log" | "rs" | "c" | "cpp" | "lean" | "sh") => "text/plain; charset=utf-8",
        Some("pdf") => "application/pdf",
        _ => "application/octet-stream",
    }
}

async fn file(
    State(s): State<Arc<AppState>>,
    Path((id, path)): Path<(String, String)>,
    Query(q): Query<FileQuery>,
) -> ApiResult<Response> {
    let rt = s.project(&id)?;
    let ws = rt.handle.workspace().clone();
    let p = path.clone();
    let (bytes, version) = blocking(move || {
        let bytes = ws.read_file(&p, q.version)?;
        let version = q.version.or_else(|| ws.latest_version(&p)).unwrap_or(0);
        Ok((bytes, version))
    })
    .await?;
    let mut resp = (
        [(header::CONTENT_TYPE, HeaderValue::from_static(content_type(&path)))],
        Bytes::from(bytes),
    )
        .into_response();
    resp.headers_mut().insert(
        "x-file-version",
        HeaderValue::from_str(&version.to_string()).expect("digits"),
    );
    Ok(resp)
}

#[derive(Deserialize)]
struct ListQuery {
    prefix: Option<String>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    versions: u32,
}

async fn list_files(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<Value>> {
    let rt = s.project(&id)?;
    blocking(move || {
        let ws = rt.handle.workspace();
        let files: Vec<FileEntry> = ws
            .list_files(q.prefix.as_deref().unwrap_or(""))
            .into_iter()
            .map(|path| FileEntry {
                versions: ws.latest_version(&path).unwrap_or(0),
                path,
            })
            .collect();
        Ok(Json(json!({ "files": files })))
    })
    .await
}

async fn auth(State(s): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "Unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/projects", post(create_project).get(list_projects))
        .route("/v1/projects/{id}", get(get_project))
        .route("/v1/projects/{id}/chat", post(chat))
        .route("/v1/projects/{id}/goals", post(goals))
        .route("/v1/projects/{id}/events", get(events))
        .route("/v1/projects/{id}/workstreams", get(list_workstreams))
        .route("/v1/projects/{id}/files", get(list_files))
        .route("/v1/projects/{id}/files/{*path}", get(file))
        .route("/v1/workstreams/{id}", get(get_workstream))
        .route("/v1/workstreams/{id}/report", get(report))
        .route("/v1/workstreams/{id}/trajectory", get(trajectory))
        .route("/v1/workstreams/{id}/review", get(review))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    let mut app = Router::new()
        .route("/health", get(health))
        .merge(api)
        .with_state(state.clone());
    if !state.config.cors_origins.is_empty() {
        let origins: Vec<HeaderValue> = state
            .config
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([
                    header::AUTHORIZATION,
                    header::CONTENT_TYPE,
                    "last-event-id".parse().expect("name"),
                ]),
        );
    }
    app
}

const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);

/// A running server; dropping it without [`Server::shutdown`] leaves the
/// tickers running until the process exits.
pub struct Server {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests, stops the tickers and persists every project.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        // Open event streams never end on their own; cut them off.
        let result = match tokio::time::timeout(SHUTDOWN_GRACE, &mut self.task).await {
            Ok(joined) => joined.unwrap_or(Ok(())),
            Err(_) => {
                self.task.abort();
                Ok(())
            }
        };
        let state = self.state.clone();
        tokio::task::spawn_blocking(move || {
            state.stop.store(true, Ordering::SeqCst);
            let projects: Vec<_> = state.projects.read().unwrap().values().cloned().collect();
            for rt in projects {
                rt.wake.notify();
                if let Some(t) = rt.ticker.lock().unwrap().take() {
                    let _ = t.join();
                }
                if let Err(e) = rt.handle.lock().persist() {
                    log::error!("persist on shutdown failed: {e}");
                }
            }
        })
        .await
        .ok();
        result
    }
}

fn is_loopback(addr: &str) -> bool {
    addr.parse::<SocketAddr>()
        .map(|a| a.ip().is_loopback())
        .unwrap_or(false)
        || addr.starts_with("localhost:")
}

/// Binds, reopens existing projects in `data_dir` and starts serving.
pub async fn serve(config: ApiConfig) -> Result<Server, ServeError> {
    serve_with_token(config, std::env::var("API_TOKEN").ok().filter(|t| !t.is_empty())).await
}

pub async fn serve_with_token(config: ApiConfig, token: Option<String>) -> Result<Server, ServeError> {
    if token.is_none() && !is_loopback(&config.listen) {
        return Err(ConfigError::Invalid(format!(
            "{} is not a loopback address; set API_TOKEN to serve beyond this machine",
            config.listen
        ))
        .into());
    }
    config.model()?;
    let tools = config.toolbox()?;
    std::fs::create_dir_all(&config.data_dir).map_err(|source| ConfigError::Read {
        path: config.data_dir.clone(),
        source,
    })?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServeError::BindFailure {
            addr: config.listen.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServeError::BindFailure {
        addr: config.listen.clone(),
        source,
    })?;
    let state = Arc::new(AppState {
        config,
        token,
        tools,
        projects: RwLock::new(BTreeMap::new()),
        create_lock: Mutex::new(()),
        stop: Arc::new(AtomicBool::new(false)),
    });
    let mut existing: Vec<String> = std::fs::read_dir(&state.config.data_dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| is_project_dir(&e.path()))
                .filter_map(|e| e.file_name().into_string().ok())
                .collect()
        })
        .unwrap_or_default();
    existing.sort();
    for id in existing {
        let backend = state.config.model()?;
        let engine = Engine::open(state.dir(&id), backend, state.tools.clone())
            .map_err(|source| ServeError::Reopen { id: id.clone(), source })?;
        state.add(id, engine);
    }
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(Server {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}
