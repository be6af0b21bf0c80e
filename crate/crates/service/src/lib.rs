//! HTTP surface for interactive runs. Each run is a small state machine:
//! initializing, then alternating between an iteration in flight and an
//! iteration awaiting selection. Mutations on one run are serialised by a
//! per-run lock; iterations execute on the blocking pool.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use produqd::domains::{self, Domain, EvaluatorKind, ExternalConfig};
use produqd::ideation::{run_iteration, select_classes, start_run, events_of, IdeationConfig, IdeationRun, Progress, RunEvent};
use produqd::store::{export, ExportFormat, ExportWhat, RunStore};
use produqd::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_VERSION: u32 = 1;

/// Defaults applied to every created run before request overrides.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    pub kappa: f64,
    pub initial_samples: usize,
    pub sample_budget: usize,
    /// Evaluator used for domains without a built-in one.
    pub external: Option<ExternalConfig>,
}

impl ServiceConfig {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        let d = IdeationConfig::default();
        Self {
            store_root: store_root.into(),
            kappa: d.sail.ucb.kappa,
            initial_samples: d.initial_samples,
            sample_budget: d.sample_budget,
            external: None,
        }
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

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound(m) => Self::not_found(m),
            Error::Conflict(m) => Self::conflict(m),
            e if e.is_validation() => Self::validation(e.to_string()),
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "api_version": API_VERSION,
            "error": { "kind": self.kind, "message": self.message },
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Phase {
    Initializing,
    Ready,
    Running,
    Failed,
}

struct SlotState {
    phase: Phase,
    run: Option<Arc<IdeationRun>>,
    progress: Option<Progress>,
    /// Iteration in flight, while running.
    iteration: Option<usize>,
    last_error: Option<String>,
    domain: Option<Arc<dyn Domain>>,
}

struct Slot {
    id: String,
    mutate: tokio::sync::Mutex<()>,
    state: RwLock<SlotState>,
}

impl Slot {
    fn new(id: String, phase: Phase, run: Option<IdeationRun>) -> Self {
        Self {
            id,
            mutate: tokio::sync::Mutex::new(()),
            state: RwLock::new(SlotState {
                phase,
                run: run.map(Arc::new),
                progress: None,
                iteration: None,
                last_error: None,
                domain: None,
            }),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SlotState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SlotState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// The run document, or a conflict while there is none yet.
    fn run(&self) -> ApiResult<Arc<IdeationRun>> {
        let s = self.read();
        match (&s.run, s.phase) {
            (Some(r), _) => Ok(r.clone()),
            (None, Phase::Failed) => Err(ApiError::conflict(format!(
                "run {} failed to initialize: {}",
                self.id,
                s.last_error.as_deref().unwrap_or("unknown error")
            ))),
            (None, _) => Err(ApiError::conflict(format!("run {} is still initializing", self.id))),
        }
    }
}

pub struct AppState {
    config: ServiceConfig,
    store: RunStore,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
    idempotency: Mutex<HashMap<String, String>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> produqd::Result<Self> {
        let store = RunStore::open(&config.store_root)?;
        Ok(Self {
            config,
            store,
            slots: Mutex::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    fn slots(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<Slot>>> {
        self.slots.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn new_run_id(&self) -> String {
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        format!("run-{millis}-{}", self.counter.fetch_add(1, Ordering::Relaxed))
    }

    /// Finds a run in memory or loads it from the store.
    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        if let Some(s) = self.slots().get(id) {
            return Ok(s.clone());
        }
        let run = self.store.load(id)?;
        self.repair_events(&run)?;
        let mut slots = self.slots();
        let slot = slots
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Slot::new(id.to_string(), Phase::Ready, Some(run))));
        Ok(slot.clone())
    }

    /// The document is saved before its event is appended, so after a crash
    /// the log can lag the document by one event. Appends what is missing.
    fn repair_events(&self, run: &IdeationRun) -> produqd::Result<()> {
        let logged = self.store.events(&run.run_id)?;
        let implied = events_of(run);
        if logged.len() < implied.len() && implied.starts_with(&logged) {
            for e in &implied[logged.len()..] {
                tracing::warn!(run = %run.run_id, ?e, "restoring missing event");
                self.store.append_event(&run.run_id, e)?;
            }
        } else if logged != implied {
            tracing::warn!(run = %run.run_id, "event log disagrees with the run document");
        }
        Ok(())
    }

    fn build_config(&self, req: &CreateRequest) -> ApiResult<IdeationConfig> {
        let descriptor = domains::descriptor(&req.domain)?;
        let mut base = IdeationConfig {
            domain: req.domain.clone(),
            initial_samples: self.config.initial_samples,
            sample_budget: self.config.sample_budget,
            seed: req.seed.unwrap_or(0),
            ..IdeationConfig::default()
        };
        base.sail.ucb.kappa = self.config.kappa;
        if descriptor.evaluator == EvaluatorKind::External {
            base.external = self.config.external.clone();
        }
        let mut value = serde_json::to_value(&base).map_err(Error::from)?;
        if let Some(overrides) = &req.overrides {
            merge(&mut value, overrides);
        }
        let config: IdeationConfig =
            serde_json::from_value(value).map_err(|e| ApiError::validation(format!("bad overrides: {e}")))?;
        if config.domain != req.domain {
            return Err(ApiError::validation("overrides may not change the domain"));
        }
        config.validate()?;
        Ok(config)
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    let value: Value = serde_json::from_slice(text).map_err(|e| ApiError::validation(format!("bad request body: {e}")))?;
    match value.get("api_version") {
        None => {}
        Some(v) if v.as_u64() == Some(API_VERSION as u64) => {}
        Some(v) => return Err(ApiError::validation(format!("unsupported api_version {v}; expected {API_VERSION}"))),
    }
    serde_json::from_value(value).map_err(|e| ApiError::validation(format!("bad request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/domains", get(list_domains))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/progress", get(get_progress))
        .route("/runs/{id}/advance", post(advance))
        .route("/runs/{id}/select", post(select))
        .route("/runs/{id}/export", get(export_run))
        .with_state(state)
}

/// Serves on an already bound listener until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(config).map_err(std::io::Error::other)?);
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_domains() -> ApiResult<Json<Value>> {
    let list = domains::builtin_names()
        .iter()
        .map(|n| domains::descriptor(n))
        .collect::<produqd::Result<Vec<_>>>()?;
    Ok(Json(json!({ "api_version": API_VERSION, "domains": list })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    #[serde(default)]
    #[allow(dead_code)]
    api_version: Option<u32>,
    domain: String,
    #[serde(default)]
    seed: Option<u64>,
    /// Partial configuration merged over the service defaults.
    #[serde(default)]
    overrides: Option<Value>,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn create_run(State(app): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<Value>> {
    let req: CreateRequest = parse_body(&body)?;
    let key = match headers.get("idempotency-key") {
        Some(v) => Some(v.to_str().map_err(|_| ApiError::validation("idempotency-key is not text"))?.to_string()),
        None => req.idempotency_key.clone(),
    };
    let config = app.build_config(&req)?;

    let id = {
        let mut keys = app.idempotency.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = key.as_ref().and_then(|k| keys.get(k)) {
            return Ok(Json(json!({ "api_version": API_VERSION, "run_id": existing, "created": false })));
        }
        let id = app.new_run_id();
        if let Some(k) = key {
            keys.insert(k, id.clone());
        }
        id
    };
    let slot = Arc::new(Slot::new(id.clone(), Phase::Initializing, None));
    app.slots().insert(id.clone(), slot.clone());

    let app2 = app.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = domains::open(&config.domain, config.external.as_ref()).and_then(|domain| {
            let run = start_run(config, domain.as_ref(), slot.id.clone())?;
            app2.store.save(&run)?;
            Ok((run, domain))
        });
        let mut s = slot.write();
        match outcome {
            Ok((run, domain)) => {
                tracing::info!(run = %slot.id, archive = run.archive.len(), "initialized");
                s.run = Some(Arc::new(run));
                s.domain = Some(domain);
                s.phase = Phase::Ready;
            }
            Err(e) => {
                tracing::error!(run = %slot.id, error = %e, "initialization failed");
                s.last_error = Some(e.to_string());
                s.phase = Phase::Failed;
            }
        }
    });
    Ok(Json(json!({ "api_version": API_VERSION, "run_id": id, "created": true })))
}

fn summary(slot: &Slot) -> Value {
    let s = slot.read();
    let run = s.run.as_ref();
    json!({
        "run_id": slot.id,
        "state": slot_state_name(&s),
        "domain": run.map(|r| r.config.domain.clone()),
        "iterations": run.map_or(0, |r| r.iterations.len()),
        "archive_size": run.map_or(0, |r| r.archive.len()),
    })
}

fn slot_state_name(s: &SlotState) -> &'static str {
    match s.phase {
        Phase::Initializing => "initializing",
        Phase::Running => "running",
        Phase::Failed => "failed",
        Phase::Ready if s.run.as_ref().is_some_and(|r| r.awaiting_selection()) => "awaiting_selection",
        Phase::Ready => "ready",
    }
}

async fn list_runs(State(app): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let mut ids: Vec<String> = app.store.list()?;
    ids.extend(app.slots().keys().cloned());
    ids.sort();
    ids.dedup();
    let mut runs = Vec::with_capacity(ids.len());
    for id in ids {
        runs.push(summary(app.slot(&id)?.as_ref()));
    }
    Ok(Json(json!({ "api_version": API_VERSION, "runs": runs })))
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = app.slot(&id)?.run()?;
    let bytes = serde_json::to_vec(run.as_ref()).map_err(Error::from)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn get_progress(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let s = slot.read();
    let run = s.run.as_ref();
    Ok(Json(json!({
        "api_version": API_VERSION,
        "run_id": slot.id,
        "state": slot_state_name(&s),
        "iteration": s.iteration,
        "progress": s.progress,
        "completed_iterations": run.map_or(0, |r| r.iterations.len()),
        "archive_size": run.map_or(0, |r| r.archive.len()),
        "last_error": s.last_error,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceRequest {
    #[serde(default)]
    #[allow(dead_code)]
    api_version: Option<u32>,
    #[serde(default)]
    sample_budget: Option<usize>,
}

async fn advance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: AdvanceRequest = parse_body(&body)?;
    let slot = app.slot(&id)?;
    let _guard = slot.mutate.lock().await;
    if slot.read().phase == Phase::Running {
        return Err(ApiError::conflict(format!("run {id} already has an iteration in flight")));
    }
    let run = slot.run()?;
    if let Some(latest) = run.latest().filter(|_| run.awaiting_selection()) {
        return Err(ApiError::conflict(format!("iteration {} awaits a selection", latest.index)));
    }
    let budget = req.sample_budget.unwrap_or(run.config.sample_budget);
    let batch = run.config.sail.batch_size;
    if budget == 0 || budget % batch != 0 {
        return Err(ApiError::validation(format!("sample_budget {budget} must be a positive multiple of batch_size {batch}")));
    }
    let index = run.iterations.len() + 1;
    {
        let mut s = slot.write();
        s.phase = Phase::Running;
        s.iteration = Some(index);
        s.progress = None;
        s.last_error = None;
    }

    let slot2 = slot.clone();
    let app2 = app.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = iterate(&app2, &slot2, &run, budget, index);
        let mut s = slot2.write();
        match outcome {
            Ok(next) => {
                tracing::info!(run = %slot2.id, iteration = index, "iteration complete");
                s.run = Some(Arc::new(next));
            }
            Err(e) => {
                tracing::error!(run = %slot2.id, iteration = index, error = %e, "iteration failed");
                s.last_error = Some(e.to_string());
            }
        }
        s.phase = Phase::Ready;
        s.iteration = None;
        s.progress = None;
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "api_version": API_VERSION, "run_id": id, "iteration": index, "sample_budget": budget })),
    ))
}

/// Runs one iteration on a copy of the run and persists it. The stored
/// document is untouched unless the iteration completes.
fn iterate(app: &AppState, slot: &Slot, run: &IdeationRun, budget: usize, index: usize) -> produqd::Result<IdeationRun> {
    let cached = slot.read().domain.clone();
    let domain = match cached {
        Some(d) => d,
        None => {
            let d = domains::open(&run.config.domain, run.config.external.as_ref())?;
            slot.write().domain = Some(d.clone());
            d
        }
    };
    let mut next = run.clone();
    run_iteration(&mut next, domain.as_ref(), budget, &|p| slot.write().progress = Some(p))?;
    app.store.save(&next)?;
    app.store.append_event(&next.run_id, &RunEvent::Advance { iteration: index, budget })?;
    Ok(next)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    #[serde(default)]
    #[allow(dead_code)]
    api_version: Option<u32>,
    iteration: usize,
    classes: Vec<usize>,
}

async fn select(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SelectRequest = parse_body(&body)?;
    let slot = app.slot(&id)?;
    let _guard = slot.mutate.lock().await;
    if slot.read().phase == Phase::Running {
        return Err(ApiError::conflict(format!("run {id} has an iteration in flight")));
    }
    let mut next = (*slot.run()?).clone();
    select_classes(&mut next, req.iteration, &req.classes)?;
    let classes = next.iteration(req.iteration)?.selection.clone();
    let app2 = app.clone();
    let next = tokio::task::spawn_blocking(move || -> produqd::Result<IdeationRun> {
        app2.store.save(&next)?;
        app2.store.append_event(
            &next.run_id,
            &RunEvent::Select {
                iteration: req.iteration,
                classes,
            },
        )?;
        Ok(next)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let selection = next.iteration(req.iteration)?.selection.clone();
    slot.write().run = Some(Arc::new(next));
    Ok(Json(json!({
        "api_version": API_VERSION,
        "run_id": id,
        "iteration": req.iteration,
        "selection": selection,
    })))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    what: String,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    iteration: Option<usize>,
}

async fn export_run(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let what: ExportWhat = q.what.parse()?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("csv").parse()?;
    let run = app.slot(&id)?.run()?;
    let bytes = export(&run, what, format, q.iteration)?;
    let content_type = match format {
        ExportFormat::Csv => "text/csv",
        ExportFormat::Document => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_recursive() {
        let mut a = json!({ "x": 1, "n": { "a": 1, "b": 2 } });
        merge(&mut a, &json!({ "n": { "b": 3, "c": 4 }, "y": [1] }));
        assert_eq!(a, json!({ "x": 1, "n": { "a": 1, "b": 3, "c": 4 }, "y": [1] }));
    }

    #[test]
    fn errors_map_to_statuses() {
        let s = |e: Error| ApiError::from(e).status;
        assert_eq!(s(Error::NotFound("x".into())), StatusCode::NOT_FOUND);
        assert_eq!(s(Error::Conflict("x".into())), StatusCode::CONFLICT);
        assert_eq!(s(Error::Validation("x".into())), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(s(Error::EmptyMap), StatusCode::INTERNAL_SERVER_ERROR);
    }

    #[test]
    fn body_version_is_checked() {
        #[derive(Deserialize)]
        struct B {
            #[allow(dead_code)]
            api_version: Option<u32>,
        }
        assert!(parse_body::<B>(&Bytes::from_static(b"")).is_ok());
        assert!(parse_body::<B>(&Bytes::from_static(b"{\"api_version\":1}")).is_ok());
        assert!(parse_body::<B>(&Bytes::from_static(b"{\"api_version\":2}")).is_err());
        assert!(parse_body::<B>(&Bytes::from_static(b"[")).is_err());
    }
}
