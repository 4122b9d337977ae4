//! HTTP session service.
//!
//! Request/response endpoints take and return JSON. Each session also has a
//! server-sent event stream: every frame carries `id: <seq>`, `event: <type>`
//! and the event as JSON in `data`. A subscriber without `?since=` first gets
//! a `snapshot` of the current world whose id is the last sequence number it
//! reflects, then every later event in order.

pub mod cli;

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use craftloop::dsl::{parse_lf_json, LogicalForm};
use craftloop::pipeline::{funnel_stats, Annotation, AnnotationError, AnnotationQueue, DatasetRegistry, ErrorKind, ErrorRecord, FunnelStats, Manifest};
use craftloop::parser::ParserModel;
use craftloop::routing::{RoutingState, Terminal};
use craftloop::scoring::{GateDecision, SessionScore};
use craftloop::session::{session_world, CommandRecord, Phase, Sequenced, Session, SessionConfig, SessionError, SessionEvent};
use craftloop::vision::{SegMask, SegModel};
use craftloop::worker::WorkerRegistry;
use craftloop::world::Pos;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Delay before "command received" is cleared.
    pub received_clear: Duration,
    pub tick_interval: Duration,
    pub ticks_per_step: usize,
    pub session: SessionConfig,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            received_clear: Duration::from_millis(500),
            tick_interval: Duration::from_millis(50),
            ticks_per_step: 1,
            session: SessionConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("worker {0} is not qualified")]
    Unqualified(String),
    #[error("worker {0} is blacklisted")]
    Blacklisted(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("no tranche {0}")]
    UnknownTranche(u32),
}

impl ApiError {
    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::Unqualified(_) => "unqualified",
            ApiError::Blacklisted(_) => "blacklisted",
            ApiError::Session(SessionError::RoutingPending) => "routing_pending",
            ApiError::Session(SessionError::EmptyCommand) => "empty_command",
            ApiError::Session(SessionError::NoPendingRouting) => "no_pending_routing",
            ApiError::Annotation(AnnotationError::UnknownTask(_)) => "unknown_task",
            ApiError::Annotation(AnnotationError::InvalidAnnotation(_)) => "invalid_annotation",
            ApiError::UnknownTranche(_) => "unknown_tranche",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) | ApiError::UnknownTranche(_) | ApiError::Annotation(AnnotationError::UnknownTask(_)) => StatusCode::NOT_FOUND,
            ApiError::Unqualified(_) | ApiError::Blacklisted(_) => StatusCode::FORBIDDEN,
            ApiError::Session(SessionError::EmptyCommand) => StatusCode::BAD_REQUEST,
            ApiError::Session(_) => StatusCode::CONFLICT,
            ApiError::Annotation(AnnotationError::InvalidAnnotation(_)) => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.code(), "message": self.to_string() }))).into_response()
    }
}

struct Slot {
    session: Mutex<Session>,
    /// Last emitted sequence number; wakes event streams.
    notify: watch::Sender<u64>,
    started: Instant,
}

impl Slot {
    fn publish(&self, session: &Session) {
        if let Some(last) = session.events().last() {
            self.notify.send_replace(last.seq);
        }
    }
}

#[derive(Default)]
struct Data {
    records: Vec<CommandRecord>,
    queue: AnnotationQueue,
}

struct Shared {
    config: ServiceConfig,
    parser: Arc<ParserModel>,
    segmenter: Option<Arc<SegModel>>,
    history: Arc<Vec<String>>,
    registry: DatasetRegistry,
    workers: Mutex<WorkerRegistry>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    data: Mutex<Data>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// `registry` must hold tranche 0; the deployed parser is trained on it
    /// unless one is given.
    pub fn new(config: ServiceConfig, registry: DatasetRegistry, workers: WorkerRegistry, parser: Option<ParserModel>, segmenter: Option<SegModel>) -> anyhow::Result<Self> {
        let parser = match parser {
            Some(p) => p,
            None => ParserModel::new().train(&registry.r(0), 0)?,
        };
        let history = registry.r(0).into_iter().map(|p| p.text).collect();
        Ok(AppState(Arc::new(Shared {
            config,
            parser: Arc::new(parser),
            segmenter: segmenter.map(Arc::new),
            history: Arc::new(history),
            registry,
            workers: Mutex::new(workers),
            sessions: Mutex::new(HashMap::new()),
            data: Mutex::new(Data::default()),
            next_id: AtomicU64::new(0),
        })))
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.0.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub fn records(&self) -> Vec<CommandRecord> {
        self.0.data.lock().unwrap().records.clone()
    }

    pub fn open_tasks(&self) -> Vec<ErrorRecord> {
        self.0.data.lock().unwrap().queue.open_tasks().cloned().collect()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/command", post(submit_command))
        .route("/sessions/{id}/routing", post(answer_routing))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/score", get(score))
        .route("/annotations/{task_id}", post(submit_annotation))
        .route("/admin/funnel", get(funnel))
        .route("/admin/registry/{n}", get(registry))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub worker_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub phase: Phase,
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> Result<Json<Created>, ApiError> {
    {
        let workers = app.0.workers.lock().unwrap();
        match workers.entries.get(&req.worker_id) {
            Some(e) if e.blacklisted => return Err(ApiError::Blacklisted(req.worker_id)),
            Some(e) if e.qualified => {}
            _ => return Err(ApiError::Unqualified(req.worker_id)),
        }
    }
    let n = app.0.next_id.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n:06}");
    let (world, _) = session_world(app.0.config.seed.wrapping_add(n));
    let iteration = app.0.registry.len() as u32;
    let session = Session::new(&id, &req.worker_id, iteration, world, app.0.parser.clone(), app.0.segmenter.clone(), app.0.history.clone(), app.0.config.session.clone());
    let (notify, _) = watch::channel(0);
    let slot = Arc::new(Slot { session: Mutex::new(session), notify, started: Instant::now() });
    app.0.sessions.lock().unwrap().insert(id.clone(), slot);
    Ok(Json(Created { session_id: id, phase: Phase::Idle }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Command {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ack {
    pub phase: Phase,
    pub routing: Option<RoutingState>,
}

async fn submit_command(State(app): State<AppState>, Path(id): Path<String>, Json(cmd): Json<Command>) -> Result<Json<Ack>, ApiError> {
    let slot = app.slot(&id)?;
    let (received, doing, ack) = {
        let mut s = slot.session.lock().unwrap();
        let from = s.events().last().map_or(0, |e| e.seq + 1);
        s.submit_command(&cmd.text)?;
        let received = s.events_since(from).iter().any(|e| matches!(e.event, SessionEvent::Status { phase: Phase::Received, .. }));
        slot.publish(&s);
        (received, received && s.phase() == Phase::Doing, Ack { phase: s.phase(), routing: s.routing() })
    };
    if received {
        let (slot, delay) = (slot.clone(), app.0.config.received_clear);
        tokio::spawn(async move {
            tokio::time::sleep(delay).await;
            let mut s = slot.session.lock().unwrap();
            s.clear_received();
            slot.publish(&s);
        });
    }
    if doing {
        let (interval, ticks) = (app.0.config.tick_interval, app.0.config.ticks_per_step);
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(interval).await;
                let mut s = slot.session.lock().unwrap();
                s.advance(ticks);
                slot.publish(&s);
                if s.phase() != Phase::Doing {
                    break;
                }
            }
        });
    }
    Ok(Json(ack))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Answer {
    pub yes: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoutingReply {
    pub routing: RoutingState,
    /// Annotation task opened for an NLU or vision error.
    pub task_id: Option<u64>,
}

async fn answer_routing(State(app): State<AppState>, Path(id): Path<String>, Json(answer): Json<Answer>) -> Result<Json<RoutingReply>, ApiError> {
    let slot = app.slot(&id)?;
    let (routing, committed, snapshot) = {
        let mut s = slot.session.lock().unwrap();
        let routing = s.answer_routing(answer.yes)?;
        slot.publish(&s);
        let committed = matches!(routing, RoutingState::Done(_)).then(|| s.records.last().cloned()).flatten();
        (routing, committed, s.agent.world.snapshot())
    };
    let mut task_id = None;
    if let Some(rec) = committed {
        let mut data = app.0.data.lock().unwrap();
        let idx = data.records.len();
        let task = match rec.terminal {
            Some(Terminal::NluError) => Some(ErrorRecord::nlu(rec.text.clone(), rec.parse.clone())),
            Some(Terminal::VisionError) => Some(ErrorRecord::vision(rec.text.clone(), snapshot)),
            _ => None,
        };
        if let Some(mut task) = task {
            task.record = Some(idx);
            task_id = Some(data.queue.push(task));
        }
        data.records.push(rec);
    }
    Ok(Json(RoutingReply { routing, task_id }))
}

#[derive(Debug, Deserialize)]
pub struct Since {
    pub since: Option<u64>,
}

fn frame(e: &Sequenced) -> Event {
    let data = serde_json::to_string(e).expect("events serialize");
    let kind = serde_json::to_value(&e.event).ok().and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_string)).unwrap_or_default();
    Event::default().id(e.seq.to_string()).event(kind).data(data)
}

async fn events(State(app): State<AppState>, Path(id): Path<String>, Query(q): Query<Since>) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let slot = app.slot(&id)?;
    let rx = slot.notify.subscribe();
    let (first, cursor) = {
        let s = slot.session.lock().unwrap();
        match q.since {
            Some(seq) => (Vec::new(), seq),
            None => {
                let last = s.events().last().map_or(0, |e| e.seq);
                (vec![Sequenced { seq: last, event: SessionEvent::Snapshot { world: s.agent.world.snapshot() } }], last + 1)
            }
        }
    };
    let stream = futures::stream::unfold((slot, rx, cursor, first), |(slot, mut rx, mut cursor, mut pending)| async move {
        loop {
            if !pending.is_empty() {
                let e = pending.remove(0);
                return Some((Ok(frame(&e)), (slot, rx, cursor, pending)));
            }
            {
                let s = slot.session.lock().unwrap();
                pending = s.events_since(cursor).to_vec();
            }
            if let Some(last) = pending.last() {
                cursor = last.seq + 1;
                continue;
            }
            rx.changed().await.ok()?;
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreView {
    pub score: SessionScore,
    pub bonus: f64,
    pub gate: GateDecision,
    pub elapsed_seconds: u64,
}

async fn score(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<ScoreView>, ApiError> {
    let slot = app.slot(&id)?;
    let elapsed = slot.started.elapsed().as_secs();
    let s = slot.session.lock().unwrap();
    Ok(Json(ScoreView { score: s.score.clone(), bonus: s.bonus(), gate: s.gate(elapsed), elapsed_seconds: elapsed }))
}

/// An annotation: a logical form (canonical text or JSON object) or a list
/// of voxels.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationBody {
    Lf { lf: serde_json::Value },
    Voxels { voxels: Vec<[i32; 3]> },
}

impl AnnotationBody {
    fn into_annotation(self) -> Result<Annotation, AnnotationError> {
        match self {
            AnnotationBody::Lf { lf } => {
                let parsed = match &lf {
                    serde_json::Value::String(text) => LogicalForm::from_canonical(text),
                    other => parse_lf_json(&other.to_string()),
                };
                parsed.map(Annotation::Nlu).map_err(|e| AnnotationError::InvalidAnnotation(e.to_string()))
            }
            AnnotationBody::Voxels { voxels } => Ok(Annotation::Vision(voxels.into_iter().map(|[x, y, z]| Pos::new(x, y, z)).collect::<SegMask>())),
        }
    }
}

async fn submit_annotation(State(app): State<AppState>, Path(task_id): Path<u64>, Json(body): Json<AnnotationBody>) -> Result<Json<serde_json::Value>, ApiError> {
    let annotation = body.into_annotation()?;
    let mut data = app.0.data.lock().unwrap();
    let done = data.queue.submit(task_id, annotation)?.clone();
    if let (Some(idx), ErrorKind::Nlu, Some(Annotation::Nlu(lf))) = (done.record, done.kind, &done.annotation) {
        let rec = &mut data.records[idx];
        rec.annotation = Some(lf.clone());
        rec.valid = Some(true);
    }
    Ok(Json(json!({ "task_id": task_id, "accepted": true })))
}

async fn funnel(State(app): State<AppState>) -> Json<FunnelStats> {
    Json(funnel_stats(&app.0.data.lock().unwrap().records))
}

async fn registry(State(app): State<AppState>, Path(n): Path<u32>) -> Result<Json<Manifest>, ApiError> {
    app.0.registry.manifest(n).cloned().map(Json).ok_or(ApiError::UnknownTranche(n))
}
