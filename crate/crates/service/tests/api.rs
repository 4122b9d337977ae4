use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use craftloop::dsl::examples;
use craftloop::pipeline::{DatasetRegistry, LoopConfig, LoopState};
use craftloop::worker::{WorkerProfile, WorkerRegistry};
use craftloop_service::{router, AppState, ServiceConfig};

fn app(config: ServiceConfig) -> Router {
    let loop_config = LoopConfig { tranche0_size: 400, ..LoopConfig::default() };
    let registry = LoopState::bootstrap(&loop_config, Vec::new(), DatasetRegistry::in_memory()).unwrap().registry;
    let mut workers = WorkerRegistry::default();
    workers.add(WorkerProfile::honest("alice", 1), true);
    workers.add(WorkerProfile::honest("bob", 2), true);
    workers.add(WorkerProfile::honest("carol", 3), false);
    workers.add(WorkerProfile::honest("dave", 4), true);
    workers.entries.get_mut("dave").unwrap().blacklisted = true;
    router(AppState::new(config, registry, workers, None, None).unwrap())
}

fn fast() -> ServiceConfig {
    ServiceConfig { tick_interval: Duration::from_millis(1), ticks_per_step: 50, received_clear: Duration::from_millis(30), ..ServiceConfig::default() }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn session(app: &Router, worker: &str) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({ "worker_id": worker }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

/// Reads server-sent events off a response body.
struct Frames {
    body: Body,
    buf: String,
}

#[derive(Debug)]
struct Frame {
    id: u64,
    kind: String,
    data: Value,
    at: Instant,
}

impl Frames {
    async fn open(app: &Router, uri: &str) -> Frames {
        let req = Request::builder().uri(uri).body(Body::empty()).unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        Frames { body: resp.into_body(), buf: String::new() }
    }

    async fn next(&mut self) -> Frame {
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..end + 2).collect();
                let (mut id, mut kind, mut data) = (None, String::new(), String::new());
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("id: ") {
                        id = v.parse().ok();
                    } else if let Some(v) = line.strip_prefix("event: ") {
                        kind = v.to_string();
                    } else if let Some(v) = line.strip_prefix("data: ") {
                        data += v;
                    }
                }
                if let Some(id) = id {
                    return Frame { id, kind, data: serde_json::from_str(&data).unwrap(), at: Instant::now() };
                }
                continue;
            }
            let frame = tokio::time::timeout(Duration::from_secs(10), self.body.frame()).await.expect("event within 10s").unwrap().unwrap();
            if let Ok(bytes) = frame.into_data() {
                self.buf += std::str::from_utf8(&bytes).unwrap();
            }
        }
    }

    /// Frames up to and including the first of type `kind`.
    async fn until(&mut self, kind: &str) -> Vec<Frame> {
        let mut out = Vec::new();
        loop {
            let f = self.next().await;
            let done = f.kind == kind;
            out.push(f);
            if done {
                return out;
            }
        }
    }
}

#[tokio::test]
async fn only_qualified_workers_start_sessions() {
    let app = app(fast());
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "worker_id": "alice" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["phase"], "idle");
    for (worker, code) in [("carol", "unqualified"), ("dave", "blacklisted"), ("nobody", "unqualified")] {
        let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "worker_id": worker }))).await;
        assert_eq!(status, StatusCode::FORBIDDEN);
        assert_eq!(body["error"], code);
    }
    let (status, _) = call(&app, "GET", "/sessions/s999999/score", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn a_command_streams_four_statuses_then_a_question() {
    let config = ServiceConfig { received_clear: Duration::from_millis(500), ..fast() };
    let app = app(config);
    let id = session(&app, "alice").await;
    let mut frames = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    let first = frames.next().await;
    assert_eq!(first.kind, "snapshot");

    let sent = Instant::now();
    let (status, ack) = call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "build a cube" }))).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    let mut seen = frames.until("routing").await;
    let statuses: Vec<&str> = seen.iter().filter(|f| f.kind == "status").map(|f| f.data["phase"].as_str().unwrap()).collect();
    assert_eq!(statuses, ["sending", "received", "thinking", "doing"]);
    let messages: Vec<&str> = seen.iter().filter(|f| f.kind == "status").map(|f| f.data["message"].as_str().unwrap()).collect();
    assert_eq!(messages, ["sending command", "command received", "assistant thinking", "assistant is doing the task"]);
    assert_eq!(seen.last().unwrap().data["question"], "did_what_asked");

    // No new command until routing is answered.
    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "build a cube" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "routing_pending");

    // "command received" is cleared by the server half a second later.
    while !seen.iter().any(|f| f.kind == "status_clear" && f.data["phase"] == "received") {
        seen.push(frames.next().await);
    }
    let cleared = seen.iter().find(|f| f.kind == "status_clear" && f.data["phase"] == "received").unwrap();
    assert!(cleared.at.duration_since(sent) >= Duration::from_millis(500));

    let ids: Vec<u64> = seen.iter().map(|f| f.id).collect();
    assert!(ids.windows(2).all(|w| w[1] > w[0]), "events arrive in order");

    let (status, reply) = call(&app, "POST", &format!("/sessions/{id}/routing"), Some(json!({ "yes": true }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["routing"], json!({ "state": "done", "value": "no_error" }));
    assert_eq!(reply["task_id"], Value::Null);
    let score = frames.until("score").await;
    assert_eq!(score.last().unwrap().data["score"]["n_commands"], 1);

    let (status, view) = call(&app, "GET", &format!("/sessions/{id}/score"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["score"]["n_commands"], 1);
    assert_eq!(view["gate"]["allowed"], false);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/routing"), Some(json!({ "yes": true }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "   " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn late_subscribers_start_from_a_snapshot() {
    let app = app(fast());
    let id = session(&app, "alice").await;
    let mut early = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    let initial = early.next().await;
    call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "build a cube" }))).await;
    let seen = early.until("routing").await;
    assert!(seen.iter().any(|f| f.kind == "agent"), "the build streams agent events");

    let mut late = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    let snap = late.next().await;
    assert_eq!(snap.kind, "snapshot");
    assert!(snap.id >= seen.last().unwrap().id);
    let blocks = |f: &Frame| f.data["world"]["blocks"].as_array().unwrap().len();
    assert!(blocks(&snap) > blocks(&initial), "the snapshot shows the built cube");

    // Replaying from a sequence number skips the snapshot.
    let mut replay = Frames::open(&app, &format!("/sessions/{id}/events?since=1")).await;
    let f = replay.next().await;
    assert_eq!((f.id, f.kind.as_str()), (1, "status"));
}

#[tokio::test]
async fn stop_is_accepted_while_a_task_runs() {
    let config = ServiceConfig { tick_interval: Duration::from_millis(20), ticks_per_step: 1, ..fast() };
    let app = app(config);
    let id = session(&app, "alice").await;
    let mut frames = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    let (_, ack) = call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "build a cube" }))).await;
    assert_eq!(ack["phase"], "doing");
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "stop" }))).await;
    assert_eq!(status, StatusCode::OK);
    let seen = frames.until("routing").await;
    assert_eq!(seen.iter().filter(|f| f.kind == "status").count(), 4);
}

#[tokio::test]
async fn errors_open_annotation_tasks_that_feed_the_funnel() {
    let app = app(fast());
    let id = session(&app, "alice").await;
    let mut frames = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "build a box" }))).await;
    frames.until("routing").await;
    call(&app, "POST", &format!("/sessions/{id}/routing"), Some(json!({ "yes": false }))).await;
    let (_, reply) = call(&app, "POST", &format!("/sessions/{id}/routing"), Some(json!({ "yes": false }))).await;
    assert_eq!(reply["routing"], json!({ "state": "done", "value": "nlu_error" }));
    let task = reply["task_id"].as_u64().expect("an NLU error opens a task");

    // A span beyond the end of "build a box" is rejected.
    let bad = examples::move_left_of_cube().canonical();
    let (status, body) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "lf": bad }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "invalid_annotation");
    let (status, _) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "voxels": [[1, 1, 1]] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let good = examples::build_a_box().canonical();
    let (status, _) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "lf": good }))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "lf": good }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, funnel) = call(&app, "GET", "/admin/funnel", None).await;
    assert_eq!(funnel["all"], 1, "{funnel}");
    assert_eq!(funnel["marked_nlu"], 1, "{funnel}");
    assert_eq!(funnel["marked_nlu_annotated"], 1, "{funnel}");
}

#[tokio::test]
async fn vision_errors_take_voxel_annotations() {
    let app = app(fast());
    let id = session(&app, "bob").await;
    let mut frames = Frames::open(&app, &format!("/sessions/{id}/events")).await;
    let snapshot = frames.next().await;
    call(&app, "POST", &format!("/sessions/{id}/command"), Some(json!({ "text": "destroy the cube" }))).await;
    frames.until("routing").await;
    let mut reply = Value::Null;
    for yes in [false, true, false] {
        reply = call(&app, "POST", &format!("/sessions/{id}/routing"), Some(json!({ "yes": yes }))).await.1;
    }
    assert_eq!(reply["routing"], json!({ "state": "done", "value": "vision_error" }));
    let task = reply["task_id"].as_u64().unwrap();
    let (status, _) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "voxels": [[0, 99, 0]] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let block = &snapshot.data["world"]["blocks"][0];
    let voxel = json!([[block[0], block[1], block[2]]]);
    let (status, body) = call(&app, "POST", &format!("/annotations/{task}"), Some(json!({ "voxels": voxel }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
}

#[tokio::test]
async fn registry_manifests_are_served() {
    let app = app(fast());
    let (status, m) = call(&app, "GET", "/admin/registry/0", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m["n"], 0);
    assert!(m["nlu"][0].as_u64().unwrap() > 0);
    let (status, body) = call(&app, "GET", "/admin/registry/3", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_tranche");
}

#[tokio::test]
async fn sessions_do_not_share_worlds() {
    let app = app(fast());
    let a = session(&app, "alice").await;
    let b = session(&app, "bob").await;
    let mut fb = Frames::open(&app, &format!("/sessions/{b}/events")).await;
    let before = fb.next().await;
    let mut fa = Frames::open(&app, &format!("/sessions/{a}/events")).await;
    fa.next().await;
    call(&app, "POST", &format!("/sessions/{a}/command"), Some(json!({ "text": "build a cube" }))).await;
    fa.until("routing").await;
    call(&app, "POST", &format!("/sessions/{a}/routing"), Some(json!({ "yes": true }))).await;

    let after = Frames::open(&app, &format!("/sessions/{b}/events")).await.next().await;
    assert_eq!(after.data["world"], before.data["world"]);
    let (_, sb) = call(&app, "GET", &format!("/sessions/{b}/score"), None).await;
    assert_eq!(sb["score"]["n_commands"], 0);
}
