use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use produqd::ideation::{events_of, IdeationRun};
use produqd::store::{parse_tree_csv, RunStore};
use produqd_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(root: &Path) -> Router {
    router(Arc::new(AppState::new(ServiceConfig::new(root)).unwrap()))
}

/// Small enough that an iteration takes a second or two.
fn quick_overrides() -> Value {
    json!({
        "initial_samples": 20,
        "sample_budget": 10,
        "sail": { "batch_size": 5, "qd": { "generations": 24, "children_per_generation": 16 } },
        "tsne": { "iterations": 250 },
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn create(app: &Router, seed: u64) -> String {
    let (status, v) = call_json(
        app,
        "POST",
        "/runs",
        Some(json!({ "api_version": 1, "domain": "airfoil2d", "seed": seed, "overrides": quick_overrides() })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["run_id"].as_str().unwrap().to_string()
}

/// Polls until the run is neither initializing nor running.
async fn settle(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, v) = call_json(app, "GET", &format!("/runs/{id}/progress"), None).await;
        assert_eq!(status, StatusCode::OK);
        let state = v["state"].as_str().unwrap();
        if state != "initializing" && state != "running" {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "run {id} never settled");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn document(app: &Router, id: &str) -> IdeationRun {
    let (status, bytes) = call(app, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn create_validates_domain_and_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 1).await;
    assert_eq!(settle(&app, &id).await["state"], "ready");
    let run = document(&app, &id).await;
    assert_eq!(run.archive.len() + run.invalid.len(), 20);
    assert_eq!(run.config.sail.ucb.kappa, 2.0);

    let (status, v) = call_json(&app, "POST", "/runs", Some(json!({ "domain": "nope" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "not_found");

    let bad = [
        json!({ "domain": "airfoil2d", "api_version": 9 }),
        json!({ "domain": "airfoil2d", "surprise": true }),
        json!({ "domain": "airfoil2d", "overrides": { "sample_budget": 7 } }),
        json!({ "domain": "airfoil2d", "overrides": { "domain": "toy1d" } }),
        json!({ "domain": "airfoil2d", "overrides": { "initial_samples": "many" } }),
    ];
    for body in bad {
        let (status, v) = call_json(&app, "POST", "/runs", Some(body.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body} -> {v}");
    }

    let (status, _) = call_json(&app, "GET", "/runs/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&app, "GET", "/runs/..%2Fx/progress", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = call_json(&app, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["runs"].as_array().unwrap().len(), 1);
    assert_eq!(v["runs"][0]["run_id"], id.as_str());
}

#[tokio::test(flavor = "multi_thread")]
async fn idempotency_key_returns_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let body = json!({ "domain": "airfoil2d", "overrides": quick_overrides(), "idempotency_key": "abc" });
    let (_, first) = call_json(&app, "POST", "/runs", Some(body.clone())).await;
    let (_, second) = call_json(&app, "POST", "/runs", Some(body)).await;
    assert_eq!(first["run_id"], second["run_id"]);
    assert_eq!(first["created"], true);
    assert_eq!(second["created"], false);

    let req = || {
        Request::builder()
            .method("POST")
            .uri("/runs")
            .header("idempotency-key", "header-key")
            .body(Body::from(json!({ "domain": "airfoil2d", "overrides": quick_overrides() }).to_string()))
            .unwrap()
    };
    let a: Value = serde_json::from_slice(&app.clone().oneshot(req()).await.unwrap().into_body().collect().await.unwrap().to_bytes()).unwrap();
    let b: Value = serde_json::from_slice(&app.clone().oneshot(req()).await.unwrap().into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(a["run_id"], b["run_id"]);
    assert_ne!(a["run_id"], first["run_id"]);

    let (_, list) = call_json(&app, "GET", "/runs", None).await;
    assert_eq!(list["runs"].as_array().unwrap().len(), 2);
    for id in [&first["run_id"], &a["run_id"]] {
        settle(&app, id.as_str().unwrap()).await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn state_machine_rejects_illegal_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 2).await;
    settle(&app, &id).await;
    let doc_path = dir.path().join(&id).join("run.json");

    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "nothing to select before iteration 1");

    let (status, v) = call_json(&app, "POST", &format!("/runs/{id}/advance"), Some(json!({ "sample_budget": 7 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let before = std::fs::read(&doc_path).unwrap();
    let (status, v) = call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["iteration"], 1);
    assert_eq!(v["sample_budget"], 10);

    // The iteration is in flight: both mutations conflict and the store is untouched.
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(std::fs::read(&doc_path).unwrap(), before);

    let progress = settle(&app, &id).await;
    assert_eq!(progress["state"], "awaiting_selection");
    assert_eq!(progress["completed_iterations"], 1);
    assert!(progress["last_error"].is_null());

    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "advance while awaiting selection");
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "empty selection");
    let run = document(&app, &id).await;
    let k = run.iterations[0].class_count();
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [k] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "unknown class");
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 2, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "future iteration");
    let stored = RunStore::open(dir.path()).unwrap().load(&id).unwrap();
    assert_eq!(stored, run, "rejected requests left the store alone");

    let (status, v) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["selection"], json!([0]));
    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::CONFLICT, "second selection on the same iteration");

    let (status, v) = call_json(&app, "POST", &format!("/runs/{id}/advance"), Some(json!({ "sample_budget": 5 }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["iteration"], 2);
    settle(&app, &id).await;

    let (status, _) = call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    assert_eq!(status, StatusCode::CONFLICT, "stale iteration");

    // Seeds of iteration 2 are the members of the selected class.
    let run = document(&app, &id).await;
    let first = &run.iterations[0];
    let members = first.partition.labels.iter().filter(|l| **l == 0).count();
    assert_eq!(first.prototypes[0].class_size, members);
    assert_eq!(run.iterations[1].seed_count, members);
    assert_eq!(run.iterations[1].sample_budget, 5);
    assert_eq!(run.iterations[1].seed_count, first.class_members(&first.selection).len());

    let store = RunStore::open(dir.path()).unwrap();
    assert_eq!(store.load(&id).unwrap(), run);
    assert_eq!(store.events(&id).unwrap(), events_of(&run));
}

#[tokio::test(flavor = "multi_thread")]
async fn exports_match_the_document() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3).await;
    settle(&app, &id).await;

    let (status, _) = call(&app, "GET", &format!("/runs/{id}/export?what=prediction_map&format=csv"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "no prediction map before iteration 1");

    call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    settle(&app, &id).await;
    call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
    call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    settle(&app, &id).await;
    let run = document(&app, &id).await;

    let rows = |bytes: &[u8]| {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().unwrap().clone();
        (header, r.records().count())
    };
    let (status, bytes) = call(&app, "GET", &format!("/runs/{id}/export?what=prediction_map&format=csv"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (header, n) = rows(&bytes);
    assert_eq!(&header[0], "bin_x");
    assert_eq!(n, run.iterations[1].prediction_map.occupied());
    let (_, bytes) = call(&app, "GET", &format!("/runs/{id}/export?what=prediction_map&format=csv&iteration=1"), None).await;
    assert_eq!(rows(&bytes).1, run.iterations[0].prediction_map.occupied());

    let (_, bytes) = call(&app, "GET", &format!("/runs/{id}/export?what=archive&format=csv"), None).await;
    assert_eq!(rows(&bytes).1, run.archive.len());
    let (_, bytes) = call(&app, "GET", &format!("/runs/{id}/export?what=archive&format=document"), None).await;
    let archive: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(archive.as_array().unwrap().len(), run.archive.len());

    let (_, bytes) = call(&app, "GET", &format!("/runs/{id}/export?what=tree&format=csv"), None).await;
    assert_eq!(parse_tree_csv(&bytes).unwrap(), run.tree);
    assert!(run.tree.iter().filter(|n| n.iteration == 2).all(|n| n.parent_id.is_some()));

    let (status, _) = call(&app, "GET", &format!("/runs/{id}/export?what=everything"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "GET", &format!("/runs/{id}/export?what=tree&format=xml"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_resumes_from_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let app = app(dir.path());
        let id = create(&app, 4).await;
        settle(&app, &id).await;
        call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
        settle(&app, &id).await;
        call_json(&app, "POST", &format!("/runs/{id}/select"), Some(json!({ "iteration": 1, "classes": [0] }))).await;
        id
    };

    // Simulate a crash between saving the document and logging the selection.
    let events = dir.path().join(&id).join("events.jsonl");
    let text = std::fs::read_to_string(&events).unwrap();
    let kept: Vec<&str> = text.lines().take(1).collect();
    std::fs::write(&events, format!("{}\n", kept.join("\n"))).unwrap();

    let app = app(dir.path());
    let (_, list) = call_json(&app, "GET", "/runs", None).await;
    assert_eq!(list["runs"][0]["state"], "ready");
    let run = document(&app, &id).await;
    assert_eq!(run.iterations[0].selection, vec![0]);
    let store = RunStore::open(dir.path()).unwrap();
    assert_eq!(store.events(&id).unwrap(), events_of(&run), "missing event restored");

    let (status, v) = call_json(&app, "POST", &format!("/runs/{id}/advance"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["iteration"], 2);
    settle(&app, &id).await;
    assert_eq!(document(&app, &id).await.iterations.len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn domains_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let (status, v) = call_json(&app(dir.path()), "GET", "/domains", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["api_version"], 1);
    let names: Vec<&str> = v["domains"].as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names, produqd::domains::builtin_names());
    assert_eq!(v["domains"][0]["bounds"]["lower"].as_array().unwrap().len(), 10);
}
