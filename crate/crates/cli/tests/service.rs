use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tempfile::TempDir;
use tldr_cli::service::{router, AppState, DataPaths, TaskSpec};
use tldr_core::model::{Checkpoint, ModelConfig};
use tldr_core::perturb::{build_corpus, write_corpus, CorpusConfig, Task};
use tower::ServiceExt;

fn fixture(results: &Path) -> Arc<AppState> {
    let corpus = build_corpus(&CorpusConfig { scenes: 12, ..CorpusConfig::default() }, 9).unwrap();
    let tasks: Vec<TaskSpec> = corpus
        .test
        .iter()
        .chain(&corpus.train)
        .filter(|s| s.task == Task::Caption)
        .take(6)
        .map(|s| TaskSpec { id: s.id, scene_id: s.scene_id, caption: s.d.clone(), flags: vec![0, 2] })
        .collect();
    AppState::new(tasks, corpus.scenes, results).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn raw_post(app: &Router, uri: &str, body: &str) -> StatusCode {
    let req = Request::builder().method("POST").uri(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

fn result(task: &Value, annotator: &str, elapsed: f64) -> Value {
    json!({ "task_id": task["task_id"], "annotator": annotator, "corrected_caption": "a cat .", "elapsed_ms": elapsed })
}

fn group<'a>(stats: &'a Value, mode: &str) -> &'a Value {
    stats["groups"].as_array().unwrap().iter().find(|g| g["guidance_mode"] == mode).unwrap()
}

#[tokio::test]
async fn fresh_store_reports_empty_groups() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let (status, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    for mode in ["tldr", "binary"] {
        assert_eq!(group(&stats, mode)["count"], 0);
        assert!(group(&stats, mode)["mean_elapsed_ms"].is_null());
    }
    assert_eq!(stats["annotators"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn assignment_alternates_and_is_balanced() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let mut modes = Vec::new();
    for _ in 0..6 {
        let (status, task) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
        assert_eq!(status, StatusCode::OK);
        let (again_status, again) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
        assert_eq!(again_status, StatusCode::OK);
        assert_eq!(task, again, "unsubmitted task is served again");
        modes.push(task["guidance_mode"].as_str().unwrap().to_string());
        let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "ann", 1500.0))).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    assert_eq!(modes, ["tldr", "binary", "tldr", "binary", "tldr", "binary"]);
    let (status, _) = call(&app, "GET", "/api/tasks/next?annotator=ann", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(group(&stats, "tldr")["count"], 3);
    assert_eq!(group(&stats, "binary")["count"], 3);
    let (_, other) = call(&app, "GET", "/api/tasks/next?annotator=other", None).await;
    assert_eq!(other["guidance_mode"], "tldr");
    assert_eq!(other["assignment"], 0);
}

#[tokio::test]
async fn task_payloads_follow_the_guidance_mode() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let (_, tldr) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    let tokens = tldr["tokens"].as_array().unwrap();
    let flags = tldr["flags"].as_array().unwrap();
    assert_eq!(flags.len(), 2);
    for f in flags {
        let i = f["index"].as_u64().unwrap() as usize;
        assert!(i < tokens.len());
        assert_eq!(f["word"], tokens[i]);
    }
    assert_eq!(tldr["flagged"], true);
    let scene = &tldr["scene"];
    assert_eq!(scene["cells"].as_array().unwrap().len(), scene["height"].as_u64().unwrap() as usize);
    call(&app, "POST", "/api/results", Some(result(&tldr, "a", 10.0))).await;
    let (_, binary) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    assert_eq!(binary["guidance_mode"], "binary");
    assert_eq!(binary["flagged"], true);
    assert!(binary.get("flags").is_none());
}

#[tokio::test]
async fn results_are_validated() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let (_, task) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    assert_eq!(raw_post(&app, "/api/results", "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, "/api/results", "{\"task_id\": 1}").await, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "a", 0.0))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "a", -3.0))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&json!({"task_id": 987654321u64}), "a", 5.0))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "never-assigned", 5.0))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, stored) = call(&app, "POST", "/api/results", Some(result(&task, "a", 5.0))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(stored["guidance_mode"], "tldr");
    assert!(stored["submitted_at"].as_u64().unwrap() > 0);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "a", 5.0))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(group(&stats, "tldr")["count"], 1);
    assert_eq!(group(&stats, "tldr")["mean_elapsed_ms"], 5.0);
}

#[tokio::test]
async fn stats_count_increments_in_the_matching_group() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let mut expected = [0u64; 2];
    for (i, annotator) in ["x", "y", "x", "x", "y"].iter().enumerate() {
        let (_, task) = call(&app, "GET", &format!("/api/tasks/next?annotator={annotator}"), None).await;
        let (_, before) = call(&app, "GET", "/api/stats", None).await;
        let mode = task["guidance_mode"].as_str().unwrap().to_string();
        call(&app, "POST", "/api/results", Some(result(&task, annotator, 100.0 * (i + 1) as f64))).await;
        let (_, after) = call(&app, "GET", "/api/stats", None).await;
        let count = |s: &Value| group(s, &mode)["count"].as_u64().unwrap();
        assert_eq!(count(&after), count(&before) + 1);
        expected[usize::from(mode == "binary")] += 1;
    }
    let (_, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(group(&stats, "tldr")["count"], expected[0]);
    assert_eq!(group(&stats, "binary")["count"], expected[1]);
    let x = stats["annotators"].as_array().unwrap().iter().find(|a| a["annotator"] == "x").unwrap();
    let x_tldr = x["groups"].as_array().unwrap().iter().find(|g| g["guidance_mode"] == "tldr").unwrap();
    // x submitted at 100 ms (tldr), 300 ms (binary) and 400 ms (tldr).
    assert_eq!(x_tldr["count"], 2);
    assert_eq!(x_tldr["mean_elapsed_ms"], 250.0);
}

#[tokio::test]
async fn results_survive_a_restart() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("results.jsonl");
    let app = router(fixture(&path));
    let (_, task) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    call(&app, "POST", "/api/results", Some(result(&task, "a", 42.0))).await;
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("{\"format\":\"tldr-annotations\",\"version\":1}\n"));
    assert_eq!(text.lines().count(), 2);

    let app = router(fixture(&path));
    let (_, stats) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(group(&stats, "tldr")["count"], 1);
    let (s, _) = call(&app, "POST", "/api/results", Some(result(&task, "a", 42.0))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, next) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    assert_eq!(next["guidance_mode"], "binary");
    assert_ne!(next["task_id"], task["task_id"]);
}

#[tokio::test]
async fn scene_endpoint_renders_a_grid() {
    let tmp = TempDir::new().unwrap();
    let app = router(fixture(&tmp.path().join("results.jsonl")));
    let (_, task) = call(&app, "GET", "/api/tasks/next?annotator=a", None).await;
    let id = task["scene"]["id"].as_u64().unwrap();
    let (status, scene) = call(&app, "GET", &format!("/api/scene/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(scene, task["scene"]);
    let cells: Vec<&Value> = scene["cells"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).collect();
    assert_eq!(cells.len() as u64, scene["width"].as_u64().unwrap() * scene["height"].as_u64().unwrap());
    assert!(cells.iter().any(|c| c["object"]["label"].is_string()));
    let (status, _) = call(&app, "GET", "/api/scene/99999999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/scene/abc", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn service_opens_a_data_directory() {
    let tmp = TempDir::new().unwrap();
    let paths = DataPaths::in_dir(tmp.path());
    let corpus = build_corpus(&CorpusConfig { scenes: 10, ..CorpusConfig::default() }, 1).unwrap();
    write_corpus(&paths.corpus, &corpus).unwrap();
    let before = fs::read(paths.corpus.join("test.jsonl")).unwrap();
    let mut ckpt = Checkpoint::init(ModelConfig::default(), 0).unwrap();
    // A strongly negative reward bias flags every token.
    ckpt.weights.reward_b.fill(-10.0);
    ckpt.save(&paths.checkpoint).unwrap();
    let state = AppState::open(&paths).unwrap();
    let captions = corpus.test.iter().filter(|s| s.task == Task::Caption).count();
    assert_eq!(state.task_count(), captions);
    assert!(paths.results.exists());
    assert_eq!(fs::read(paths.corpus.join("test.jsonl")).unwrap(), before);
}
