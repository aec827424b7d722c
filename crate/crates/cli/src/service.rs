//! HTTP annotation service. Annotators receive flagged captions either with the
//! flagged tokens marked (`tldr`) or with a single "contains errors" bit
//! (`binary`), fix them, and report how long the fix took.
//!
//! Bodies are JSON. `results.jsonl` starts with the header line
//! `{"format":"tldr-annotations","version":1}` followed by one [`StoredResult`]
//! per line; it is only ever appended to.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tldr_core::correct::flag_responses;
use tldr_core::language::vocab::TokenSequence;
use tldr_core::model::infer::DEFAULT_THRESHOLD;
use tldr_core::model::Checkpoint;
use tldr_core::perturb::Task;
use tldr_core::records;
use tldr_core::scene::{Scene, SceneObject};

use crate::commands::CorpusDir;

pub const RESULTS_FORMAT: &str = "tldr-annotations";
pub const RESULTS_VERSION: u32 = 1;
pub const DATA_DIR_ENV: &str = "TLDR_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Tldr,
    Binary,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 2] = [GuidanceMode::Tldr, GuidanceMode::Binary];

    /// Mode of the `n`-th assignment to one annotator.
    pub fn for_assignment(n: usize) -> Self {
        Self::ALL[n % 2]
    }
}

/// Files the service reads and appends to.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub results: PathBuf,
}

impl DataPaths {
    /// `corpus/`, `rm.ckpt` and `results.jsonl` under one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self { corpus: dir.join("corpus"), checkpoint: dir.join("rm.ckpt"), results: dir.join("results.jsonl") }
    }
}

/// A caption awaiting correction.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: u64,
    pub scene_id: u64,
    pub caption: Vec<u32>,
    pub flags: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFlag {
    pub index: usize,
    pub word: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u64,
    pub annotator: String,
    pub guidance_mode: GuidanceMode,
    /// Position of this task in the annotator's assignment sequence.
    pub assignment: usize,
    pub scene: ScenePayload,
    pub caption: String,
    pub tokens: Vec<String>,
    pub flagged: bool,
    /// Present in `tldr` mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<TokenFlag>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPayload {
    pub row: usize,
    pub col: usize,
    pub object: Option<ObjectPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPayload {
    pub label: String,
    #[serde(flatten)]
    pub object: SceneObject,
}

/// Scene as a row-major grid of cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePayload {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Vec<CellPayload>>,
}

impl ScenePayload {
    pub fn render(scene: &Scene) -> Self {
        let cells = (0..scene.height)
            .map(|row| {
                (0..scene.width)
                    .map(|col| {
                        let object = scene.objects.iter().find(|o| o.cell.row == row && o.cell.col == col).map(|o| ObjectPayload {
                            label: object_label(o),
                            object: o.clone(),
                        });
                        CellPayload { row, col, object }
                    })
                    .collect()
            })
            .collect();
        Self { id: scene.id, width: scene.width, height: scene.height, cells }
    }
}

fn object_label(o: &SceneObject) -> String {
    let mut parts = vec![o.color.to_string()];
    if let Some(m) = o.material {
        parts.push(m.to_string());
    }
    parts.push(o.category.to_string());
    let mut label = parts.join(" ");
    if let Some(t) = o.text {
        label.push_str(&format!(" \"{t}\""));
    }
    label
}

/// Body of `POST /api/results`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultSubmission {
    pub task_id: u64,
    pub annotator: String,
    pub corrected_caption: String,
    pub elapsed_ms: f64,
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResult {
    pub task_id: u64,
    pub annotator: String,
    pub guidance_mode: GuidanceMode,
    pub corrected_caption: String,
    pub elapsed_ms: f64,
    /// Server clock, milliseconds since the Unix epoch.
    pub submitted_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub guidance_mode: GuidanceMode,
    pub count: usize,
    pub mean_elapsed_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub annotator: String,
    pub groups: Vec<GroupStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub groups: Vec<GroupStats>,
    pub annotators: Vec<AnnotatorStats>,
}

fn group_stats<'a>(results: impl Iterator<Item = &'a StoredResult> + Clone) -> Vec<GroupStats> {
    GuidanceMode::ALL
        .iter()
        .map(|&mode| {
            let elapsed: Vec<f64> = results.clone().filter(|r| r.guidance_mode == mode).map(|r| r.elapsed_ms).collect();
            let mean = (!elapsed.is_empty()).then(|| elapsed.iter().sum::<f64>() / elapsed.len() as f64);
            GroupStats { guidance_mode: mode, count: elapsed.len(), mean_elapsed_ms: mean }
        })
        .collect()
}

#[derive(Debug, Default)]
struct AnnotatorState {
    /// task id -> mode, in assignment order.
    assigned: Vec<(u64, GuidanceMode)>,
    submitted: BTreeMap<u64, usize>,
}

impl AnnotatorState {
    fn mode_of(&self, task: u64) -> Option<GuidanceMode> {
        self.assigned.iter().find(|(t, _)| *t == task).map(|&(_, m)| m)
    }

    fn outstanding(&self) -> Option<(usize, u64, GuidanceMode)> {
        self.assigned.iter().enumerate().find(|(_, (t, _))| !self.submitted.contains_key(t)).map(|(i, &(t, m))| (i, t, m))
    }
}

struct Inner {
    annotators: HashMap<String, AnnotatorState>,
    results: Vec<StoredResult>,
    log: File,
}

pub struct AppState {
    tasks: Vec<TaskSpec>,
    task_index: HashMap<u64, usize>,
    scenes: HashMap<u64, Scene>,
    inner: RwLock<Inner>,
}

impl AppState {
    /// Flag the held-out captions of the corpus with the reward model and
    /// reopen the results log.
    pub fn open(paths: &DataPaths) -> anyhow::Result<Arc<Self>> {
        let corpus = CorpusDir::open(&paths.corpus).map_err(|e| anyhow::anyhow!("{e}"))?;
        let rm = Checkpoint::load(&paths.checkpoint)?;
        let captions: Vec<_> = corpus.test.iter().filter(|s| s.task == Task::Caption).cloned().collect();
        let tasks = flag_responses(&rm, &captions, DEFAULT_THRESHOLD)?
            .into_iter()
            .map(|f| {
                let s = &captions[f.index];
                TaskSpec { id: s.id, scene_id: s.scene_id, caption: s.d.clone(), flags: f.flags.tokens }
            })
            .collect();
        Self::new(tasks, corpus.scenes, &paths.results)
    }

    pub fn new(tasks: Vec<TaskSpec>, scenes: Vec<Scene>, results: &Path) -> anyhow::Result<Arc<Self>> {
        let previous: Vec<StoredResult> = if results.exists() {
            records::read_records(BufReader::new(File::open(results)?), RESULTS_FORMAT, RESULTS_VERSION, "results file")?
        } else {
            let mut f = File::create(results)?;
            records::write_header(&mut f, RESULTS_FORMAT, RESULTS_VERSION)?;
            f.sync_all()?;
            Vec::new()
        };
        let mut annotators: HashMap<String, AnnotatorState> = HashMap::new();
        for r in &previous {
            let a = annotators.entry(r.annotator.clone()).or_default();
            a.submitted.insert(r.task_id, a.assigned.len());
            a.assigned.push((r.task_id, r.guidance_mode));
        }
        let log = OpenOptions::new().append(true).open(results)?;
        let task_index = tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        let scenes = scenes.into_iter().map(|s| (s.id, s)).collect();
        Ok(Arc::new(Self { tasks, task_index, scenes, inner: RwLock::new(Inner { annotators, results: previous, log }) }))
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn payload(&self, spec: &TaskSpec, annotator: &str, assignment: usize, mode: GuidanceMode) -> Result<AnnotationTask, ApiError> {
        let scene = self.scenes.get(&spec.scene_id).ok_or_else(|| ApiError::internal(format!("scene {} missing from corpus", spec.scene_id)))?;
        let seq = TokenSequence::from_ids(spec.caption.clone());
        let tokens: Vec<String> = seq.words().into_iter().map(str::to_string).collect();
        let flags = (mode == GuidanceMode::Tldr).then(|| spec.flags.iter().map(|&i| TokenFlag { index: i, word: tokens[i].clone() }).collect());
        Ok(AnnotationTask {
            task_id: spec.id,
            annotator: annotator.to_string(),
            guidance_mode: mode,
            assignment,
            scene: ScenePayload::render(scene),
            caption: seq.text,
            tokens,
            flagged: !spec.flags.is_empty(),
            flags,
        })
    }

    /// The annotator's unsubmitted task if there is one, else a new assignment.
    pub fn next_task(&self, annotator: &str) -> Result<AnnotationTask, ApiError> {
        let mut inner = self.inner.write().map_err(|_| ApiError::poisoned())?;
        let state = inner.annotators.entry(annotator.to_string()).or_default();
        let (assignment, task, mode) = match state.outstanding() {
            Some(o) => o,
            None => {
                let fresh = self.tasks.iter().find(|t| state.mode_of(t.id).is_none()).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no tasks remaining"))?;
                let n = state.assigned.len();
                let mode = GuidanceMode::for_assignment(n);
                state.assigned.push((fresh.id, mode));
                (n, fresh.id, mode)
            }
        };
        drop(inner);
        self.payload(&self.tasks[self.task_index[&task]], annotator, assignment, mode)
    }

    pub fn scene(&self, id: u64) -> Result<ScenePayload, ApiError> {
        self.scenes.get(&id).map(ScenePayload::render).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scene {id}")))
    }

    /// Validate, persist and acknowledge one result.
    pub fn submit(&self, body: &[u8]) -> Result<StoredResult, ApiError> {
        let sub: ResultSubmission = serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed result: {e}")))?;
        if !(sub.elapsed_ms.is_finite() && sub.elapsed_ms > 0.0) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "elapsed_ms must be positive"));
        }
        if sub.annotator.is_empty() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "annotator must be non-empty"));
        }
        if !self.task_index.contains_key(&sub.task_id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {}", sub.task_id)));
        }
        let mut inner = self.inner.write().map_err(|_| ApiError::poisoned())?;
        let Inner { annotators, results, log } = &mut *inner;
        let state = annotators.get_mut(&sub.annotator);
        let Some(mode) = state.as_ref().and_then(|s| s.mode_of(sub.task_id)) else {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("task {} was not assigned to {}", sub.task_id, sub.annotator)));
        };
        let state = state.expect("assigned annotator has state");
        if state.submitted.contains_key(&sub.task_id) {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("task {} already submitted by {}", sub.task_id, sub.annotator)));
        }
        let submitted_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let stored = StoredResult {
            task_id: sub.task_id,
            annotator: sub.annotator,
            guidance_mode: mode,
            corrected_caption: sub.corrected_caption,
            elapsed_ms: sub.elapsed_ms,
            submitted_at,
        };
        let mut line = serde_json::to_vec(&stored).map_err(|e| ApiError::internal(e.to_string()))?;
        line.push(b'\n');
        log.write_all(&line).and_then(|_| log.sync_data()).map_err(|e| ApiError::internal(format!("results store: {e}")))?;
        let order = state.assigned.iter().position(|(t, _)| *t == stored.task_id).unwrap_or(0);
        state.submitted.insert(stored.task_id, order);
        results.push(stored.clone());
        Ok(stored)
    }

    pub fn stats(&self) -> Result<Stats, ApiError> {
        let inner = self.inner.read().map_err(|_| ApiError::poisoned())?;
        let mut names: Vec<&String> = inner.results.iter().map(|r| &r.annotator).collect();
        names.sort();
        names.dedup();
        let annotators = names
            .into_iter()
            .map(|a| AnnotatorStats { annotator: a.clone(), groups: group_stats(inner.results.iter().filter(move |r| &r.annotator == a)) })
            .collect();
        Ok(Stats { groups: group_stats(inner.results.iter()), annotators })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn internal(message: String) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn poisoned() -> Self {
        Self::internal("state lock poisoned".into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Json<AnnotationTask>, ApiError> {
    if q.annotator.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "annotator must be non-empty"));
    }
    state.next_task(&q.annotator).map(Json)
}

async fn scene(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Result<Json<ScenePayload>, ApiError> {
    state.scene(id).map(Json)
}

async fn submit(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<StoredResult>), ApiError> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || state.submit(&body))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(|r| (StatusCode::CREATED, Json(r)))
}

async fn stats(State(state): State<Arc<AppState>>) -> Result<Json<Stats>, ApiError> {
    state.stats().map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/scene/{id}", get(scene))
        .route("/api/results", post(submit))
        .route("/api/stats", get(stats))
        .with_state(state)
}
