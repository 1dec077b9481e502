//! Human-pilot annotation: task bundles, score submission with audit trail,
//! unanimous-agreement aggregation and the HTTP service annotators use.
//!
//! Persistence is two append-only JSON-lines files in the store directory:
//! `tasks.jsonl` (one [`AnnotationTask`] per line) and `entries.jsonl` (every
//! submission in arrival order). The current view keeps the last submission
//! per (task, annotator, feature, property); earlier ones stay in the log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DocumentPair, FeatureKey, RationaleRecord};

/// Header carrying the annotator id on API calls.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PilotProperty {
    DetailConsistency,
    FactualCorrectness,
    LabelConsistency,
}

impl PilotProperty {
    pub const ALL: [PilotProperty; 3] = [
        PilotProperty::DetailConsistency,
        PilotProperty::FactualCorrectness,
        PilotProperty::LabelConsistency,
    ];

    pub fn short(self) -> &'static str {
        match self {
            PilotProperty::DetailConsistency => "P1",
            PilotProperty::FactualCorrectness => "P2",
            PilotProperty::LabelConsistency => "P3",
        }
    }
}

/// Four-point scale: 1, 0.5, 0 and -1 ("don't know").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PilotScore {
    Full,
    Partial,
    None,
    DontKnow,
}

impl PilotScore {
    pub fn value(self) -> f64 {
        match self {
            PilotScore::Full => 1.0,
            PilotScore::Partial => 0.5,
            PilotScore::None => 0.0,
            PilotScore::DontKnow => -1.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        [
            PilotScore::Full,
            PilotScore::Partial,
            PilotScore::None,
            PilotScore::DontKnow,
        ]
        .into_iter()
        .find(|s| s.value() == v)
    }

    pub fn requires_comment(self) -> bool {
        matches!(self, PilotScore::Partial | PilotScore::None)
    }
}

impl fmt::Display for PilotScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl Serialize for PilotScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PilotScore::Partial => s.serialize_f64(0.5),
            PilotScore::Full => s.serialize_i64(1),
            PilotScore::None => s.serialize_i64(0),
            PilotScore::DontKnow => s.serialize_i64(-1),
        }
    }
}

impl<'de> Deserialize<'de> for PilotScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        PilotScore::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("score {v} not in {{1, 0.5, 0, -1}}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub pair: DocumentPair,
    pub record: RationaleRecord,
    pub assigned_annotators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub task_id: String,
    pub annotator_id: String,
    pub feature: FeatureKey,
    pub property: PilotProperty,
    pub score: PilotScore,
    #[serde(default)]
    pub comment: String,
}

impl AnnotationEntry {
    fn key(&self) -> EntryKey {
        (
            self.task_id.clone(),
            self.annotator_id.clone(),
            self.feature,
            self.property,
        )
    }
}

type EntryKey = (String, String, FeatureKey, PilotProperty);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub feature: FeatureKey,
    pub property: PilotProperty,
    pub n_all_agree_conform: usize,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub cells: Vec<AgreementCell>,
    /// Tasks still missing at least one entry from an assigned annotator.
    pub incomplete_tasks: Vec<String>,
}

impl AgreementTable {
    pub fn cell(&self, feature: FeatureKey, property: PilotProperty) -> Option<&AgreementCell> {
        self.cells
            .iter()
            .find(|c| c.feature == feature && c.property == property)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ack {
    /// Position of this submission in the entry log.
    pub seq: usize,
    /// Number of submissions so far for this (task, annotator, feature, property).
    pub revision: usize,
    pub replaced: Option<PilotScore>,
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("duplicate task id {0:?}")]
    DuplicateTaskId(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("annotator {annotator:?} is not assigned to task {task:?}")]
    NotAssigned { task: String, annotator: String },
    #[error("a score of {0} requires a comment explaining what is wrong")]
    MissingComment(PilotScore),
    #[error("record for {record} does not belong to pair {pair}")]
    MismatchedRecord { pair: String, record: String },
    #[error("at least one annotator is required")]
    NoAnnotators,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file} line {line}: {detail}")]
    Corrupt {
        file: String,
        line: usize,
        detail: String,
    },
}

/// Task and entry state, optionally mirrored to a directory.
#[derive(Debug)]
pub struct AnnotationStore {
    dir: Option<PathBuf>,
    seed: u64,
    tasks: Vec<AnnotationTask>,
    task_index: HashMap<String, usize>,
    log: Vec<AnnotationEntry>,
    current: BTreeMap<EntryKey, usize>,
    revisions: HashMap<EntryKey, usize>,
}

const TASKS_FILE: &str = "tasks.jsonl";
const ENTRIES_FILE: &str = "entries.jsonl";

impl AnnotationStore {
    pub fn in_memory(seed: u64) -> Self {
        AnnotationStore {
            dir: None,
            seed,
            tasks: Vec::new(),
            task_index: HashMap::new(),
            log: Vec::new(),
            current: BTreeMap::new(),
            revisions: HashMap::new(),
        }
    }

    /// Opens (or creates) a store directory and replays its logs.
    pub fn open(dir: impl Into<PathBuf>, seed: u64) -> Result<Self, AnnotationError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut store = AnnotationStore::in_memory(seed);
        for task in read_lines::<AnnotationTask>(&dir.join(TASKS_FILE))? {
            store
                .task_index
                .insert(task.task_id.clone(), store.tasks.len());
            store.tasks.push(task);
        }
        for entry in read_lines::<AnnotationEntry>(&dir.join(ENTRIES_FILE))? {
            store.apply(entry);
        }
        store.dir = Some(dir);
        Ok(store)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    pub fn task(&self, id: &str) -> Option<&AnnotationTask> {
        self.task_index.get(id).map(|&i| &self.tasks[i])
    }

    /// Every submission in arrival order.
    pub fn audit_log(&self) -> &[AnnotationEntry] {
        &self.log
    }

    /// Latest submission per (task, annotator, feature, property).
    pub fn current_entries(&self) -> Vec<&AnnotationEntry> {
        self.current.values().map(|&i| &self.log[i]).collect()
    }

    /// Creates one task per (pair, record), each assigned to every listed
    /// annotator.
    pub fn create_task_bundle(
        &mut self,
        items: Vec<(DocumentPair, RationaleRecord)>,
        annotators: &[String],
    ) -> Result<Vec<AnnotationTask>, AnnotationError> {
        if annotators.is_empty() {
            return Err(AnnotationError::NoAnnotators);
        }
        let mut new_ids = HashSet::new();
        for (pair, record) in &items {
            if record.pair_id() != pair.pair_id {
                return Err(AnnotationError::MismatchedRecord {
                    pair: pair.pair_id.clone(),
                    record: record.pair_id().to_string(),
                });
            }
            if self.task_index.contains_key(&pair.pair_id) || !new_ids.insert(&pair.pair_id) {
                return Err(AnnotationError::DuplicateTaskId(pair.pair_id.clone()));
            }
        }
        let tasks: Vec<AnnotationTask> = items
            .into_iter()
            .map(|(pair, record)| AnnotationTask {
                task_id: pair.pair_id.clone(),
                pair,
                record,
                assigned_annotators: annotators.to_vec(),
            })
            .collect();
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(TASKS_FILE))?;
            for t in &tasks {
                writeln!(f, "{}", serde_json::to_string(t).expect("serializable"))?;
            }
            f.sync_data()?;
        }
        for t in &tasks {
            self.task_index.insert(t.task_id.clone(), self.tasks.len());
            self.tasks.push(t.clone());
        }
        Ok(tasks)
    }

    /// Tasks assigned to `annotator`, shuffled by a per-annotator stream
    /// derived from the store seed.
    pub fn serving_order(&self, annotator: &str) -> Vec<&AnnotationTask> {
        let mut assigned: Vec<&AnnotationTask> = self
            .tasks
            .iter()
            .filter(|t| t.assigned_annotators.iter().any(|a| a == annotator))
            .collect();
        let digest = Sha256::digest(annotator.as_bytes());
        let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
        assigned.shuffle(&mut rng);
        assigned
    }

    pub fn submit_annotation(&mut self, entry: AnnotationEntry) -> Result<Ack, AnnotationError> {
        let task = self
            .task(&entry.task_id)
            .ok_or_else(|| AnnotationError::UnknownTask(entry.task_id.clone()))?;
        if !task.assigned_annotators.contains(&entry.annotator_id) {
            return Err(AnnotationError::NotAssigned {
                task: entry.task_id.clone(),
                annotator: entry.annotator_id.clone(),
            });
        }
        if entry.score.requires_comment() && entry.comment.trim().is_empty() {
            return Err(AnnotationError::MissingComment(entry.score));
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(ENTRIES_FILE))?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&entry).expect("serializable")
            )?;
            f.sync_data()?;
        }
        Ok(self.apply(entry))
    }

    fn apply(&mut self, entry: AnnotationEntry) -> Ack {
        let key = entry.key();
        let seq = self.log.len();
        let replaced = self.current.get(&key).map(|&i| self.log[i].score);
        self.log.push(entry);
        self.current.insert(key.clone(), seq);
        let revision = self.revisions.entry(key).or_insert(0);
        *revision += 1;
        Ack {
            seq,
            revision: *revision,
            replaced,
        }
    }

    /// Entries submitted by `annotator` for `task_id` (current view).
    pub fn completed_count(&self, task_id: &str, annotator: &str) -> usize {
        self.current
            .keys()
            .filter(|(t, a, _, _)| t == task_id && a == annotator)
            .count()
    }

    pub fn aggregate(&self) -> AgreementTable {
        let entries: Vec<AnnotationEntry> = self.current_entries().into_iter().cloned().collect();
        aggregate_agreement(&entries, &self.tasks)
    }

    /// The full entry log as JSON lines.
    pub fn export_log(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnnotationError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| AnnotationError::Corrupt {
                file: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Counts, per (feature, property), the tasks where every assigned
/// annotator gave a score of exactly 1. A task enters a cell's `n_tasks`
/// only once all its annotators have scored that cell. Later entries for
/// the same key replace earlier ones.
pub fn aggregate_agreement(
    entries: &[AnnotationEntry],
    tasks: &[AnnotationTask],
) -> AgreementTable {
    let mut latest: HashMap<EntryKey, PilotScore> = HashMap::new();
    for e in entries {
        latest.insert(e.key(), e.score);
    }
    let mut cells = Vec::with_capacity(FeatureKey::ALL.len() * PilotProperty::ALL.len());
    let mut incomplete = Vec::new();
    for feature in FeatureKey::ALL {
        for property in PilotProperty::ALL {
            let mut cell = AgreementCell {
                feature,
                property,
                n_all_agree_conform: 0,
                n_tasks: 0,
            };
            for task in tasks {
                let scores: Option<Vec<PilotScore>> = task
                    .assigned_annotators
                    .iter()
                    .map(|a| {
                        latest
                            .get(&(task.task_id.clone(), a.clone(), feature, property))
                            .copied()
                    })
                    .collect();
                if let Some(scores) = scores {
                    cell.n_tasks += 1;
                    if scores.iter().all(|&s| s == PilotScore::Full) {
                        cell.n_all_agree_conform += 1;
                    }
                }
            }
            cells.push(cell);
        }
    }
    for task in tasks {
        let complete = task.assigned_annotators.iter().all(|a| {
            FeatureKey::ALL.iter().all(|&f| {
                PilotProperty::ALL
                    .iter()
                    .all(|&p| latest.contains_key(&(task.task_id.clone(), a.clone(), f, p)))
            })
        });
        if !complete {
            incomplete.push(task.task_id.clone());
        }
    }
    AgreementTable {
        cells,
        incomplete_tasks: incomplete,
    }
}

/// Plain-text agreement table: one row per feature, one column per
/// property, cells as `agreed/tasks`.
pub fn render_agreement(table: &AgreementTable, exclude_punctuation: bool) -> String {
    let features: Vec<FeatureKey> = FeatureKey::ALL
        .into_iter()
        .filter(|&f| !(exclude_punctuation && f == FeatureKey::PunctuationStyle))
        .collect();
    let name_width = features.iter().map(|f| f.as_str().len()).max().unwrap_or(0);
    let mut out = format!("{:<name_width$}", "Linguistic feature");
    for p in PilotProperty::ALL {
        out.push_str(&format!("  {:>7}", p.short()));
    }
    out.push('\n');
    for f in features {
        out.push_str(&format!("{:<name_width$}", f.as_str()));
        for p in PilotProperty::ALL {
            let text = table
                .cell(f, p)
                .map(|c| format!("{}/{}", c.n_all_agree_conform, c.n_tasks))
                .unwrap_or_default();
            out.push_str(&format!("  {text:>7}"));
        }
        out.push('\n');
    }
    if !table.incomplete_tasks.is_empty() {
        out.push_str(&format!(
            "incomplete tasks (excluded where unscored): {}\n",
            table.incomplete_tasks.join(", ")
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub static_dir: Option<PathBuf>,
    /// Include gold labels in task payloads.
    pub show_gold: bool,
}

#[derive(Clone)]
struct AppState {
    store: Arc<RwLock<AnnotationStore>>,
    show_gold: bool,
}

/// Task payload served to annotators.
#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub pair_id: String,
    pub text1: String,
    pub text2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<crate::model::BinLabel>,
    pub record: RationaleRecord,
    pub completed_entries: usize,
    pub expected_entries: usize,
}

#[derive(Deserialize)]
struct TasksQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct AggregateQuery {
    #[serde(default)]
    exclude_punctuation: bool,
    #[serde(default)]
    format: Option<String>,
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(serde_json::json!({ "error": message }))).into_response()
}

fn header_annotator(headers: &HeaderMap) -> Option<String> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

async fn list_tasks(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<TasksQuery>,
) -> Response {
    let Some(annotator) = q.annotator.or_else(|| header_annotator(&headers)) else {
        return error_response(StatusCode::BAD_REQUEST, "annotator id required".into());
    };
    let store = state.store.read().unwrap_or_else(|e| e.into_inner());
    let expected = FeatureKey::ALL.len() * PilotProperty::ALL.len();
    let views: Vec<TaskView> = store
        .serving_order(&annotator)
        .into_iter()
        .map(|t| TaskView {
            task_id: t.task_id.clone(),
            pair_id: t.pair.pair_id.clone(),
            text1: t.pair.text1.clone(),
            text2: t.pair.text2.clone(),
            gold: state.show_gold.then_some(t.pair.gold),
            record: t.record.clone(),
            completed_entries: store.completed_count(&t.task_id, &annotator),
            expected_entries: expected,
        })
        .collect();
    Json(views).into_response()
}

async fn post_annotation(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(entry): Json<AnnotationEntry>,
) -> Response {
    if let Some(h) = header_annotator(&headers) {
        if h != entry.annotator_id {
            return error_response(
                StatusCode::FORBIDDEN,
                format!("header annotator {h:?} does not match entry"),
            );
        }
    }
    let mut store = state.store.write().unwrap_or_else(|e| e.into_inner());
    match store.submit_annotation(entry) {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => {
            let status = match &e {
                AnnotationError::UnknownTask(_) => StatusCode::NOT_FOUND,
                AnnotationError::NotAssigned { .. } => StatusCode::FORBIDDEN,
                AnnotationError::MissingComment(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            error_response(status, e.to_string())
        }
    }
}

async fn get_aggregate(State(state): State<AppState>, Query(q): Query<AggregateQuery>) -> Response {
    let table = state
        .store
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .aggregate();
    if q.format.as_deref() == Some("text") {
        return render_agreement(&table, q.exclude_punctuation).into_response();
    }
    let table = if q.exclude_punctuation {
        AgreementTable {
            cells: table
                .cells
                .into_iter()
                .filter(|c| c.feature != FeatureKey::PunctuationStyle)
                .collect(),
            incomplete_tasks: table.incomplete_tasks,
        }
    } else {
        table
    };
    Json(table).into_response()
}

async fn export(State(state): State<AppState>) -> Response {
    let body = state
        .store
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .export_log();
    ([("content-type", "application/x-ndjson")], body).into_response()
}

pub fn router(store: Arc<RwLock<AnnotationStore>>, cfg: &ServiceConfig) -> Router {
    let state = AppState {
        store,
        show_gold: cfg.show_gold,
    };
    let api = Router::new()
        .route("/tasks", get(list_tasks))
        .route("/annotations", post(post_annotation))
        .route("/aggregate", get(get_aggregate))
        .route("/export", get(export))
        .with_state(state);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(store: AnnotationStore, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(RwLock::new(store)), &cfg)).await
}
