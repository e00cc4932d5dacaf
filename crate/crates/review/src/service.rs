//! HTTP routes: sample browsing, label submission, statistics, export and media.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use forge_core::manifest::{
    manifest_stats, write_json_atomic, DatasetManifest, ManifestError, Split, SPLIT_FILE, STATS_FILE,
};
use forge_core::model::{Format, PreferenceKind, PreferenceSample, Task, VideoContext};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::labels::{aggregate, LabelLog, LabelTable, LogError, ReviewAggregate, ReviewLabel, ReviewRecord};

pub const DEFAULT_PAGE_SIZE: usize = 25;
pub const MAX_PAGE_SIZE: usize = 500;
pub const EXPORT_MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    /// Directory that clip locators resolve against; served under `/media`.
    pub media_root: PathBuf,
    /// Parent directory of exported manifests.
    pub export_dir: PathBuf,
    /// Seed of the stable sample ordering.
    pub order_seed: u64,
}

impl ReviewConfig {
    /// Media from the manifest's directory and exports beside the label log.
    pub fn new(manifest: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        let manifest = manifest.into();
        let labels = labels.into();
        let parent = |p: &Path| match p.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        ReviewConfig {
            media_root: parent(&manifest),
            export_dir: parent(&labels).join("exports"),
            manifest,
            labels,
            order_seed: 0,
        }
    }
}

struct Entry {
    sample: PreferenceSample,
    /// The manifest line exactly as read, so exports keep sample bytes.
    raw: String,
    split: Option<Split>,
    /// Line position in the source manifest.
    position: usize,
}

pub struct ReviewState {
    cfg: ReviewConfig,
    /// Sorted by the stable ordering key.
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    format_of: BTreeMap<String, Format>,
    table: RwLock<LabelTable>,
    log: Mutex<LabelLog>,
}

fn order_key(seed: u64, sample_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    h.finalize().into()
}

impl ReviewState {
    /// Loads the manifest and replays the label log.
    pub fn open(cfg: ReviewConfig) -> Result<Arc<ReviewState>, ReviewError> {
        let manifest = DatasetManifest::load(&cfg.manifest)?;
        let text = std::fs::read_to_string(&cfg.manifest)
            .map_err(|source| ReviewError::Io { path: cfg.manifest.clone(), source })?;
        let raws = text.lines().filter(|l| !l.trim().is_empty());
        let mut entries: Vec<Entry> = manifest
            .samples()
            .iter()
            .zip(raws)
            .enumerate()
            .map(|(position, (s, raw))| Entry {
                split: manifest.split_of(&s.sample_id),
                sample: s.clone(),
                raw: raw.to_string(),
                position,
            })
            .collect();
        entries.sort_by_cached_key(|e| order_key(cfg.order_seed, &e.sample.sample_id));
        let index = entries.iter().enumerate().map(|(i, e)| (e.sample.sample_id.clone(), i)).collect();
        let format_of = entries.iter().map(|e| (e.sample.sample_id.clone(), e.sample.format)).collect();
        let (log, table) = LabelLog::open(&cfg.labels)?;
        tracing::info!(samples = entries.len(), records = table.len(), "review state loaded");
        Ok(Arc::new(ReviewState { cfg, entries, index, format_of, table: RwLock::new(table), log: Mutex::new(log) }))
    }

    pub fn aggregate(&self) -> ReviewAggregate {
        aggregate(&self.table.read().expect("label table lock"), &self.format_of)
    }

    /// Durably records a label, replacing any earlier one by the same evaluator.
    pub fn submit(&self, rec: ReviewRecord) -> Result<ReviewRecord, ReviewError> {
        let mut log = self.log.lock().expect("label log lock");
        log.append(&rec)?;
        self.table
            .write()
            .expect("label table lock")
            .insert((rec.sample_id.clone(), rec.evaluator.clone()), rec.clone());
        Ok(rec)
    }

    /// Writes every sample whose consensus is in `keep` to
    /// `<export_dir>/keep-<labels>/manifest.jsonl` with split and stats sidecars.
    pub fn export(&self, keep: &BTreeSet<ReviewLabel>) -> Result<ExportSummary, ExportError> {
        let agg = self.aggregate();
        if agg.consensus.is_empty() {
            return Err(ExportError::NothingLabeled);
        }
        let name: Vec<&str> = keep.iter().map(|l| l.as_str()).collect();
        let dir = self.cfg.export_dir.join(format!("keep-{}", name.join("-")));
        std::fs::create_dir_all(&dir).map_err(|source| ReviewError::Io { path: dir.clone(), source })?;
        // Source manifest order, not review order.
        let mut kept: Vec<&Entry> = self
            .entries
            .iter()
            .filter(|e| agg.consensus.get(&e.sample.sample_id).is_some_and(|c| keep.contains(c)))
            .collect();
        kept.sort_by_key(|e| e.position);
        let mut body = String::new();
        for e in &kept {
            body.push_str(&e.raw);
            body.push('\n');
        }
        let path = dir.join(EXPORT_MANIFEST);
        write_atomic(&path, body.as_bytes())?;
        let split: BTreeMap<&str, Split> =
            kept.iter().filter_map(|e| e.split.map(|s| (e.sample.sample_id.as_str(), s))).collect();
        write_json_atomic(&dir.join(SPLIT_FILE), &split).map_err(ReviewError::from)?;
        let samples: Vec<PreferenceSample> = kept.iter().map(|e| e.sample.clone()).collect();
        write_json_atomic(&dir.join(STATS_FILE), &manifest_stats(&samples)).map_err(ReviewError::from)?;
        Ok(ExportSummary {
            path: path.display().to_string(),
            keep: keep.iter().copied().collect(),
            exported: kept.len(),
            labeled: agg.consensus.len(),
            source_total: self.entries.len(),
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReviewError> {
    let io = |source| ReviewError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("jsonl.tmp");
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("no labelled samples to export")]
    NothingLabeled,
    #[error(transparent)]
    Review(#[from] ReviewError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub path: String,
    pub keep: Vec<ReviewLabel>,
    pub exported: usize,
    pub labeled: usize,
    pub source_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideView {
    pub answer: Option<String>,
    /// One URL per clip, in playback order.
    pub media: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub sample_id: String,
    pub kind: PreferenceKind,
    pub task: Task,
    pub format: Format,
    pub split: Option<Split>,
    pub question: String,
    pub chosen: SideView,
    pub rejected: SideView,
    /// Evaluators who have already labelled this sample.
    pub labeled_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub samples: Vec<SampleView>,
}

pub fn media_urls(ctx: &VideoContext) -> Vec<String> {
    ctx.clip_sequence.iter().map(|c| format!("/media/{}/{}/clip.mp4", c.anchor_id, c.action_id)).collect()
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        tracing::error!(error = %e, "review storage failure");
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
struct SamplesQuery {
    split: Option<String>,
    format: Option<String>,
    unlabeled_by: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "holdout" => Some(Split::Holdout),
        _ => None,
    }
}

async fn list_samples(
    State(st): State<Arc<ReviewState>>,
    Query(q): Query<SamplesQuery>,
) -> Result<Json<SamplePage>, ApiError> {
    let bad = |m: String| ApiError(StatusCode::BAD_REQUEST, m);
    let format = q
        .format
        .as_deref()
        .map(|f| Format::parse(f).ok_or_else(|| bad(format!("unknown format {f:?}"))))
        .transpose()?;
    let split =
        q.split.as_deref().map(|s| parse_split(s).ok_or_else(|| bad(format!("unknown split {s:?}")))).transpose()?;
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(bad(format!("page must be >= 1 and page_size in 1..={MAX_PAGE_SIZE}")));
    }
    let table = st.table.read().expect("label table lock");
    let mut labeled_by: HashMap<&str, Vec<String>> = HashMap::new();
    for (sample, evaluator) in table.keys() {
        labeled_by.entry(sample.as_str()).or_default().push(evaluator.clone());
    }
    let matching: Vec<&Entry> = st
        .entries
        .iter()
        .filter(|e| format.is_none_or(|f| e.sample.format == f))
        .filter(|e| split.is_none_or(|s| e.split == Some(s)))
        .filter(|e| {
            q.unlabeled_by.as_ref().is_none_or(|ev| !table.contains_key(&(e.sample.sample_id.clone(), ev.clone())))
        })
        .collect();
    let samples = matching
        .iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|e| {
            let s = &e.sample;
            SampleView {
                sample_id: s.sample_id.clone(),
                kind: s.kind,
                task: s.task,
                format: s.format,
                split: e.split,
                question: s.question.clone(),
                chosen: SideView { answer: Some(s.chosen_answer.clone()), media: media_urls(&s.chosen_context) },
                rejected: SideView {
                    answer: s.rejected_answer.clone(),
                    media: s.rejected_context.as_ref().map(media_urls).unwrap_or_default(),
                },
                labeled_by: labeled_by.get(s.sample_id.as_str()).cloned().unwrap_or_default(),
            }
        })
        .collect();
    Ok(Json(SamplePage { total: matching.len(), page, page_size, samples }))
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    evaluator: String,
    label: String,
    #[serde(default)]
    comment: Option<String>,
}

async fn submit_label(
    State(st): State<Arc<ReviewState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<LabelBody>,
) -> Result<Json<ReviewRecord>, ApiError> {
    if !st.index.contains_key(&id) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown sample {id}")));
    }
    let unprocessable = |m: String| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m);
    let label =
        ReviewLabel::parse(&body.label).ok_or_else(|| unprocessable(format!("invalid label {:?}", body.label)))?;
    let evaluator = body.evaluator.trim().to_string();
    if evaluator.is_empty() {
        return Err(unprocessable("evaluator must not be empty".into()));
    }
    let rec = ReviewRecord { sample_id: id, evaluator, label, noted_at: Utc::now(), comment: body.comment };
    let stored = tokio::task::spawn_blocking(move || st.submit(rec))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(stored))
}

async fn stats(State(st): State<Arc<ReviewState>>) -> Json<ReviewAggregate> {
    Json(st.aggregate())
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    keep: Option<String>,
}

async fn export(
    State(st): State<Arc<ReviewState>>,
    Query(q): Query<ExportQuery>,
) -> Result<Json<ExportSummary>, ApiError> {
    let raw = q.keep.unwrap_or_else(|| ReviewLabel::Good.as_str().to_string());
    let mut keep = BTreeSet::new();
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let l = ReviewLabel::parse(part)
            .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("unknown label {part:?} in keep")))?;
        keep.insert(l);
    }
    if keep.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "keep must name at least one label".into()));
    }
    let out = tokio::task::spawn_blocking(move || st.export(&keep))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match out {
        Ok(s) => Ok(Json(s)),
        Err(ExportError::NothingLabeled) => {
            Err(ApiError(StatusCode::CONFLICT, ExportError::NothingLabeled.to_string()))
        }
        Err(ExportError::Review(e)) => Err(e.into()),
    }
}

pub fn router(state: Arc<ReviewState>) -> Router {
    let media = ServeDir::new(&state.cfg.media_root);
    Router::new()
        .route("/samples", get(list_samples))
        .route("/samples/{id}/label", post(submit_label))
        .route("/stats", get(stats))
        .route("/export", post(export))
        .nest_service("/media", media)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(state: Arc<ReviewState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    tracing::info!(%addr, "review service listening");
    axum::serve(listener, router(state)).await
}
