//! Resumable end-to-end generation over a list of anchors.
//!
//! Layout under the data root:
//!
//! ```text
//! <anchor_id>/anchor.json        AnchorScene, rewritten at each status change
//! <anchor_id>/start.png          exported keyframe
//! <anchor_id>/proposals.json     proposals with filter verdicts
//! <anchor_id>/<action_id>/...    edit-job state (see editloop)
//! <anchor_id>/clipset.json       accepted clips, written when at least two exist
//! report.json                    per-stage outcome counts
//! ```
//!
//! Every stage first looks for its output on disk, so re-running with
//! `resume` continues an interrupted run and produces the same files an
//! uninterrupted run would.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use forge_core::model::{AnchorScene, AnchorStatus, FilterVerdict, GeneratedClip};
use forge_core::pairing::ClipSet;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::editloop::{run_edit_job, EditConfig, EditError, EditJob, JobOutcome};
use crate::keyframe::{select_keyframe, FrameSource, KeyframeError, SamplingPlan};
use crate::proposal::{
    filter_actions, propose_actions, FilterOutcome, ProposalBatch, ProposalError, MIN_RETAINED_ACTIONS,
};
use crate::providers::ProviderSet;
use crate::store::{self, StoreError};

pub const REPORT_FILE: &str = "report.json";
pub const NO_VIABLE_ACTIONS: &str = "no viable actions";

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("{path}:{line}: {message}")]
    BadInput { path: PathBuf, line: usize, message: String },
    #[error("data root {0} already holds generation state; pass --resume to continue it")]
    ExistingState(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One line of the anchors JSONL input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorInput {
    pub source_video: String,
    pub source_caption: String,
}

pub fn read_anchor_inputs(path: &Path) -> Result<Vec<AnchorInput>, GenerateError> {
    let text = std::fs::read_to_string(path).map_err(|e| GenerateError::BadInput {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| GenerateError::BadInput { path: path.into(), line: i + 1, message };
        let a: AnchorInput = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if a.source_video.trim().is_empty() || a.source_caption.trim().is_empty() {
            return Err(bad("source_video and source_caption must be non-empty".into()));
        }
        out.push(a);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub data_root: PathBuf,
    pub num_actions: usize,
    pub workers: usize,
    pub sampling: SamplingPlan,
    pub edit: EditConfig,
    pub resume: bool,
}

impl GenerateConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        GenerateConfig {
            data_root: data_root.into(),
            num_actions: crate::proposal::DEFAULT_NUM_ACTIONS,
            workers: 4,
            sampling: SamplingPlan::default(),
            edit: EditConfig::default(),
            resume: false,
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.num_actions < 2 {
            return Err(GenerateError::Config(format!("num_actions must be >= 2, got {}", self.num_actions)));
        }
        if self.workers == 0 {
            return Err(GenerateError::Config("workers must be >= 1".into()));
        }
        if self.edit.max_attempts == 0 {
            return Err(GenerateError::Config("max_attempts must be >= 1".into()));
        }
        self.sampling.validate().map_err(|e| GenerateError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub done: usize,
    pub edit_exhausted: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Keyframe,
    Proposal,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorFailure {
    pub anchor_id: String,
    pub stage: Stage,
    pub reason: String,
    /// True when `--resume` may succeed without changing anything.
    pub retryable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub anchors: usize,
    pub keyframe: StageCounts,
    pub proposal: StageCounts,
    /// Counted per (anchor, action) job.
    pub edit: StageCounts,
    /// Anchors with a clip set of at least two clips.
    pub clip_sets: usize,
    pub clips: usize,
    /// Anchors dropped because too few of their actions survived editing.
    pub dropped_anchors: Vec<String>,
    pub failures: Vec<AnchorFailure>,
}

impl GenerateReport {
    /// True when some anchor failed for a reason other than edit exhaustion.
    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }
}

fn anchor_dir(root: &Path, anchor_id: &str) -> PathBuf {
    root.join(anchor_id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProposalRecord {
    batch: ProposalBatch,
    filter: FilterOutcome,
}

/// Where one anchor stands after the keyframe and proposal stages.
enum Prepared {
    Ready { anchor: AnchorScene, retained: Vec<(u32, String)> },
    Failed(AnchorFailure),
}

struct Context {
    cfg: GenerateConfig,
    providers: ProviderSet,
    frames: Arc<dyn FrameSource>,
}

fn fail(anchor_id: &str, stage: Stage, reason: String, retryable: bool) -> Prepared {
    Prepared::Failed(AnchorFailure { anchor_id: anchor_id.to_string(), stage, reason, retryable })
}

fn keyframe_retryable(e: &KeyframeError) -> bool {
    matches!(e, KeyframeError::Provider(p) if p.is_retryable())
}

fn proposal_retryable(e: &ProposalError) -> bool {
    matches!(e, ProposalError::Provider(p) if p.is_retryable())
}

async fn prepare_anchor(ctx: &Context, input: &AnchorInput) -> Result<Prepared, GenerateError> {
    let root = &ctx.cfg.data_root;
    let fresh = AnchorScene::new(&input.source_video, &input.source_caption);
    let dir = anchor_dir(root, &fresh.anchor_id);
    let anchor_path = dir.join("anchor.json");
    let mut anchor = store::read_json::<AnchorScene>(&anchor_path)?.unwrap_or(fresh);

    if anchor.status == AnchorStatus::Failed {
        let reason = anchor.failure_reason.clone().unwrap_or_default();
        let stage = if anchor.keyframe.is_some() { Stage::Proposal } else { Stage::Keyframe };
        return Ok(fail(&anchor.anchor_id, stage, reason, false));
    }

    if anchor.status == AnchorStatus::Pending {
        let selected = async {
            let frames = ctx.frames.load(&anchor.source_video).await?;
            let sel =
                select_keyframe(&frames, &anchor.source_caption, ctx.providers.embedder.as_ref(), &ctx.cfg.sampling)
                    .await?;
            ctx.frames.export(&frames, sel.index, &anchor.start_frame_locator()).await?;
            Ok::<_, KeyframeError>(sel)
        }
        .await;
        match selected {
            Ok(sel) => {
                anchor.set_keyframe(sel.frame).map_err(|e| GenerateError::Config(e.to_string()))?;
                store::write_json_atomic(&anchor_path, &anchor)?;
            }
            Err(e) => {
                let retryable = keyframe_retryable(&e);
                if !retryable {
                    anchor.fail(e.to_string());
                    store::write_json_atomic(&anchor_path, &anchor)?;
                }
                return Ok(fail(&anchor.anchor_id, Stage::Keyframe, e.to_string(), retryable));
            }
        }
    }

    let proposals_path = dir.join("proposals.json");
    let record = match store::read_json::<ProposalRecord>(&proposals_path)? {
        Some(r) => r,
        None => {
            let result = async {
                let batch = propose_actions(&anchor, ctx.cfg.num_actions, ctx.providers.proposer.as_ref()).await?;
                let filter = filter_actions(&batch, &anchor, ctx.providers.judge.as_ref()).await?;
                Ok::<_, ProposalError>(ProposalRecord { batch, filter })
            }
            .await;
            match result {
                Ok(r) => {
                    store::write_json_atomic(&proposals_path, &r)?;
                    r
                }
                Err(e) => {
                    let retryable = proposal_retryable(&e);
                    if !retryable {
                        anchor.fail(e.to_string());
                        store::write_json_atomic(&anchor_path, &anchor)?;
                    }
                    return Ok(fail(&anchor.anchor_id, Stage::Proposal, e.to_string(), retryable));
                }
            }
        }
    };

    let retained: Vec<(u32, String)> = record
        .filter
        .proposals
        .iter()
        .filter(|p| p.filter_verdict == FilterVerdict::Passed)
        .map(|p| (p.action_id, p.caption.clone()))
        .collect();
    if retained.len() < MIN_RETAINED_ACTIONS {
        anchor.fail(NO_VIABLE_ACTIONS);
        store::write_json_atomic(&anchor_path, &anchor)?;
        return Ok(fail(&anchor.anchor_id, Stage::Proposal, NO_VIABLE_ACTIONS.into(), false));
    }
    if anchor.status == AnchorStatus::Keyframed {
        anchor.advance(AnchorStatus::Proposed).map_err(|e| GenerateError::Config(e.to_string()))?;
        store::write_json_atomic(&anchor_path, &anchor)?;
    }
    Ok(Prepared::Ready { anchor, retained })
}

/// True when the data root holds anything a previous run wrote.
pub fn has_state(root: &Path) -> bool {
    std::fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub async fn generate(
    inputs: &[AnchorInput],
    cfg: GenerateConfig,
    providers: ProviderSet,
    frames: Arc<dyn FrameSource>,
) -> Result<GenerateReport, GenerateError> {
    cfg.validate()?;
    let root = cfg.data_root.clone();
    if cfg.resume {
        let n = store::clean_temp_files(&root)?;
        if n > 0 {
            tracing::info!(removed = n, "removed partial files from an interrupted run");
        }
    } else if has_state(&root) {
        return Err(GenerateError::ExistingState(root));
    }
    std::fs::create_dir_all(&root).map_err(|source| StoreError::Io { path: root.clone(), source })?;

    let mut unique: BTreeMap<String, (usize, AnchorInput)> = BTreeMap::new();
    for (i, a) in inputs.iter().enumerate() {
        let id = AnchorScene::new(&a.source_video, &a.source_caption).anchor_id;
        unique.entry(id).or_insert((i, a.clone()));
    }
    let mut ordered: Vec<(usize, AnchorInput)> = unique.into_values().collect();
    ordered.sort_by_key(|(i, _)| *i);

    let workers = Arc::new(Semaphore::new(cfg.workers));
    let ctx = Arc::new(Context { cfg, providers, frames });

    let mut set = JoinSet::new();
    for (slot, (_, input)) in ordered.iter().cloned().enumerate() {
        let ctx = ctx.clone();
        let workers = workers.clone();
        set.spawn(async move {
            let _permit = workers.acquire_owned().await.expect("semaphore is never closed");
            (slot, prepare_anchor(&ctx, &input).await)
        });
    }
    let mut prepared: Vec<Option<Prepared>> = (0..ordered.len()).map(|_| None).collect();
    while let Some(joined) = set.join_next().await {
        let (slot, result) = joined.expect("anchor task panicked");
        prepared[slot] = Some(result?);
    }
    let prepared: Vec<Prepared> = prepared.into_iter().map(|p| p.expect("every slot filled")).collect();

    let mut report = GenerateReport { anchors: prepared.len(), ..Default::default() };
    let mut jobs = Vec::new();
    for p in &prepared {
        match p {
            Prepared::Failed(f) => {
                match f.stage {
                    Stage::Keyframe => report.keyframe.failed += 1,
                    _ => {
                        report.keyframe.done += 1;
                        report.proposal.failed += 1;
                    }
                }
                report.failures.push(f.clone());
            }
            Prepared::Ready { anchor, retained } => {
                report.keyframe.done += 1;
                report.proposal.done += 1;
                for (action_id, caption) in retained {
                    jobs.push(EditJob {
                        anchor_id: anchor.anchor_id.clone(),
                        action_id: *action_id,
                        caption: caption.clone(),
                        start_frame: anchor.start_frame_locator(),
                    });
                }
            }
        }
    }

    let mut set = JoinSet::new();
    for (slot, job) in jobs.iter().cloned().enumerate() {
        let ctx = ctx.clone();
        let workers = workers.clone();
        set.spawn(async move {
            let _permit = workers.acquire_owned().await.expect("semaphore is never closed");
            (slot, run_edit_job(&job, &ctx.providers, &ctx.cfg.edit, &ctx.cfg.data_root).await)
        });
    }
    let mut outcomes: Vec<Option<Result<JobOutcome, EditError>>> = (0..jobs.len()).map(|_| None).collect();
    while let Some(joined) = set.join_next().await {
        let (slot, result) = joined.expect("edit task panicked");
        outcomes[slot] = Some(result);
    }

    let mut per_anchor: BTreeMap<&str, (Vec<GeneratedClip>, Option<AnchorFailure>)> = BTreeMap::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let entry = per_anchor.entry(job.anchor_id.as_str()).or_default();
        match outcome.expect("every slot filled") {
            Ok(JobOutcome::Done(clip)) => {
                report.edit.done += 1;
                entry.0.push(clip);
            }
            Ok(JobOutcome::Exhausted(_)) => report.edit.edit_exhausted += 1,
            Err(e) => {
                report.edit.failed += 1;
                if entry.1.is_none() {
                    entry.1 = Some(AnchorFailure {
                        anchor_id: job.anchor_id.clone(),
                        stage: Stage::Edit,
                        reason: format!("action {}: {e}", job.action_id),
                        retryable: e.is_retryable(),
                    });
                }
            }
        }
    }

    for p in &prepared {
        let Prepared::Ready { anchor, .. } = p else { continue };
        let (clips, failure) = per_anchor.remove(anchor.anchor_id.as_str()).unwrap_or_default();
        if let Some(f) = failure {
            report.failures.push(f);
            continue;
        }
        if clips.len() < MIN_RETAINED_ACTIONS {
            report.dropped_anchors.push(anchor.anchor_id.clone());
            continue;
        }
        let dir = anchor_dir(&root, &anchor.anchor_id);
        store::write_json_atomic(&dir.join("clipset.json"), &ClipSet::from_generated(&anchor.anchor_id, &clips))?;
        if anchor.status == AnchorStatus::Proposed {
            let mut a = anchor.clone();
            a.advance(AnchorStatus::Generated).map_err(|e| GenerateError::Config(e.to_string()))?;
            store::write_json_atomic(&dir.join("anchor.json"), &a)?;
        }
        report.clip_sets += 1;
        report.clips += clips.len();
    }
    report.failures.sort_by(|a, b| a.anchor_id.cmp(&b.anchor_id));
    store::write_json_atomic(&root.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Every clip set written by a generation run, ordered by anchor id.
pub fn load_clip_sets(root: &Path) -> Result<Vec<ClipSet>, StoreError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|source| StoreError::Io { path: root.into(), source })?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for d in dirs {
        if let Some(cs) = store::read_json::<ClipSet>(&d.join("clipset.json"))? {
            out.push(cs);
        }
    }
    Ok(out)
}
