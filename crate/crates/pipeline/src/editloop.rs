//! The bounded instruct, edit, judge and refine cycle for one (anchor, action)
//! job, followed by video synthesis once an edited end frame is accepted.
//!
//! Each finished attempt is written to `<anchor>/<action>/attempt_<k>.json`
//! before any further provider call, and the terminal state is written to
//! `clip.json` or `exhausted.json`. Re-running a job resumes from whatever is
//! on disk.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use forge_core::model::{EditAttempt, EditVerdict, GeneratedClip, Resolution};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompts::Template;
use crate::proposal::extract_json;
use crate::providers::{ChatRequest, EditRequest, JobTag, Llm, ProviderError, ProviderSet, SynthesizeRequest};
use crate::store::{self, StoreError};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const ALLOWED_VERBS: [&str; 4] = ["ADD", "REMOVE", "REPLACE", "MODIFY"];
pub const MAX_REFINED_WORDS: usize = 55;

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error("edit instruction unusable after re-prompt: {0}")]
    Instruction(String),
    #[error("judge response unusable after re-prompt: {0}")]
    JudgeParse(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("inconsistent job state: {0}")]
    Corrupt(String),
}

impl EditError {
    /// Whether a later `--resume` can plausibly finish the job.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EditError::Provider(p) if p.is_retryable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub max_attempts: u32,
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
    pub fps: u32,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig { max_attempts: DEFAULT_MAX_ATTEMPTS, width: 680, height: 384, num_frames: 49, fps: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Instructing,
    Editing,
    Judging,
    Refining,
    Synthesizing,
    Done,
    Exhausted,
}

/// Inputs of one edit job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub anchor_id: String,
    pub action_id: u32,
    /// The action caption, which is also the desired outcome of the edit.
    pub caption: String,
    /// Locator of the anchor keyframe.
    pub start_frame: String,
}

impl EditJob {
    pub fn dir_locator(&self) -> String {
        format!("{}/{}", self.anchor_id, self.action_id)
    }

    pub fn attempt_frame_locator(&self, attempt: u32) -> String {
        format!("{}/attempt_{attempt}_end.png", self.dir_locator())
    }

    pub fn clip_locator(&self) -> String {
        format!("{}/clip.mp4", self.dir_locator())
    }

    fn tag(&self, attempt: u32) -> JobTag {
        JobTag { anchor_id: self.anchor_id.clone(), action_id: self.action_id, attempt }
    }
}

/// What is persisted for each attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: EditAttempt,
    /// Absent when the instruction failed validation and no edit was made.
    pub edited_frame: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustedRecord {
    pub anchor_id: String,
    pub action_id: u32,
    pub caption: String,
    pub attempts: Vec<EditAttempt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Done(GeneratedClip),
    Exhausted(ExhaustedRecord),
}

impl JobOutcome {
    pub fn state(&self) -> JobState {
        match self {
            JobOutcome::Done(_) => JobState::Done,
            JobOutcome::Exhausted(_) => JobState::Exhausted,
        }
    }

    pub fn attempts(&self) -> &[EditAttempt] {
        match self {
            JobOutcome::Done(c) => &c.edit_attempts,
            JobOutcome::Exhausted(e) => &e.attempts,
        }
    }
}

async fn chat(llm: &dyn Llm, prompt: String, images: Vec<String>) -> Result<String, ProviderError> {
    llm.chat(&ChatRequest::new(prompt, images)).await
}

fn parse_edit_prompt(raw: &str) -> Result<String, String> {
    let v = extract_json(raw)?;
    let p = v.get("edit_prompt").ok_or("missing edit_prompt")?.as_str().ok_or("edit_prompt is not a string")?;
    let p = p.trim();
    if p.is_empty() {
        return Err("edit_prompt is empty".into());
    }
    Ok(p.to_string())
}

pub async fn make_edit_instruction(
    start_frame: &str,
    action_caption: &str,
    llm: &dyn Llm,
) -> Result<String, EditError> {
    let prompt = Template::EditInstruction
        .render(&[("action_caption", action_caption)])
        .expect("template placeholders are fixed");
    let images = vec![start_frame.to_string()];
    let raw = chat(llm, prompt.clone(), images.clone()).await?;
    let reason = match parse_edit_prompt(&raw) {
        Ok(p) => return Ok(p),
        Err(r) => r,
    };
    let retry = format!(
        "{prompt}\n\nYour previous response could not be used ({reason}). Return ONLY the JSON object with a non-empty edit_prompt."
    );
    let raw = chat(llm, retry, images).await?;
    parse_edit_prompt(&raw).map_err(EditError::Instruction)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgeVerdict {
    Accepted,
    Rejected(String),
}

static EVALUATION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[\s*#]*EVALUATION[\s*]*:[\s*]*(YES|NO)\b").expect("static regex"));
static EXPLANATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?ims)^[\s*#]*EXPLANATION[\s*]*:[\s*]*(.*)").expect("static regex"));

/// The YES/NO of the first `EVALUATION:` line, if any.
pub fn parse_evaluation(raw: &str) -> Option<bool> {
    EVALUATION_LINE.captures(raw).map(|c| c[1].eq_ignore_ascii_case("yes"))
}

pub fn parse_judgement(raw: &str) -> Result<JudgeVerdict, String> {
    let caps = EVALUATION_LINE.captures(raw).ok_or("no EVALUATION: YES/NO line")?;
    if caps[1].eq_ignore_ascii_case("yes") {
        return Ok(JudgeVerdict::Accepted);
    }
    let after = &raw[caps.get(0).expect("group 0 always participates").end()..];
    let explanation = EXPLANATION
        .captures(after)
        .map(|c| c[1].trim().to_string())
        .filter(|e| !e.is_empty() && !e.eq_ignore_ascii_case("none"))
        .ok_or("NO verdict without an EXPLANATION")?;
    Ok(JudgeVerdict::Rejected(explanation))
}

pub async fn judge_edit(
    original: &str,
    edited: &str,
    edit_prompt: &str,
    llm: &dyn Llm,
) -> Result<JudgeVerdict, EditError> {
    let prompt =
        Template::EditEvaluation.render(&[("editing_prompt", edit_prompt)]).expect("template placeholders are fixed");
    let images = vec![original.to_string(), edited.to_string()];
    let raw = chat(llm, prompt.clone(), images.clone()).await?;
    let reason = match parse_judgement(&raw) {
        Ok(v) => return Ok(v),
        Err(r) => r,
    };
    let retry = format!(
        "{prompt}\n\nYour previous response could not be used ({reason}). Answer with an EVALUATION line, and an EXPLANATION line if the evaluation is NO."
    );
    let raw = chat(llm, retry, images).await?;
    parse_judgement(&raw).map_err(EditError::JudgeParse)
}

static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]+(\s+|$)").expect("static regex"));

/// Checks the hard output rules of the refinement template.
pub fn check_refinement(text: &str, prior_prompts: &[String]) -> Result<(), String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let first = words.first().ok_or("empty instruction")?;
    if !ALLOWED_VERBS.contains(first) {
        return Err(format!("must start with one of {ALLOWED_VERBS:?}, starts with {first:?}"));
    }
    if words.len() > MAX_REFINED_WORDS {
        return Err(format!("{} words exceeds {MAX_REFINED_WORDS}", words.len()));
    }
    let sentences = SENTENCE_END.split(text.trim()).filter(|s| !s.trim().is_empty()).count();
    if !(1..=2).contains(&sentences) {
        return Err(format!("{sentences} sentences, expected 1 or 2"));
    }
    if prior_prompts.iter().any(|p| p == text) {
        return Err("identical to an earlier prompt".into());
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_refinement_prompt(
    desired_outcome: &str,
    failed_prompts: &[String],
    failure_reasons: &[String],
) -> String {
    let original = failed_prompts.last().map(|p| one_line(p)).unwrap_or_default();
    let failed_list: Vec<String> =
        failed_prompts.iter().enumerate().map(|(i, p)| format!("{}. {}", i + 1, one_line(p))).collect();
    let failure_block = if failure_reasons.is_empty() {
        String::new()
    } else {
        let reasons: Vec<String> =
            failure_reasons.iter().enumerate().map(|(i, r)| format!("{}. {}", i + 1, one_line(r))).collect();
        format!("\n\n- FAILURE REASONS:\n{}", reasons.join("\n"))
    };
    Template::Refinement
        .render(&[
            ("desired_outcome", desired_outcome),
            ("original_prompt", &original),
            ("failed_list", &failed_list.join("\n")),
            ("failure_block", &failure_block),
        ])
        .expect("template placeholders are fixed")
}

/// A refined instruction, or the constraint violation that survived the re-prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refinement {
    Valid(String),
    Violation { text: String, reason: String },
}

pub async fn refine_instruction(
    desired_outcome: &str,
    start_frame: &str,
    failed_prompts: &[String],
    failure_reasons: &[String],
    llm: &dyn Llm,
) -> Result<Refinement, EditError> {
    if failed_prompts.is_empty() {
        return Err(EditError::Corrupt("refinement needs at least one failed prompt".into()));
    }
    let prompt = render_refinement_prompt(desired_outcome, failed_prompts, failure_reasons);
    let images = vec![start_frame.to_string()];
    let text = chat(llm, prompt.clone(), images.clone()).await?.trim().to_string();
    let reason = match check_refinement(&text, failed_prompts) {
        Ok(()) => return Ok(Refinement::Valid(text)),
        Err(r) => r,
    };
    let retry = format!("{prompt}\n\nYour previous instruction broke the OUTPUT RULES ({reason}). Write a new one.");
    let text = chat(llm, retry, images).await?.trim().to_string();
    Ok(match check_refinement(&text, failed_prompts) {
        Ok(()) => Refinement::Valid(text),
        Err(reason) => Refinement::Violation { text, reason },
    })
}

fn attempt_path(dir: &Path, k: u32) -> PathBuf {
    dir.join(format!("attempt_{k}.json"))
}

/// Attempts already on disk, in order, stopping at the first gap.
pub fn load_attempts(dir: &Path, max_attempts: u32) -> Result<Vec<AttemptRecord>, EditError> {
    let mut out = Vec::new();
    for k in 1..=max_attempts {
        match store::read_json::<AttemptRecord>(&attempt_path(dir, k))? {
            Some(r) if r.attempt.attempt_index == k => out.push(r),
            Some(r) => {
                return Err(EditError::Corrupt(format!(
                    "attempt_{k}.json has attempt_index {}",
                    r.attempt.attempt_index
                )))
            }
            None => break,
        }
    }
    Ok(out)
}

async fn synthesize(
    job: &EditJob,
    record: &AttemptRecord,
    history: Vec<EditAttempt>,
    providers: &ProviderSet,
    cfg: &EditConfig,
    dir: &Path,
) -> Result<JobOutcome, EditError> {
    let end_frame = record
        .edited_frame
        .clone()
        .ok_or_else(|| EditError::Corrupt("accepted attempt without an edited frame".into()))?;
    let resp = providers
        .synthesizer
        .synthesize(&SynthesizeRequest {
            start_frame: job.start_frame.clone(),
            end_frame: end_frame.clone(),
            caption: job.caption.clone(),
            output: job.clip_locator(),
            width: cfg.width,
            height: cfg.height,
            num_frames: cfg.num_frames,
            fps: cfg.fps,
            job: job.tag(record.attempt.attempt_index),
        })
        .await?;
    let clip = GeneratedClip {
        anchor_id: job.anchor_id.clone(),
        action_id: job.action_id,
        caption: job.caption.clone(),
        end_frame,
        video: resp.video,
        edit_attempts: history,
        duration_s: resp.frame_count as f64 / resp.fps as f64,
        resolution: Resolution { width: resp.width, height: resp.height },
        frame_count: resp.frame_count,
        fps: resp.fps,
    };
    let problems = clip.violations(cfg.max_attempts);
    if !problems.is_empty() {
        return Err(EditError::Corrupt(problems.join("; ")));
    }
    store::write_json_atomic(&dir.join("clip.json"), &clip)?;
    Ok(JobOutcome::Done(clip))
}

/// Runs or resumes one job. `data_root` is where locators resolve.
pub async fn run_edit_job(
    job: &EditJob,
    providers: &ProviderSet,
    cfg: &EditConfig,
    data_root: &Path,
) -> Result<JobOutcome, EditError> {
    let dir = data_root.join(job.dir_locator());
    if let Some(clip) = store::read_json::<GeneratedClip>(&dir.join("clip.json"))? {
        return Ok(JobOutcome::Done(clip));
    }
    if let Some(ex) = store::read_json::<ExhaustedRecord>(&dir.join("exhausted.json"))? {
        return Ok(JobOutcome::Exhausted(ex));
    }
    let mut records = load_attempts(&dir, cfg.max_attempts)?;
    if let Some(last) = records.last() {
        if last.attempt.verdict == EditVerdict::Accepted {
            let history = records.iter().map(|r| r.attempt.clone()).collect();
            return synthesize(job, last, history, providers, cfg, &dir).await;
        }
    }

    for k in (records.len() as u32 + 1)..=cfg.max_attempts {
        let prior: Vec<String> = records.iter().map(|r| r.attempt.edit_prompt.clone()).collect();
        let instruction = if k == 1 {
            Refinement::Valid(make_edit_instruction(&job.start_frame, &job.caption, providers.proposer.as_ref()).await?)
        } else {
            let reasons: Vec<String> = records.iter().filter_map(|r| r.attempt.judge_explanation.clone()).collect();
            refine_instruction(&job.caption, &job.start_frame, &prior, &reasons, providers.proposer.as_ref()).await?
        };
        let record = match instruction {
            Refinement::Violation { text, reason } => AttemptRecord {
                attempt: EditAttempt {
                    attempt_index: k,
                    edit_prompt: text,
                    verdict: EditVerdict::Rejected,
                    judge_explanation: Some(format!("instruction rejected before editing: {reason}")),
                },
                edited_frame: None,
            },
            Refinement::Valid(prompt) => {
                let edited = providers
                    .editor
                    .edit(&EditRequest {
                        source: job.start_frame.clone(),
                        instruction: prompt.clone(),
                        output: job.attempt_frame_locator(k),
                        job: job.tag(k),
                    })
                    .await?;
                let verdict = judge_edit(&job.start_frame, &edited.image, &prompt, providers.judge.as_ref()).await?;
                let (verdict, judge_explanation) = match verdict {
                    JudgeVerdict::Accepted => (EditVerdict::Accepted, None),
                    JudgeVerdict::Rejected(why) => (EditVerdict::Rejected, Some(why)),
                };
                AttemptRecord {
                    attempt: EditAttempt { attempt_index: k, edit_prompt: prompt, verdict, judge_explanation },
                    edited_frame: Some(edited.image),
                }
            }
        };
        store::write_json_atomic(&attempt_path(&dir, k), &record)?;
        let accepted = record.attempt.verdict == EditVerdict::Accepted;
        records.push(record);
        if accepted {
            let history = records.iter().map(|r| r.attempt.clone()).collect();
            let last = records.last().expect("just pushed");
            return synthesize(job, last, history, providers, cfg, &dir).await;
        }
    }

    let ex = ExhaustedRecord {
        anchor_id: job.anchor_id.clone(),
        action_id: job.action_id,
        caption: job.caption.clone(),
        attempts: records.into_iter().map(|r| r.attempt).collect(),
    };
    store::write_json_atomic(&dir.join("exhausted.json"), &ex)?;
    Ok(JobOutcome::Exhausted(ex))
}
