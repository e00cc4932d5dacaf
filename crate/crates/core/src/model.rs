//! Domain records shared by every stage of the pipeline.
//!
//! Everything here is a plain value: constructed once, serialized to JSON with
//! snake_case field names, and never mutated behind a shared reference. Media
//! fields are opaque locators relative to the configured data root; nothing in
//! this module touches media bytes.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hex digest of the canonical JSON encoding of `value`.
///
/// Used for anchor ids, sample ids and provider idempotency keys, so identical
/// content always maps to the same identifier.
pub fn content_id<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("domain values always serialize");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..16])
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("status transition {from:?} -> {to:?} is not monotone")]
    NonMonotoneTransition { from: AnchorStatus, to: AnchorStatus },
    #[error("anchor cannot be {0:?} without a keyframe")]
    MissingKeyframe(AnchorStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorStatus {
    Pending,
    Keyframed,
    Proposed,
    Generated,
    Paired,
    Failed,
}

impl AnchorStatus {
    /// Position along the forward path; `Failed` sits off the path.
    fn rank(self) -> Option<u8> {
        match self {
            AnchorStatus::Pending => Some(0),
            AnchorStatus::Keyframed => Some(1),
            AnchorStatus::Proposed => Some(2),
            AnchorStatus::Generated => Some(3),
            AnchorStatus::Paired => Some(4),
            AnchorStatus::Failed => None,
        }
    }

    /// True when `self` is at or beyond `other` on the forward path.
    pub fn reached(self, other: AnchorStatus) -> bool {
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => a >= b,
            _ => false,
        }
    }
}

/// One real video and caption, the root of a generation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorScene {
    pub anchor_id: String,
    pub source_video: String,
    pub source_caption: String,
    pub keyframe: Option<FrameRef>,
    pub status: AnchorStatus,
    #[serde(default)]
    pub failure_reason: Option<String>,
}

impl AnchorScene {
    pub fn new(source_video: impl Into<String>, source_caption: impl Into<String>) -> Self {
        let source_video = source_video.into();
        let source_caption = source_caption.into();
        let anchor_id = content_id(&("anchor", &source_video, &source_caption));
        AnchorScene {
            anchor_id,
            source_video,
            source_caption,
            keyframe: None,
            status: AnchorStatus::Pending,
            failure_reason: None,
        }
    }

    /// Moves the anchor forward. `Failed` is reachable from any state; every
    /// other move must go strictly forward.
    pub fn advance(&mut self, to: AnchorStatus) -> Result<(), ModelError> {
        let forward = match (self.status.rank(), to.rank()) {
            (Some(_), None) => true,
            (Some(a), Some(b)) => b > a,
            (None, _) => false,
        };
        if !forward {
            return Err(ModelError::NonMonotoneTransition { from: self.status, to });
        }
        if to != AnchorStatus::Failed && to.reached(AnchorStatus::Keyframed) && self.keyframe.is_none() {
            return Err(ModelError::MissingKeyframe(to));
        }
        self.status = to;
        Ok(())
    }

    pub fn set_keyframe(&mut self, frame: FrameRef) -> Result<(), ModelError> {
        self.keyframe = Some(frame);
        self.advance(AnchorStatus::Keyframed)
    }

    pub fn fail(&mut self, reason: impl Into<String>) {
        self.status = AnchorStatus::Failed;
        self.failure_reason = Some(reason.into());
    }

    /// Relative locator of the extracted start frame.
    pub fn start_frame_locator(&self) -> String {
        format!("{}/start.png", self.anchor_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropScores {
    pub center: f64,
    pub left: f64,
    pub right: f64,
}

impl CropScores {
    pub fn mean(&self) -> f64 {
        (self.center + self.left + self.right) / 3.0
    }
}

/// The selected keyframe and how well it matched the caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Seconds from the start of the source video.
    pub timestamp: f64,
    pub similarity: f64,
    pub crop_scores: CropScores,
}

impl FrameRef {
    pub fn new(timestamp: f64, crop_scores: CropScores) -> Self {
        FrameRef { timestamp, similarity: crop_scores.mean(), crop_scores }
    }

    pub fn is_consistent(&self) -> bool {
        (self.similarity - self.crop_scores.mean()).abs() <= 1e-9
            && self.timestamp >= 0.0
            && (-1.0..=1.0).contains(&self.similarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Pending,
    Passed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionProposal {
    pub anchor_id: String,
    pub action_id: u32,
    pub caption: String,
    pub filter_verdict: FilterVerdict,
    pub rejection_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditVerdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAttempt {
    pub attempt_index: u32,
    pub edit_prompt: String,
    pub verdict: EditVerdict,
    pub judge_explanation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

/// A synthesized counterfactual clip together with its edit-loop history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedClip {
    pub anchor_id: String,
    pub action_id: u32,
    pub caption: String,
    pub end_frame: String,
    pub video: String,
    pub edit_attempts: Vec<EditAttempt>,
    pub duration_s: f64,
    pub resolution: Resolution,
    pub frame_count: u32,
    pub fps: u32,
}

impl GeneratedClip {
    /// Lists every broken invariant; empty when the clip is well formed.
    pub fn violations(&self, max_attempts: u32) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.edit_attempts.len();
        if n == 0 || n > max_attempts as usize {
            out.push(format!("attempt count {n} outside 1..={max_attempts}"));
        }
        out.extend(attempt_history_violations(&self.edit_attempts));
        if self.edit_attempts.last().map(|a| a.verdict) != Some(EditVerdict::Accepted) {
            out.push("last attempt is not accepted".into());
        }
        if self.fps == 0 || (self.duration_s - self.frame_count as f64 / self.fps as f64).abs() > 1e-9 {
            out.push("duration_s != frame_count / fps".into());
        }
        out
    }
}

/// Checks index ordering and the single-trailing-acceptance rule.
pub fn attempt_history_violations(attempts: &[EditAttempt]) -> Vec<String> {
    let mut out = Vec::new();
    if attempts.windows(2).any(|w| w[1].attempt_index <= w[0].attempt_index) {
        out.push("attempt_index not strictly increasing".into());
    }
    let accepted: Vec<usize> =
        attempts.iter().enumerate().filter(|(_, a)| a.verdict == EditVerdict::Accepted).map(|(i, _)| i).collect();
    if accepted.len() > 1 || accepted.first().is_some_and(|&i| i + 1 != attempts.len()) {
        out.push("accepted attempt must be unique and last".into());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceKind {
    TPref,
    VPref,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ActionRecognition,
    TemporalOrdering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    FreeForm,
    BinaryChoice,
    MultipleChoice,
    OrderList,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::ActionRecognition, Task::TemporalOrdering];

    /// Formats produced for this task, in reporting order.
    pub fn formats(self) -> &'static [Format] {
        match self {
            Task::ActionRecognition => &[Format::FreeForm, Format::MultipleChoice, Format::BinaryChoice],
            Task::TemporalOrdering => &[Format::FreeForm, Format::OrderList, Format::BinaryChoice],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ActionRecognition => "action_recognition",
            Task::TemporalOrdering => "temporal_ordering",
        }
    }
}

impl Format {
    pub const ALL: [Format; 4] = [Format::FreeForm, Format::BinaryChoice, Format::MultipleChoice, Format::OrderList];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::FreeForm => "free_form",
            Format::BinaryChoice => "binary_choice",
            Format::MultipleChoice => "multiple_choice",
            Format::OrderList => "order_list",
        }
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Format::FreeForm => "FF",
            Format::BinaryChoice => "BC",
            Format::MultipleChoice => "MC",
            Format::OrderList => "OL",
        }
    }

    pub fn parse(s: &str) -> Option<Format> {
        Format::ALL.into_iter().find(|f| f.as_str() == s || f.abbrev().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClipRef {
    pub anchor_id: String,
    pub action_id: u32,
}

/// Temporal concatenation of clips, played in list order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoContext {
    pub clip_sequence: Vec<ClipRef>,
}

impl VideoContext {
    pub fn single(anchor_id: &str, action_id: u32) -> Self {
        Self::sequence(anchor_id, &[action_id])
    }

    pub fn sequence(anchor_id: &str, action_ids: &[u32]) -> Self {
        VideoContext {
            clip_sequence: action_ids
                .iter()
                .map(|&action_id| ClipRef { anchor_id: anchor_id.to_string(), action_id })
                .collect(),
        }
    }

    pub fn action_ids(&self) -> Vec<u32> {
        self.clip_sequence.iter().map(|c| c.action_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub anchor_id: String,
    /// Actions of the chosen context, followed by the negative's action for
    /// single-clip samples.
    pub action_ids: Vec<u32>,
    /// Non-identity permutation that produced the rejected order, if any.
    pub permutation: Option<Vec<usize>>,
    /// Action ids in the order they were listed to the model (MC and OL).
    pub option_order: Option<Vec<u32>>,
}

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub sample_id: String,
    pub kind: PreferenceKind,
    pub task: Task,
    pub format: Format,
    pub question: String,
    pub chosen_context: VideoContext,
    pub rejected_context: Option<VideoContext>,
    pub chosen_answer: String,
    pub rejected_answer: Option<String>,
    pub provenance: Provenance,
}

impl PreferenceSample {
    /// Id derived from every field except the id itself.
    pub fn compute_id(&self) -> String {
        let mut body = self.clone();
        body.sample_id.clear();
        content_id(&body)
    }

    pub fn with_computed_id(mut self) -> Self {
        self.sample_id = self.compute_id();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingSampleId,
    SampleIdMismatch,
    MissingRejectedAnswer,
    UnexpectedRejectedContext,
    AnswersIdentical,
    MissingRejectedContext,
    UnexpectedRejectedAnswer,
    ContextsIdentical,
    EmptyContext,
    SequenceTooShort,
    ForeignClip,
    FormatNotForTask,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Violation::MissingSampleId => "missing sample_id",
            Violation::SampleIdMismatch => "sample_id does not match content",
            Violation::MissingRejectedAnswer => "t_pref without rejected_answer",
            Violation::UnexpectedRejectedContext => "t_pref with rejected_context",
            Violation::AnswersIdentical => "answers identical",
            Violation::MissingRejectedContext => "v_pref without rejected_context",
            Violation::UnexpectedRejectedAnswer => "v_pref with rejected_answer",
            Violation::ContextsIdentical => "contexts identical",
            Violation::EmptyContext => "empty video context",
            Violation::SequenceTooShort => "sequence length < 2",
            Violation::ForeignClip => "clip from a different anchor",
            Violation::FormatNotForTask => "format not offered for task",
        };
        f.write_str(msg)
    }
}

/// Returns every violated invariant of `s`; empty iff the sample is valid.
pub fn validate_sample(s: &PreferenceSample) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.sample_id.is_empty() {
        out.push(Violation::MissingSampleId);
    } else if s.sample_id != s.compute_id() {
        out.push(Violation::SampleIdMismatch);
    }
    match s.kind {
        PreferenceKind::TPref => {
            match &s.rejected_answer {
                None => out.push(Violation::MissingRejectedAnswer),
                Some(r) if *r == s.chosen_answer => out.push(Violation::AnswersIdentical),
                Some(_) => {}
            }
            if s.rejected_context.is_some() {
                out.push(Violation::UnexpectedRejectedContext);
            }
        }
        PreferenceKind::VPref => {
            match &s.rejected_context {
                None => out.push(Violation::MissingRejectedContext),
                Some(r) if *r == s.chosen_context => out.push(Violation::ContextsIdentical),
                Some(_) => {}
            }
            if s.rejected_answer.is_some() {
                out.push(Violation::UnexpectedRejectedAnswer);
            }
        }
    }
    let contexts = std::iter::once(&s.chosen_context).chain(s.rejected_context.as_ref());
    for ctx in contexts {
        if ctx.clip_sequence.is_empty() {
            out.push(Violation::EmptyContext);
        } else if s.task == Task::TemporalOrdering && ctx.clip_sequence.len() < 2 {
            out.push(Violation::SequenceTooShort);
        }
        if ctx.clip_sequence.iter().any(|c| c.anchor_id != s.provenance.anchor_id) {
            out.push(Violation::ForeignClip);
        }
    }
    if !s.task.formats().contains(&s.format) {
        out.push(Violation::FormatNotForTask);
    }
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tpref() -> PreferenceSample {
        PreferenceSample {
            sample_id: String::new(),
            kind: PreferenceKind::TPref,
            task: Task::ActionRecognition,
            format: Format::FreeForm,
            question: "What action is shown?".into(),
            chosen_context: VideoContext::single("a1", 0),
            rejected_context: None,
            chosen_answer: "Person waves hand".into(),
            rejected_answer: Some("Door opens".into()),
            provenance: Provenance {
                anchor_id: "a1".into(),
                action_ids: vec![0, 1],
                permutation: None,
                option_order: None,
            },
        }
        .with_computed_id()
    }

    #[test]
    fn identical_answers_flagged() {
        let mut s = tpref();
        s.rejected_answer = Some(s.chosen_answer.clone());
        let s = s.with_computed_id();
        assert_eq!(validate_sample(&s), vec![Violation::AnswersIdentical]);
        assert_eq!(Violation::AnswersIdentical.to_string(), "answers identical");
    }

    #[test]
    fn well_formed_vpref_is_ok() {
        let mut s = tpref();
        s.kind = PreferenceKind::VPref;
        s.rejected_answer = None;
        s.rejected_context = Some(VideoContext::single("a1", 1));
        let s = s.with_computed_id();
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn one_clip_temporal_sample_flagged() {
        let mut s = tpref();
        s.task = Task::TemporalOrdering;
        s.rejected_answer = Some("1. Door opens".into());
        let s = s.with_computed_id();
        let v = validate_sample(&s);
        assert_eq!(v, vec![Violation::SequenceTooShort]);
        assert_eq!(v[0].to_string(), "sequence length < 2");
    }

    #[test]
    fn tampered_id_detected() {
        let mut s = tpref();
        s.question.push('!');
        assert_eq!(validate_sample(&s), vec![Violation::SampleIdMismatch]);
    }

    #[test]
    fn anchor_ids_are_content_hashes() {
        let a = AnchorScene::new("v/1.mp4", "a man cooks");
        let b = AnchorScene::new("v/1.mp4", "a man cooks");
        let c = AnchorScene::new("v/1.mp4", "a man cooks.");
        assert_eq!(a.anchor_id, b.anchor_id);
        assert_ne!(a.anchor_id, c.anchor_id);
        assert_eq!(a.anchor_id.len(), 32);
    }

    #[test]
    fn status_moves_forward_only() {
        let mut a = AnchorScene::new("v", "c");
        assert_eq!(a.advance(AnchorStatus::Proposed), Err(ModelError::MissingKeyframe(AnchorStatus::Proposed)));
        a.set_keyframe(FrameRef::new(0.5, CropScores { center: 0.1, left: 0.2, right: 0.3 })).unwrap();
        a.advance(AnchorStatus::Proposed).unwrap();
        assert!(a.advance(AnchorStatus::Keyframed).is_err());
        a.advance(AnchorStatus::Failed).unwrap();
        assert!(a.advance(AnchorStatus::Generated).is_err());
    }

    #[test]
    fn frame_similarity_is_crop_mean() {
        let f = FrameRef::new(1.0, CropScores { center: 0.9, left: 0.3, right: 0.6 });
        assert!((f.similarity - 0.6).abs() < 1e-12);
        assert!(f.is_consistent());
    }

    #[test]
    fn clip_invariants() {
        let attempt = |i, v| EditAttempt {
            attempt_index: i,
            edit_prompt: format!("ADD {i}"),
            verdict: v,
            judge_explanation: None,
        };
        let mut clip = GeneratedClip {
            anchor_id: "a".into(),
            action_id: 0,
            caption: "c".into(),
            end_frame: "a/0/end_1.png".into(),
            video: "a/0/video.mp4".into(),
            edit_attempts: vec![attempt(0, EditVerdict::Rejected), attempt(1, EditVerdict::Accepted)],
            duration_s: 49.0 / 16.0,
            resolution: Resolution { width: 680, height: 384 },
            frame_count: 49,
            fps: 16,
        };
        assert!(clip.violations(5).is_empty());
        clip.edit_attempts.swap(0, 1);
        assert_eq!(clip.violations(5).len(), 3);
    }
}
