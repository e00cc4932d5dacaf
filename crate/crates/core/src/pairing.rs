//! Preference-pair construction from each anchor's accepted clip set.
//!
//! Action recognition pairs a single clip with its caption; the negative is
//! another clip (visual) or another caption (textual) of the same anchor.
//! Temporal ordering concatenates `k` clips in ascending `action_id` order;
//! the visual negative plays them in a non-identity permuted order and the
//! textual negative swaps a caption for an unused one from the same anchor.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{DatasetManifest, Split};
use crate::model::{ClipRef, Format, GeneratedClip, PreferenceKind, PreferenceSample, Provenance, Task, VideoContext};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PairingError {
    #[error("need at least {needed} clips, anchor has {available}")]
    InsufficientActions { needed: usize, available: usize },
    #[error("clip index {0} out of range")]
    BadIndex(usize),
    #[error("format {format} is not offered for {task}")]
    FormatNotForTask { task: Task, format: Format },
    #[error("invalid pairing configuration: {0}")]
    InvalidConfig(String),
}

/// One retained action of an anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub action_id: u32,
    pub caption: String,
}

/// Accepted clips of one anchor, sorted by `action_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSet {
    pub anchor_id: String,
    pub clips: Vec<ClipEntry>,
}

impl ClipSet {
    pub fn new(anchor_id: impl Into<String>, mut clips: Vec<ClipEntry>) -> Self {
        clips.sort_by_key(|c| c.action_id);
        clips.dedup_by_key(|c| c.action_id);
        ClipSet { anchor_id: anchor_id.into(), clips }
    }

    pub fn from_generated(anchor_id: impl Into<String>, clips: &[GeneratedClip]) -> Self {
        Self::new(
            anchor_id,
            clips.iter().map(|c| ClipEntry { action_id: c.action_id, caption: c.caption.clone() }).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    fn caption_of(&self, action_id: u32) -> &str {
        &self.clips.iter().find(|c| c.action_id == action_id).expect("action in clip set").caption
    }

    fn require(&self, needed: usize) -> Result<(), PairingError> {
        if self.clips.len() < needed {
            Err(PairingError::InsufficientActions { needed, available: self.clips.len() })
        } else {
            Ok(())
        }
    }
}

/// Question paraphrases sampled per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionBank {
    pub action: Vec<String>,
    pub sequence: Vec<String>,
}

impl Default for QuestionBank {
    fn default() -> Self {
        QuestionBank {
            action: [
                "What action is shown?",
                "What action is being performed in this video?",
                "What is happening in this video?",
                "Which action takes place in the video?",
                "Describe the action shown in the video.",
            ]
            .map(String::from)
            .to_vec(),
            sequence: [
                "In what order do the actions occur?",
                "What is the order of the actions shown in the video?",
                "List the actions in the order they happen.",
                "Which actions happen in this video, and in what order?",
                "Describe the sequence of actions in the video.",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    #[default]
    Anchor,
    Sample,
}

/// Held-out share matching 2,910 of 29,077 total samples.
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 2910.0 / 29077.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    pub vpref_ratio: f64,
    pub cells: Vec<(Task, Format)>,
    pub k_range: Vec<usize>,
    pub questions: QuestionBank,
    pub rng_seed: u64,
    pub holdout_fraction: f64,
    pub split_unit: SplitUnit,
    /// Captions replaced in a temporal textual negative.
    pub caption_swaps: usize,
    /// Total sample count to aim for; `None` uses every (anchor, clip) once per cell.
    pub target_samples: Option<usize>,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            vpref_ratio: 0.7,
            cells: all_cells(),
            k_range: vec![2, 3],
            questions: QuestionBank::default(),
            rng_seed: 0,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            split_unit: SplitUnit::Anchor,
            caption_swaps: 1,
            target_samples: None,
        }
    }
}

/// The six (task, format) cells in reporting order.
pub fn all_cells() -> Vec<(Task, Format)> {
    Task::ALL.iter().flat_map(|&t| t.formats().iter().map(move |&f| (t, f))).collect()
}

impl PairingConfig {
    pub fn validate(&self) -> Result<(), PairingError> {
        let bad = |m: String| Err(PairingError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.vpref_ratio) {
            return bad(format!("vpref_ratio {} not in [0, 1]", self.vpref_ratio));
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} not in [0, 1]", self.holdout_fraction));
        }
        if self.k_range.is_empty() || self.k_range.iter().any(|&k| k < 2) {
            return bad("k_range must be non-empty with every k >= 2".into());
        }
        if self.cells.is_empty() {
            return bad("no (task, format) cells enabled".into());
        }
        for &(task, format) in &self.cells {
            if !task.formats().contains(&format) {
                return Err(PairingError::FormatNotForTask { task, format });
            }
        }
        if self.questions.action.is_empty() || self.questions.sequence.is_empty() {
            return bad("question banks must be non-empty".into());
        }
        if self.caption_swaps == 0 {
            return bad("caption_swaps must be >= 1".into());
        }
        Ok(())
    }
}

const BC_YES: &str = "yes";
const BC_NO: &str = "no";

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn render_numbered(captions: &[&str]) -> String {
    captions.iter().enumerate().map(|(i, c)| format!("{}. {}", i + 1, c)).collect::<Vec<_>>().join("\n")
}

fn render_indices(idx: &[usize]) -> String {
    idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

fn single_clip_sample(
    clips: &ClipSet,
    kind: PreferenceKind,
    format: Format,
    question: String,
    chosen_ctx: VideoContext,
    rejected_ctx: Option<VideoContext>,
    chosen_answer: String,
    rejected_answer: Option<String>,
    action_ids: Vec<u32>,
    option_order: Option<Vec<u32>>,
) -> PreferenceSample {
    PreferenceSample {
        sample_id: String::new(),
        kind,
        task: Task::ActionRecognition,
        format,
        question,
        chosen_context: chosen_ctx,
        rejected_context: rejected_ctx,
        chosen_answer,
        rejected_answer,
        provenance: Provenance { anchor_id: clips.anchor_id.clone(), action_ids, permutation: None, option_order },
    }
    .with_computed_id()
}

fn other_index(n: usize, i: usize, rng: &mut impl Rng) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Multiple-choice options are lettered A to Z.
pub const MAX_MC_OPTIONS: usize = 26;

fn check_format(task: Task, format: Format) -> Result<(), PairingError> {
    if task.formats().contains(&format) {
        Ok(())
    } else {
        Err(PairingError::FormatNotForTask { task, format })
    }
}

/// Multiple-choice listing of every caption of the anchor in shuffled order.
fn mc_options(clips: &ClipSet, rng: &mut impl Rng) -> Result<(Vec<u32>, String), PairingError> {
    if clips.len() > MAX_MC_OPTIONS {
        return Err(PairingError::InvalidConfig(format!(
            "{} clips exceed the {MAX_MC_OPTIONS} lettered multiple-choice options",
            clips.len()
        )));
    }
    let mut order: Vec<u32> = clips.clips.iter().map(|c| c.action_id).collect();
    order.shuffle(rng);
    let listing = order
        .iter()
        .enumerate()
        .map(|(k, &a)| format!("({}) {}", letter(k), clips.caption_of(a)))
        .collect::<Vec<_>>()
        .join("\n");
    Ok((order, listing))
}

fn mc_letter(order: &[u32], action_id: u32) -> String {
    letter(order.iter().position(|&a| a == action_id).expect("option listed")).to_string()
}

fn mc_question(base: &str, listing: &str) -> String {
    format!("{base}\nOptions:\n{listing}\nAnswer with the letter of the correct option.")
}

fn bc_action_question(candidate: &str) -> String {
    format!("Does this video show the following action: \"{candidate}\"? Answer yes or no.")
}

/// Textual negative for clip `i`: same video, a caption of another clip `j`.
pub fn build_actrec_tpref(
    clips: &ClipSet,
    i: usize,
    format: Format,
    questions: &QuestionBank,
    rng: &mut impl Rng,
) -> Result<PreferenceSample, PairingError> {
    clips.require(2)?;
    check_format(Task::ActionRecognition, format)?;
    let n = clips.len();
    if i >= n {
        return Err(PairingError::BadIndex(i));
    }
    let j = other_index(n, i, rng);
    let (ci, cj) = (&clips.clips[i], &clips.clips[j]);
    let base = questions.action.choose(rng).expect("non-empty bank").clone();
    let ctx = VideoContext::single(&clips.anchor_id, ci.action_id);
    let ids = vec![ci.action_id, cj.action_id];
    let s = match format {
        Format::FreeForm => single_clip_sample(
            clips,
            PreferenceKind::TPref,
            format,
            base,
            ctx,
            None,
            ci.caption.clone(),
            Some(cj.caption.clone()),
            ids,
            None,
        ),
        Format::MultipleChoice => {
            let (order, listing) = mc_options(clips, rng)?;
            single_clip_sample(
                clips,
                PreferenceKind::TPref,
                format,
                mc_question(&base, &listing),
                ctx,
                None,
                mc_letter(&order, ci.action_id),
                Some(mc_letter(&order, cj.action_id)),
                ids,
                Some(order),
            )
        }
        Format::BinaryChoice => {
            let show_true = rng.random_bool(0.5);
            let (candidate, chosen, rejected) =
                if show_true { (&ci.caption, BC_YES, BC_NO) } else { (&cj.caption, BC_NO, BC_YES) };
            single_clip_sample(
                clips,
                PreferenceKind::TPref,
                format,
                bc_action_question(candidate),
                ctx,
                None,
                chosen.into(),
                Some(rejected.into()),
                ids,
                None,
            )
        }
        Format::OrderList => unreachable!("checked above"),
    };
    Ok(s)
}

/// Visual negative for clip `i`: same question and answer, video of clip `j`.
pub fn build_actrec_vpref(
    clips: &ClipSet,
    i: usize,
    format: Format,
    questions: &QuestionBank,
    rng: &mut impl Rng,
) -> Result<PreferenceSample, PairingError> {
    clips.require(2)?;
    check_format(Task::ActionRecognition, format)?;
    let n = clips.len();
    if i >= n {
        return Err(PairingError::BadIndex(i));
    }
    let j = other_index(n, i, rng);
    let (ci, cj) = (&clips.clips[i], &clips.clips[j]);
    let base = questions.action.choose(rng).expect("non-empty bank").clone();
    let chosen_ctx = VideoContext::single(&clips.anchor_id, ci.action_id);
    let rejected_ctx = Some(VideoContext::single(&clips.anchor_id, cj.action_id));
    let ids = vec![ci.action_id, cj.action_id];
    let s = match format {
        Format::FreeForm => single_clip_sample(
            clips,
            PreferenceKind::VPref,
            format,
            base,
            chosen_ctx,
            rejected_ctx,
            ci.caption.clone(),
            None,
            ids,
            None,
        ),
        Format::MultipleChoice => {
            let (order, listing) = mc_options(clips, rng)?;
            single_clip_sample(
                clips,
                PreferenceKind::VPref,
                format,
                mc_question(&base, &listing),
                chosen_ctx,
                rejected_ctx,
                mc_letter(&order, ci.action_id),
                None,
                ids,
                Some(order),
            )
        }
        Format::BinaryChoice => single_clip_sample(
            clips,
            PreferenceKind::VPref,
            format,
            bc_action_question(&ci.caption),
            chosen_ctx,
            rejected_ctx,
            BC_YES.into(),
            None,
            ids,
            None,
        ),
        Format::OrderList => unreachable!("checked above"),
    };
    Ok(s)
}

/// Uniform draw from the `k! - 1` non-identity permutations of `0..k`.
pub fn non_identity_permutation(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(k >= 2, "no non-identity permutation of fewer than two items");
    let identity: Vec<usize> = (0..k).collect();
    loop {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity {
            return p;
        }
    }
}

/// Ordered positive sequence and its permuted negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub anchor_id: String,
    /// Actions in canonical (ascending id) order.
    pub actions: Vec<u32>,
    /// `s_minus[p] = s_plus[permutation[p]]`.
    pub permutation: Vec<usize>,
    pub s_plus: VideoContext,
    pub s_minus: VideoContext,
}

/// Samples `k` distinct actions and a non-identity reordering of them.
pub fn build_sequence(clips: &ClipSet, k: usize, rng: &mut impl Rng) -> Result<SequencePair, PairingError> {
    if k < 2 {
        return Err(PairingError::InvalidConfig(format!("sequence length {k} < 2")));
    }
    clips.require(k)?;
    let mut picked: Vec<u32> =
        index::sample(rng, clips.len(), k).into_iter().map(|i| clips.clips[i].action_id).collect();
    picked.sort_unstable();
    let permutation = non_identity_permutation(k, rng);
    let minus: Vec<u32> = permutation.iter().map(|&p| picked[p]).collect();
    Ok(SequencePair {
        anchor_id: clips.anchor_id.clone(),
        s_plus: VideoContext::sequence(&clips.anchor_id, &picked),
        s_minus: VideoContext::sequence(&clips.anchor_id, &minus),
        actions: picked,
        permutation,
    })
}

/// Caption list of the sequence with some captions replaced by unused ones
/// from the same anchor, or a non-identity reordering when none are unused.
/// Returns the hallucinated list, the swapped-in action ids and the
/// permutation used by the fallback.
fn hallucinated_captions<'a>(
    clips: &'a ClipSet,
    seq: &SequencePair,
    swaps: usize,
    rng: &mut impl Rng,
) -> (Vec<&'a str>, Vec<u32>, Option<Vec<usize>>) {
    let mut captions: Vec<&str> = seq.actions.iter().map(|&a| clips.caption_of(a)).collect();
    let used: BTreeSet<u32> = seq.actions.iter().copied().collect();
    let unused: Vec<&ClipEntry> = clips.clips.iter().filter(|c| !used.contains(&c.action_id)).collect();
    if unused.is_empty() {
        let p = non_identity_permutation(captions.len(), rng);
        let permuted = p.iter().map(|&i| captions[i]).collect();
        return (permuted, Vec::new(), Some(p));
    }
    let n = swaps.min(unused.len()).min(captions.len());
    let positions = index::sample(rng, captions.len(), n).into_vec();
    let replacements = index::sample(rng, unused.len(), n).into_vec();
    let mut swapped_in = Vec::with_capacity(n);
    for (pos, rep) in positions.into_iter().zip(replacements) {
        captions[pos] = &unused[rep].caption;
        swapped_in.push(unused[rep].action_id);
    }
    (captions, swapped_in, None)
}

fn bc_sequence_question(captions: &[&str]) -> String {
    format!("Does the video show these actions in this order?\n{}\nAnswer yes or no.", render_numbered(captions))
}

fn ol_question(base: &str, listing: &str) -> String {
    format!("{base}\nActions:\n{listing}\nAnswer with the action numbers in the order they occur, separated by commas.")
}

/// OL options: the sequence's captions in shuffled order.
fn ol_options(clips: &ClipSet, seq: &SequencePair, rng: &mut impl Rng) -> (Vec<u32>, String, Vec<usize>) {
    let mut order = seq.actions.clone();
    order.shuffle(rng);
    let listing = render_numbered(&order.iter().map(|&a| clips.caption_of(a)).collect::<Vec<_>>());
    let answer = seq.actions.iter().map(|a| order.iter().position(|o| o == a).unwrap() + 1).collect();
    (order, listing, answer)
}

fn temporal_sample(
    seq: &SequencePair,
    kind: PreferenceKind,
    format: Format,
    question: String,
    chosen_answer: String,
    rejected_answer: Option<String>,
    extra_actions: Vec<u32>,
    permutation: Option<Vec<usize>>,
    option_order: Option<Vec<u32>>,
) -> PreferenceSample {
    let rejected_context = (kind == PreferenceKind::VPref).then(|| seq.s_minus.clone());
    let mut action_ids = seq.actions.clone();
    action_ids.extend(extra_actions);
    PreferenceSample {
        sample_id: String::new(),
        kind,
        task: Task::TemporalOrdering,
        format,
        question,
        chosen_context: seq.s_plus.clone(),
        rejected_context,
        chosen_answer,
        rejected_answer,
        provenance: Provenance { anchor_id: seq.anchor_id.clone(), action_ids, permutation, option_order },
    }
    .with_computed_id()
}

/// Textual negative for a sequence: same video, hallucinated action list.
pub fn build_temporal_tpref(
    clips: &ClipSet,
    seq: &SequencePair,
    format: Format,
    questions: &QuestionBank,
    caption_swaps: usize,
    rng: &mut impl Rng,
) -> Result<PreferenceSample, PairingError> {
    check_format(Task::TemporalOrdering, format)?;
    let base = questions.sequence.choose(rng).expect("non-empty bank").clone();
    let truth: Vec<&str> = seq.actions.iter().map(|&a| clips.caption_of(a)).collect();
    let s = match format {
        Format::FreeForm => {
            let (fake, swapped, perm) = hallucinated_captions(clips, seq, caption_swaps, rng);
            temporal_sample(
                seq,
                PreferenceKind::TPref,
                format,
                base,
                render_numbered(&truth),
                Some(render_numbered(&fake)),
                swapped,
                perm,
                None,
            )
        }
        Format::OrderList => {
            let (order, listing, answer) = ol_options(clips, seq, rng);
            let p = non_identity_permutation(answer.len(), rng);
            let wrong: Vec<usize> = p.iter().map(|&i| answer[i]).collect();
            temporal_sample(
                seq,
                PreferenceKind::TPref,
                format,
                ol_question(&base, &listing),
                render_indices(&answer),
                Some(render_indices(&wrong)),
                Vec::new(),
                Some(p),
                Some(order),
            )
        }
        Format::BinaryChoice => {
            let (fake, swapped, perm) = hallucinated_captions(clips, seq, caption_swaps, rng);
            let show_true = rng.random_bool(0.5);
            let (shown, chosen, rejected) = if show_true { (&truth, BC_YES, BC_NO) } else { (&fake, BC_NO, BC_YES) };
            temporal_sample(
                seq,
                PreferenceKind::TPref,
                format,
                bc_sequence_question(shown),
                chosen.into(),
                Some(rejected.into()),
                swapped,
                perm,
                None,
            )
        }
        Format::MultipleChoice => unreachable!("checked above"),
    };
    Ok(s)
}

/// Visual negative for a sequence: same question and answer, permuted video.
pub fn build_temporal_vpref(
    clips: &ClipSet,
    seq: &SequencePair,
    format: Format,
    questions: &QuestionBank,
    rng: &mut impl Rng,
) -> Result<PreferenceSample, PairingError> {
    check_format(Task::TemporalOrdering, format)?;
    let base = questions.sequence.choose(rng).expect("non-empty bank").clone();
    let truth: Vec<&str> = seq.actions.iter().map(|&a| clips.caption_of(a)).collect();
    let perm = Some(seq.permutation.clone());
    let s = match format {
        Format::FreeForm => temporal_sample(
            seq,
            PreferenceKind::VPref,
            format,
            base,
            render_numbered(&truth),
            None,
            Vec::new(),
            perm,
            None,
        ),
        Format::OrderList => {
            let (order, listing, answer) = ol_options(clips, seq, rng);
            temporal_sample(
                seq,
                PreferenceKind::VPref,
                format,
                ol_question(&base, &listing),
                render_indices(&answer),
                None,
                Vec::new(),
                perm,
                Some(order),
            )
        }
        Format::BinaryChoice => temporal_sample(
            seq,
            PreferenceKind::VPref,
            format,
            bc_sequence_question(&truth),
            BC_YES.into(),
            None,
            Vec::new(),
            perm,
            None,
        ),
        Format::MultipleChoice => unreachable!("checked above"),
    };
    Ok(s)
}

/// Counts per cell that could not be filled with distinct samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub eligible_anchors: usize,
    pub skipped_anchors: Vec<String>,
    pub shortfall: BTreeMap<String, usize>,
    pub duplicates_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct PairingOutcome {
    pub manifest: DatasetManifest,
    pub report: PairingReport,
}

/// Largest-remainder apportionment of `total` proportional to `weights`.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| ((total * w) % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(missing) {
        out[i] += 1;
    }
    out
}

const MAX_DRAWS_PER_SAMPLE: usize = 8;

/// Builds the full manifest: stratified per (task, format) cell with an exact
/// per-cell visual/textual split, then a train/holdout split.
pub fn assemble_dataset(anchors: &[ClipSet], config: &PairingConfig) -> Result<PairingOutcome, PairingError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut report = PairingReport::default();
    let mut sorted: Vec<&ClipSet> = anchors.iter().collect();
    sorted.sort_by(|a, b| a.anchor_id.cmp(&b.anchor_id));
    let eligible: Vec<&ClipSet> = sorted
        .into_iter()
        .filter(|a| {
            let ok = a.len() >= 2;
            if !ok {
                report.skipped_anchors.push(a.anchor_id.clone());
            }
            ok
        })
        .collect();
    report.eligible_anchors = eligible.len();
    let mut manifest = DatasetManifest::new();
    if eligible.is_empty() {
        tracing::warn!("no anchor has two or more accepted clips; manifest is empty");
        return Ok(PairingOutcome { manifest, report });
    }

    // Units are (anchor, clip) pairs; temporal units use the clip only to
    // weight anchors by their clip count.
    let units: Vec<(usize, usize)> =
        eligible.iter().enumerate().flat_map(|(a, cs)| (0..cs.len()).map(move |i| (a, i))).collect();
    let cell_totals = match config.target_samples {
        Some(t) => apportion(t, &vec![1; config.cells.len()]),
        None => vec![units.len(); config.cells.len()],
    };
    let grand: usize = cell_totals.iter().sum();
    let v_total = (grand as f64 * config.vpref_ratio).round() as usize;
    let cell_v = apportion(v_total, &cell_totals);

    let mut seen: HashSet<String> = HashSet::new();
    for (c, &(task, format)) in config.cells.iter().enumerate() {
        let quota = cell_totals[c];
        let mut plan: Vec<(usize, usize)> = Vec::with_capacity(quota);
        while plan.len() < quota {
            let mut cycle = units.clone();
            cycle.shuffle(&mut rng);
            let take = (quota - plan.len()).min(cycle.len());
            plan.extend_from_slice(&cycle[..take]);
        }
        let mut kinds: Vec<PreferenceKind> =
            (0..quota).map(|n| if n < cell_v[c] { PreferenceKind::VPref } else { PreferenceKind::TPref }).collect();
        kinds.shuffle(&mut rng);

        let mut missing = 0usize;
        for (&(a, i), kind) in plan.iter().zip(kinds) {
            let clips = eligible[a];
            let mut placed = false;
            for _ in 0..MAX_DRAWS_PER_SAMPLE {
                let s = draw_sample(clips, i, task, format, kind, config, &mut rng)?;
                let Some(s) = s else { break };
                if seen.insert(s.sample_id.clone()) {
                    manifest.push(s, Split::Train).expect("id checked unique");
                    placed = true;
                    break;
                }
                report.duplicates_skipped += 1;
            }
            if !placed {
                missing += 1;
            }
        }
        if missing > 0 {
            tracing::warn!(%task, %format, missing, "cell quota not met");
            report.shortfall.insert(format!("{}/{}", task.as_str(), format.as_str()), missing);
        }
    }

    assign_split(&mut manifest, config, &mut rng);
    Ok(PairingOutcome { manifest, report })
}

fn draw_sample(
    clips: &ClipSet,
    i: usize,
    task: Task,
    format: Format,
    kind: PreferenceKind,
    config: &PairingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<PreferenceSample>, PairingError> {
    let q = &config.questions;
    match task {
        Task::ActionRecognition => match kind {
            PreferenceKind::TPref => build_actrec_tpref(clips, i, format, q, rng).map(Some),
            PreferenceKind::VPref => build_actrec_vpref(clips, i, format, q, rng).map(Some),
        },
        Task::TemporalOrdering => {
            let ks: Vec<usize> = config.k_range.iter().copied().filter(|&k| k <= clips.len()).collect();
            let Some(&k) = ks.choose(rng) else { return Ok(None) };
            let seq = build_sequence(clips, k, rng)?;
            match kind {
                PreferenceKind::TPref => {
                    build_temporal_tpref(clips, &seq, format, q, config.caption_swaps, rng).map(Some)
                }
                PreferenceKind::VPref => build_temporal_vpref(clips, &seq, format, q, rng).map(Some),
            }
        }
    }
}

fn assign_split(manifest: &mut DatasetManifest, config: &PairingConfig, rng: &mut ChaCha8Rng) {
    let mut split = BTreeMap::new();
    match config.split_unit {
        SplitUnit::Anchor => {
            let anchors: BTreeSet<&str> = manifest.samples().iter().map(|s| s.provenance.anchor_id.as_str()).collect();
            let mut anchors: Vec<&str> = anchors.into_iter().collect();
            anchors.shuffle(rng);
            let n_hold = (anchors.len() as f64 * config.holdout_fraction).round() as usize;
            let held: HashSet<&str> = anchors[..n_hold].iter().copied().collect();
            for s in manifest.samples() {
                let side = if held.contains(s.provenance.anchor_id.as_str()) { Split::Holdout } else { Split::Train };
                split.insert(s.sample_id.clone(), side);
            }
        }
        SplitUnit::Sample => {
            let mut ids: Vec<&str> = manifest.samples().iter().map(|s| s.sample_id.as_str()).collect();
            ids.shuffle(rng);
            let n_hold = (ids.len() as f64 * config.holdout_fraction).round() as usize;
            for (n, id) in ids.into_iter().enumerate() {
                split.insert(id.to_string(), if n < n_hold { Split::Holdout } else { Split::Train });
            }
        }
    }
    manifest.split = split;
}

/// Clip references of a sample that point at a different anchor; empty for
/// well-formed samples.
pub fn foreign_clips(s: &PreferenceSample) -> Vec<&ClipRef> {
    s.chosen_context
        .clip_sequence
        .iter()
        .chain(s.rejected_context.iter().flat_map(|c| c.clip_sequence.iter()))
        .filter(|c| c.anchor_id != s.provenance.anchor_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_sample;

    fn clip_set(n: u32) -> ClipSet {
        ClipSet::new("anc", (0..n).map(|i| ClipEntry { action_id: i, caption: format!("C{i}") }).collect())
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn two_clips_force_the_negative() {
        let cs = clip_set(2);
        let q = QuestionBank::default();
        let s = build_actrec_tpref(&cs, 0, Format::FreeForm, &q, &mut rng(1)).unwrap();
        assert_eq!(s.chosen_answer, "C0");
        assert_eq!(s.rejected_answer.as_deref(), Some("C1"));
        let v = build_actrec_vpref(&cs, 1, Format::FreeForm, &q, &mut rng(1)).unwrap();
        assert_eq!(v.rejected_context, Some(VideoContext::single("anc", 0)));
        assert_eq!(v.chosen_answer, "C1");
        assert!(validate_sample(&v).is_empty());
    }

    #[test]
    fn one_clip_is_insufficient() {
        let cs = clip_set(1);
        let err = build_actrec_tpref(&cs, 0, Format::FreeForm, &QuestionBank::default(), &mut rng(0)).unwrap_err();
        assert_eq!(err, PairingError::InsufficientActions { needed: 2, available: 1 });
    }

    #[test]
    fn order_list_rejected_for_action_recognition() {
        let cs = clip_set(3);
        let err = build_actrec_vpref(&cs, 0, Format::OrderList, &QuestionBank::default(), &mut rng(0)).unwrap_err();
        assert!(matches!(err, PairingError::FormatNotForTask { .. }));
    }

    #[test]
    fn k2_sequence_negative_is_the_swap() {
        let cs = clip_set(2);
        for seed in 0..20 {
            let seq = build_sequence(&cs, 2, &mut rng(seed)).unwrap();
            assert_eq!(seq.s_plus.action_ids(), vec![0, 1]);
            assert_eq!(seq.s_minus.action_ids(), vec![1, 0]);
            assert_eq!(seq.permutation, vec![1, 0]);
        }
    }

    #[test]
    fn temporal_tpref_swaps_in_unused_caption() {
        let cs = clip_set(3);
        let seq = SequencePair {
            anchor_id: "anc".into(),
            actions: vec![0, 1],
            permutation: vec![1, 0],
            s_plus: VideoContext::sequence("anc", &[0, 1]),
            s_minus: VideoContext::sequence("anc", &[1, 0]),
        };
        let s = build_temporal_tpref(&cs, &seq, Format::FreeForm, &QuestionBank::default(), 1, &mut rng(4)).unwrap();
        assert_eq!(s.chosen_answer, "1. C0\n2. C1");
        let rej = s.rejected_answer.clone().unwrap();
        assert!(rej == "1. C2\n2. C1" || rej == "1. C0\n2. C2", "{rej}");
        assert_eq!(s.provenance.action_ids, vec![0, 1, 2]);
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn temporal_tpref_falls_back_to_permutation() {
        let cs = clip_set(2);
        let seq = build_sequence(&cs, 2, &mut rng(0)).unwrap();
        let s = build_temporal_tpref(&cs, &seq, Format::FreeForm, &QuestionBank::default(), 1, &mut rng(0)).unwrap();
        assert_eq!(s.rejected_answer.as_deref(), Some("1. C1\n2. C0"));
        assert_eq!(s.provenance.permutation, Some(vec![1, 0]));
    }

    #[test]
    fn order_list_answer_indexes_displayed_options() {
        let cs = clip_set(3);
        let seq = build_sequence(&cs, 3, &mut rng(2)).unwrap();
        let s = build_temporal_vpref(&cs, &seq, Format::OrderList, &QuestionBank::default(), &mut rng(9)).unwrap();
        let order = s.provenance.option_order.clone().unwrap();
        let expected: Vec<String> =
            [0u32, 1, 2].iter().map(|a| (order.iter().position(|o| o == a).unwrap() + 1).to_string()).collect();
        assert_eq!(s.chosen_answer, expected.join(", "));
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn binary_choice_vpref_answers_yes() {
        let cs = clip_set(3);
        let seq = build_sequence(&cs, 2, &mut rng(3)).unwrap();
        let s = build_temporal_vpref(&cs, &seq, Format::BinaryChoice, &QuestionBank::default(), &mut rng(3)).unwrap();
        assert_eq!(s.chosen_answer, "yes");
        assert!(s.question.contains("1. C"));
    }

    #[test]
    fn apportion_largest_remainder() {
        assert_eq!(apportion(1000, &[1; 6]), vec![167, 167, 167, 167, 166, 166]);
        assert_eq!(apportion(700, &[167, 167, 167, 167, 166, 166]).iter().sum::<usize>(), 700);
        assert_eq!(apportion(5, &[0, 0]), vec![0, 0]);
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let out = assemble_dataset(&[clip_set(1)], &PairingConfig::default()).unwrap();
        assert!(out.manifest.is_empty());
        assert_eq!(out.report.skipped_anchors, vec!["anc".to_string()]);
    }

    #[test]
    fn config_validation() {
        let mut c = PairingConfig { vpref_ratio: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        c.vpref_ratio = 0.7;
        c.k_range = vec![1];
        assert!(c.validate().is_err());
        c.k_range = vec![2];
        c.cells = vec![(Task::TemporalOrdering, Format::MultipleChoice)];
        assert!(c.validate().is_err());
    }
}
