//! Deterministic in-process providers.
//!
//! Every response is a pure function of the seed and the request content, so a
//! run that is interrupted and resumed sees exactly the answers an
//! uninterrupted run would. Media providers write small JSON placeholder files
//! under the data root; their bytes identify the job that produced them.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatRequest, EditRequest, EditResponse, EmbedImageRequest, EmbedTextRequest, Embedder, ImageEditor, Llm,
    ProviderError, ProviderKind, ProviderResult, ProviderSet, SynthesizeRequest, SynthesizeResponse, VideoSynthesizer,
};

pub const MOCK_EMBEDDING_DIM: usize = 64;

/// Action captions the mock proposer draws from.
pub const MOCK_ACTION_VOCABULARY: [&str; 24] = [
    "the person waves a hand at the camera",
    "the person turns their head to look left",
    "the person picks up a cup from the table",
    "the door in the background swings open",
    "the person smiles broadly",
    "the person sits down on a nearby chair",
    "the person claps their hands together",
    "the lamp in the room switches off",
    "the person puts on a pair of sunglasses",
    "a ball rolls across the floor",
    "the person points toward the window",
    "the person drinks from a water bottle",
    "the person crosses their arms",
    "a book falls off the shelf",
    "the person takes a step backward",
    "the person scratches their head",
    "steam rises from a mug on the table",
    "the person raises both arms overhead",
    "the person nods in agreement",
    "a paper sheet blows off the desk",
    "the person wipes their forehead with a towel",
    "the curtains are pulled closed",
    "the person kneels down to tie a shoe",
    "the person opens an umbrella",
];

const REFINE_VERBS: [&str; 4] = ["REMOVE", "REPLACE", "MODIFY", "ADD"];

/// Decides whether the edited frame for `(anchor_id, action_id, attempt)` is accepted.
pub type EditScript = Arc<dyn Fn(&str, u32, u32) -> bool + Send + Sync>;
/// Decides whether the filter passes `(source_caption, action_id, action_caption)`.
pub type FilterScript = Arc<dyn Fn(&str, u32, &str) -> bool + Send + Sync>;

/// 64-bit seed derived from a domain tag and string parts.
pub fn mix_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Hash-seeded unit vector.
pub fn unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Call counts per capability, with optional crash injection.
#[derive(Debug, Default)]
pub struct CallCounters {
    counts: [AtomicU64; 5],
    total: AtomicU64,
    crash_after: Option<u64>,
}

impl CallCounters {
    fn slot(kind: ProviderKind) -> usize {
        match kind {
            ProviderKind::Embedding => 0,
            ProviderKind::ProposerLlm => 1,
            ProviderKind::ImageEditor => 2,
            ProviderKind::VideoSynthesizer => 3,
            ProviderKind::JudgeLlm => 4,
        }
    }

    fn record(&self, kind: ProviderKind) {
        let n = self.total.fetch_add(1, Ordering::SeqCst) + 1;
        if self.crash_after.is_some_and(|limit| n > limit) {
            eprintln!("mock providers: simulated crash at call {n}");
            std::process::abort();
        }
        self.counts[Self::slot(kind)].fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self, kind: ProviderKind) -> u64 {
        self.counts[Self::slot(kind)].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct MockEmbedder {
    seed: u64,
    counters: Arc<CallCounters>,
}

impl MockEmbedder {
    pub fn text_vector(seed: u64, text: &str) -> Vec<f64> {
        unit_vector(mix_seed(seed, &["text", text]), MOCK_EMBEDDING_DIM)
    }

    pub fn image_vector(seed: u64, image: &str, crop: &super::Crop) -> Vec<f64> {
        let c = format!("{},{},{},{}", crop.x, crop.y, crop.width, crop.height);
        unit_vector(mix_seed(seed, &["image", image, &c]), MOCK_EMBEDDING_DIM)
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    async fn embed_text(&self, req: &EmbedTextRequest) -> ProviderResult<Vec<f64>> {
        self.counters.record(ProviderKind::Embedding);
        Ok(Self::text_vector(self.seed, &req.text))
    }

    async fn embed_image(&self, req: &EmbedImageRequest) -> ProviderResult<Vec<f64>> {
        self.counters.record(ProviderKind::Embedding);
        Ok(Self::image_vector(self.seed, &req.image, &req.crop))
    }
}

/// Contents of a placeholder edited frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderFrame {
    pub anchor_id: String,
    pub action_id: u32,
    pub attempt: u32,
    pub source: String,
    pub instruction: String,
}

/// Contents of a placeholder video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderVideo {
    pub anchor_id: String,
    pub action_id: u32,
    pub attempt: u32,
    pub start_frame: String,
    pub end_frame: String,
    pub caption: String,
    pub frame_count: u32,
    pub fps: u32,
    pub width: u32,
    pub height: u32,
}

/// Scripted language model answering every prompt template the pipeline uses.
pub struct MockLlm {
    kind: ProviderKind,
    seed: u64,
    data_root: PathBuf,
    counters: Arc<CallCounters>,
    edit_script: EditScript,
    filter_script: FilterScript,
    canned: Mutex<VecDeque<String>>,
    prompts: Mutex<Vec<String>>,
}

impl MockLlm {
    /// Responses returned verbatim, in order, before any scripted behaviour.
    pub fn push_canned(&self, responses: impl IntoIterator<Item = impl Into<String>>) {
        let mut q = self.canned.lock().expect("mock lock");
        q.extend(responses.into_iter().map(Into::into));
    }

    /// Every prompt received so far.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("mock lock").clone()
    }

    fn respond(&self, req: &ChatRequest) -> ProviderResult<String> {
        let p = &req.prompt;
        if p.contains("Propose EXACTLY") {
            Ok(self.propose(p))
        } else if p.contains("PROPOSED ACTIONS:") {
            Ok(self.filter(p))
        } else if p.contains("CALL TEMPLATE") {
            let caption = last_field(p, "ACTION_CAPTION:").unwrap_or_default();
            let text = format!(
                "ADD clear visible evidence that {}. Keep everything else unchanged; no distortion.",
                caption.trim_end_matches('.')
            );
            Ok(serde_json::json!({ "edit_prompt": text }).to_string())
        } else if p.contains("ALL PREVIOUS FAILED PROMPTS") {
            Ok(self.refine(p))
        } else if p.contains("EDITING INSTRUCTION:") {
            self.judge_edit(req)
        } else if p.contains("REFERENCE ANSWER:") {
            let norm = |s: Option<String>| {
                s.unwrap_or_default()
                    .to_lowercase()
                    .chars()
                    .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                    .collect::<String>()
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let same = norm(last_field(p, "REFERENCE ANSWER:")) == norm(last_field(p, "CANDIDATE ANSWER:"));
            Ok(format!("EVALUATION: {}", if same { "YES" } else { "NO" }))
        } else {
            Err(ProviderError::RemoteRejected { status: 400, body: "mock llm: unrecognised prompt".into() })
        }
    }

    fn propose(&self, p: &str) -> String {
        let caption = last_field(p, "ORIGINAL CONTEXT (caption):").unwrap_or_default();
        let n: usize = p
            .split("Propose EXACTLY ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|t| t.parse().ok())
            .unwrap_or(0);
        let mut vocab: Vec<&str> = MOCK_ACTION_VOCABULARY.to_vec();
        vocab.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &["propose", &caption])));
        let actions: Vec<_> = vocab
            .iter()
            .cycle()
            .take(n)
            .enumerate()
            .map(|(i, c)| serde_json::json!({ "action_id": i, "action_caption": c }))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "actions": actions })).expect("json")
    }

    fn filter(&self, p: &str) -> String {
        let caption = last_field(p, "ORIGINAL VIDEO CONTEXT:").unwrap_or_default();
        let listed = last_field(p, "PROPOSED ACTIONS:").unwrap_or_default();
        let actions: Vec<serde_json::Value> = serde_json::from_str(&listed).unwrap_or_default();
        let mut body = String::from("{\n  \"evaluations\": [\n");
        for (k, a) in actions.iter().enumerate() {
            let id = a["action_id"].as_u64().unwrap_or(k as u64) as u32;
            let text = a["action_caption"].as_str().unwrap_or_default();
            let passed = (self.filter_script)(&caption, id, text);
            let issues = if passed { "None".to_string() } else { format!("\"{text}\" is not feasible in this scene") };
            if k > 0 {
                body.push_str(",\n");
            }
            body.push_str(&format!(
                "    {{\"action_id\": {id}, \"passed\": {}, \"uniqueness_check\": \"distinct action type\", \"similarity_issues\": {}}}",
                if passed { "True" } else { "False" },
                serde_json::Value::String(issues)
            ));
        }
        body.push_str("\n  ],\n  \"overall_assessment\": \"scripted\",\n  \"uniqueness_summary\": \"scripted\"\n}");
        body
    }

    fn refine(&self, p: &str) -> String {
        let outcome = last_field(p, "- DESIRED OUTCOME:").unwrap_or_default();
        let failed = p
            .split("ALL PREVIOUS FAILED PROMPTS:")
            .nth(1)
            .map(|rest| rest.lines().skip(1).take_while(|l| !l.trim().is_empty()).count())
            .unwrap_or(1)
            .max(1);
        let verb = REFINE_VERBS[(failed - 1) % REFINE_VERBS.len()];
        let outcome: Vec<&str> = outcome.trim_end_matches('.').split_whitespace().take(30).collect();
        format!(
            "{verb} the scene so that {} is unmistakable, variant {}; keep everything else unchanged with no distortion.",
            outcome.join(" ").replace(['.', '!', '?'], ""),
            failed + 1
        )
    }

    fn judge_edit(&self, req: &ChatRequest) -> ProviderResult<String> {
        let edited = req
            .images
            .get(1)
            .ok_or_else(|| ProviderError::RemoteRejected { status: 400, body: "judge needs two images".into() })?;
        let bytes = std::fs::read(self.data_root.join(edited))
            .map_err(|e| ProviderError::RemoteRejected { status: 400, body: format!("cannot read {edited}: {e}") })?;
        let frame: PlaceholderFrame = serde_json::from_slice(&bytes)
            .map_err(|e| ProviderError::RemoteRejected { status: 400, body: format!("not a frame {edited}: {e}") })?;
        if (self.edit_script)(&frame.anchor_id, frame.action_id, frame.attempt) {
            Ok("EVALUATION: YES".into())
        } else {
            Ok(format!("EVALUATION: NO\nEXPLANATION: attempt {} does not show the requested change", frame.attempt))
        }
    }
}

#[async_trait]
impl Llm for MockLlm {
    async fn chat(&self, req: &ChatRequest) -> ProviderResult<String> {
        self.counters.record(self.kind);
        self.prompts.lock().expect("mock lock").push(req.prompt.clone());
        if let Some(canned) = self.canned.lock().expect("mock lock").pop_front() {
            return Ok(canned);
        }
        self.respond(req)
    }
}

/// Value following the last line that starts with `label`.
fn last_field(prompt: &str, label: &str) -> Option<String> {
    prompt.lines().rev().find_map(|l| l.trim_start().strip_prefix(label)).map(|v| v.trim().to_string())
}

fn write_placeholder(root: &Path, locator: &str, value: &impl Serialize) -> ProviderResult<()> {
    let path = root.join(locator);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ProviderError::Media(format!("{}: {e}", dir.display())))?;
    }
    let bytes = serde_json::to_vec_pretty(value).expect("placeholder serializes");
    std::fs::write(&path, bytes).map_err(|e| ProviderError::Media(format!("{}: {e}", path.display())))
}

pub struct MockEditor {
    data_root: PathBuf,
    counters: Arc<CallCounters>,
}

#[async_trait]
impl ImageEditor for MockEditor {
    async fn edit(&self, req: &EditRequest) -> ProviderResult<EditResponse> {
        self.counters.record(ProviderKind::ImageEditor);
        let frame = PlaceholderFrame {
            anchor_id: req.job.anchor_id.clone(),
            action_id: req.job.action_id,
            attempt: req.job.attempt,
            source: req.source.clone(),
            instruction: req.instruction.clone(),
        };
        write_placeholder(&self.data_root, &req.output, &frame)?;
        Ok(EditResponse { image: req.output.clone() })
    }
}

pub struct MockSynthesizer {
    data_root: PathBuf,
    counters: Arc<CallCounters>,
}

#[async_trait]
impl VideoSynthesizer for MockSynthesizer {
    async fn synthesize(&self, req: &SynthesizeRequest) -> ProviderResult<SynthesizeResponse> {
        self.counters.record(ProviderKind::VideoSynthesizer);
        let video = PlaceholderVideo {
            anchor_id: req.job.anchor_id.clone(),
            action_id: req.job.action_id,
            attempt: req.job.attempt,
            start_frame: req.start_frame.clone(),
            end_frame: req.end_frame.clone(),
            caption: req.caption.clone(),
            frame_count: req.num_frames,
            fps: req.fps,
            width: req.width,
            height: req.height,
        };
        write_placeholder(&self.data_root, &req.output, &video)?;
        Ok(SynthesizeResponse {
            video: req.output.clone(),
            frame_count: req.num_frames,
            fps: req.fps,
            width: req.width,
            height: req.height,
        })
    }
}

/// All five mock providers sharing one seed, data root and call counter.
pub struct MockSuite {
    pub embedder: Arc<MockEmbedder>,
    pub proposer: Arc<MockLlm>,
    pub judge: Arc<MockLlm>,
    pub editor: Arc<MockEditor>,
    pub synthesizer: Arc<MockSynthesizer>,
    pub counters: Arc<CallCounters>,
}

/// Options for building a [`MockSuite`].
#[derive(Clone)]
pub struct MockOptions {
    pub seed: u64,
    pub data_root: PathBuf,
    pub edit_script: EditScript,
    pub filter_script: FilterScript,
    /// Abort the process when the total call count exceeds this value.
    pub crash_after: Option<u64>,
}

impl MockOptions {
    pub fn new(seed: u64, data_root: impl Into<PathBuf>) -> Self {
        MockOptions {
            seed,
            data_root: data_root.into(),
            edit_script: Arc::new(|_, _, _| true),
            filter_script: Arc::new(|_, _, _| true),
            crash_after: None,
        }
    }

    pub fn edit_script(mut self, f: impl Fn(&str, u32, u32) -> bool + Send + Sync + 'static) -> Self {
        self.edit_script = Arc::new(f);
        self
    }

    /// Accept exactly the attempts whose 1-based index maps to `true`;
    /// attempts past the end of `verdicts` are rejected.
    pub fn edit_verdicts(self, verdicts: Vec<bool>) -> Self {
        self.edit_script(move |_, _, attempt| verdicts.get(attempt as usize - 1).copied().unwrap_or(false))
    }

    pub fn filter_script(mut self, f: impl Fn(&str, u32, &str) -> bool + Send + Sync + 'static) -> Self {
        self.filter_script = Arc::new(f);
        self
    }

    pub fn crash_after(mut self, calls: Option<u64>) -> Self {
        self.crash_after = calls;
        self
    }
}

impl MockSuite {
    pub fn new(seed: u64, data_root: impl Into<PathBuf>) -> Self {
        Self::with_options(MockOptions::new(seed, data_root))
    }

    pub fn with_options(o: MockOptions) -> Self {
        let counters = Arc::new(CallCounters { crash_after: o.crash_after, ..Default::default() });
        let llm = |kind| MockLlm {
            kind,
            seed: o.seed,
            data_root: o.data_root.clone(),
            counters: counters.clone(),
            edit_script: o.edit_script.clone(),
            filter_script: o.filter_script.clone(),
            canned: Mutex::new(VecDeque::new()),
            prompts: Mutex::new(Vec::new()),
        };
        MockSuite {
            embedder: Arc::new(MockEmbedder { seed: o.seed, counters: counters.clone() }),
            proposer: Arc::new(llm(ProviderKind::ProposerLlm)),
            judge: Arc::new(llm(ProviderKind::JudgeLlm)),
            editor: Arc::new(MockEditor { data_root: o.data_root.clone(), counters: counters.clone() }),
            synthesizer: Arc::new(MockSynthesizer { data_root: o.data_root.clone(), counters: counters.clone() }),
            counters,
        }
    }

    pub fn provider_set(&self) -> ProviderSet {
        ProviderSet {
            embedder: self.embedder.clone(),
            proposer: self.proposer.clone(),
            editor: self.editor.clone(),
            synthesizer: self.synthesizer.clone(),
            judge: self.judge.clone(),
        }
    }

    pub fn calls(&self, kind: ProviderKind) -> u64 {
        self.counters.get(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_vectors_are_normalized_and_deterministic() {
        let a = MockEmbedder::text_vector(3, "a");
        assert_eq!(a, MockEmbedder::text_vector(3, "a"));
        assert_ne!(a, MockEmbedder::text_vector(4, "a"));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_separates_parts() {
        assert_ne!(mix_seed(0, &["ab", "c"]), mix_seed(0, &["a", "bc"]));
    }

    #[tokio::test]
    async fn embedder_counts_calls() {
        let s = MockSuite::new(1, "/nonexistent");
        let req = EmbedTextRequest { text: "a".into() };
        let v1 = s.embedder.embed_text(&req).await.unwrap();
        let v2 = s.embedder.embed_text(&req).await.unwrap();
        assert_eq!(v1, v2);
        assert_eq!(s.calls(ProviderKind::Embedding), 2);
        assert_eq!(s.calls(ProviderKind::JudgeLlm), 0);
    }

    #[tokio::test]
    async fn canned_responses_come_first() {
        let s = MockSuite::new(1, "/nonexistent");
        s.judge.push_canned(["first"]);
        let req = ChatRequest::new("REFERENCE ANSWER: a\nCANDIDATE ANSWER: a", vec![]);
        assert_eq!(s.judge.chat(&req).await.unwrap(), "first");
        assert_eq!(s.judge.chat(&req).await.unwrap(), "EVALUATION: YES");
    }
}
