//! Client layer for the five generative capabilities.
//!
//! Every capability is a trait with one HTTP implementation ([`http`]) and one
//! deterministic in-process implementation ([`mock`]). Both speak the same
//! request and response types defined in [`wire`].

pub mod http;
pub mod mock;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use wire::{
    ChatRequest, Crop, EditRequest, EditResponse, EmbedImageRequest, EmbedTextRequest, JobTag, SynthesizeRequest,
    SynthesizeResponse,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Embedding,
    ProposerLlm,
    ImageEditor,
    VideoSynthesizer,
    JudgeLlm,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 5] = [
        ProviderKind::Embedding,
        ProviderKind::ProposerLlm,
        ProviderKind::ImageEditor,
        ProviderKind::VideoSynthesizer,
        ProviderKind::JudgeLlm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Embedding => "embedding",
            ProviderKind::ProposerLlm => "proposer_llm",
            ProviderKind::ImageEditor => "image_editor",
            ProviderKind::VideoSynthesizer => "video_synthesizer",
            ProviderKind::JudgeLlm => "judge_llm",
        }
    }

    /// Upper-case segment used in `FORGE_<KIND>_ENDPOINT` / `FORGE_<KIND>_TOKEN`.
    pub fn env_segment(self) -> String {
        self.as_str().to_ascii_uppercase()
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("provider rejected the request with status {status}: {body}")]
    RemoteRejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("local media error: {0}")]
    Media(String),
}

impl ProviderError {
    /// Invalid response payloads surface as a rejection with status 0.
    pub fn invalid_response(detail: impl fmt::Display) -> Self {
        ProviderError::RemoteRejected { status: 0, body: format!("invalid response: {detail}") }
    }

    /// Whether re-running the job later can plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Timeout | ProviderError::Exhausted { .. })
    }
}

pub type ProviderResult<T> = Result<T, ProviderError>;

#[async_trait]
pub trait Embedder: Send + Sync {
    async fn embed_text(&self, req: &EmbedTextRequest) -> ProviderResult<Vec<f64>>;
    async fn embed_image(&self, req: &EmbedImageRequest) -> ProviderResult<Vec<f64>>;
}

#[async_trait]
pub trait Llm: Send + Sync {
    async fn chat(&self, req: &ChatRequest) -> ProviderResult<String>;
}

#[async_trait]
pub trait ImageEditor: Send + Sync {
    async fn edit(&self, req: &EditRequest) -> ProviderResult<EditResponse>;
}

#[async_trait]
pub trait VideoSynthesizer: Send + Sync {
    async fn synthesize(&self, req: &SynthesizeRequest) -> ProviderResult<SynthesizeResponse>;
}

/// One bound provider per pipeline stage.
#[derive(Clone)]
pub struct ProviderSet {
    pub embedder: Arc<dyn Embedder>,
    pub proposer: Arc<dyn Llm>,
    pub editor: Arc<dyn ImageEditor>,
    pub synthesizer: Arc<dyn VideoSynthesizer>,
    pub judge: Arc<dyn Llm>,
}
