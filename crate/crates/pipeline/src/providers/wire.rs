//! Version 1 request and response bodies shared by HTTP clients and mocks.
//!
//! Media travels by reference: every locator is a path relative to the data
//! root that both the pipeline and the provider can read.

use serde::{Deserialize, Serialize};

use super::ProviderError;

pub const EMBED_TEXT_PATH: &str = "/v1/embed/text";
pub const EMBED_IMAGE_PATH: &str = "/v1/embed/image";
pub const CHAT_PATH: &str = "/v1/chat";
pub const EDIT_PATH: &str = "/v1/edit";
pub const SYNTHESIZE_PATH: &str = "/v1/synthesize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

/// Pixel rectangle of the source image to embed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub image: String,
    pub crop: Crop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    /// Image locators attached to the prompt, in order.
    pub images: Vec<String>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Deterministic decoding, as used for every proposer and judge call.
    pub fn new(prompt: impl Into<String>, images: Vec<String>) -> Self {
        ChatRequest { prompt: prompt.into(), images, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

/// Identifies the generation job a media request belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobTag {
    pub anchor_id: String,
    pub action_id: u32,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub source: String,
    pub instruction: String,
    /// Locator the provider must write the edited frame to.
    pub output: String,
    pub job: JobTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeRequest {
    pub start_frame: String,
    pub end_frame: String,
    pub caption: String,
    pub output: String,
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
    pub fps: u32,
    pub job: JobTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeResponse {
    pub video: String,
    pub frame_count: u32,
    pub fps: u32,
    pub width: u32,
    pub height: u32,
}

/// Schema checks applied to every response before it leaves the client.
pub trait Validate {
    fn validate(&self) -> Result<(), ProviderError>;
}

impl Validate for EmbeddingResponse {
    fn validate(&self) -> Result<(), ProviderError> {
        if self.embedding.is_empty() {
            return Err(ProviderError::invalid_response("empty embedding"));
        }
        if self.embedding.iter().any(|x| !x.is_finite()) {
            return Err(ProviderError::invalid_response("non-finite embedding component"));
        }
        Ok(())
    }
}

impl Validate for ChatResponse {
    fn validate(&self) -> Result<(), ProviderError> {
        Ok(())
    }
}

impl Validate for EditResponse {
    fn validate(&self) -> Result<(), ProviderError> {
        if self.image.trim().is_empty() {
            return Err(ProviderError::invalid_response("empty image locator"));
        }
        Ok(())
    }
}

impl Validate for SynthesizeResponse {
    fn validate(&self) -> Result<(), ProviderError> {
        if self.video.trim().is_empty() {
            return Err(ProviderError::invalid_response("empty video locator"));
        }
        if self.frame_count == 0 || self.fps == 0 || self.width == 0 || self.height == 0 {
            return Err(ProviderError::invalid_response("zero frame count, fps or resolution"));
        }
        Ok(())
    }
}
