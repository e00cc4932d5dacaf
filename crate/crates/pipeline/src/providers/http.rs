//! JSON-over-HTTP provider client.
//!
//! Each request carries an `Idempotency-Key` header derived from the endpoint
//! path and the canonical request body, so a server that honours the key
//! performs the side effect once no matter how many times the client retries.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use super::wire::{
    ChatResponse, EmbeddingResponse, Validate, CHAT_PATH, EDIT_PATH, EMBED_IMAGE_PATH, EMBED_TEXT_PATH, SYNTHESIZE_PATH,
};
use super::{
    ChatRequest, EditRequest, EditResponse, EmbedImageRequest, EmbedTextRequest, Embedder, ImageEditor, Llm,
    ProviderError, ProviderKind, ProviderResult, SynthesizeRequest, SynthesizeResponse, VideoSynthesizer,
};

pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_multiplier: f64,
    /// Concurrent in-flight requests allowed against this endpoint.
    pub permits: usize,
    /// Bearer token. Never read from config files, only from the environment.
    #[serde(skip)]
    pub token: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: String::new(),
            timeout_s: 300.0,
            max_retries: 3,
            backoff_initial_ms: 500,
            backoff_multiplier: 2.0,
            permits: 4,
            token: None,
        }
    }
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ProviderConfig { endpoint: endpoint.into(), ..Default::default() }
    }

    /// Overlays `FORGE_<KIND>_ENDPOINT` and `FORGE_<KIND>_TOKEN` when set.
    pub fn apply_env(&mut self, kind: ProviderKind, env: impl Fn(&str) -> Option<String>) {
        let seg = kind.env_segment();
        if let Some(endpoint) = env(&format!("FORGE_{seg}_ENDPOINT")) {
            self.endpoint = endpoint;
        }
        if let Some(token) = env(&format!("FORGE_{seg}_TOKEN")) {
            self.token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.endpoint.trim().is_empty() {
            return Err(ProviderError::Config("endpoint is empty".into()));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(ProviderError::Config(format!("timeout_s must be > 0, got {}", self.timeout_s)));
        }
        if !(self.backoff_multiplier.is_finite() && self.backoff_multiplier >= 1.0) {
            return Err(ProviderError::Config(format!(
                "backoff_multiplier must be >= 1, got {}",
                self.backoff_multiplier
            )));
        }
        if self.permits == 0 {
            return Err(ProviderError::Config("permits must be >= 1".into()));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.backoff_multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_secs_f64(self.backoff_initial_ms as f64 / 1000.0 * factor)
    }
}

/// Hex sha256 over the path and the canonical (key-sorted) JSON body.
pub fn idempotency_key<T: Serialize + ?Sized>(path: &str, body: &T) -> String {
    let canonical = serde_json::to_value(body).and_then(|v| serde_json::to_vec(&v)).expect("request bodies serialize");
    let mut h = Sha256::new();
    h.update(path.as_bytes());
    h.update(b"\n");
    h.update(&canonical);
    hex::encode(h.finalize())
}

/// Result of one logical call together with the number of HTTP attempts made.
#[derive(Debug)]
pub struct CallOutcome<T> {
    pub result: ProviderResult<T>,
    pub attempts: u32,
}

enum AttemptError {
    Transient(String),
    Fatal(ProviderError),
}

/// A provider reached over HTTP. Cheap to clone and safe to share.
#[derive(Clone)]
pub struct HttpProvider {
    kind: ProviderKind,
    config: ProviderConfig,
    client: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl HttpProvider {
    pub fn new(kind: ProviderKind, config: ProviderConfig) -> ProviderResult<Self> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| ProviderError::Config(format!("http client: {e}")))?;
        let permits = Arc::new(Semaphore::new(config.permits));
        Ok(HttpProvider { kind, config, client, permits })
    }

    pub fn kind(&self) -> ProviderKind {
        self.kind
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// Performs the call and reports how many attempts it took.
    pub async fn call_counted<Req, Resp>(&self, path: &str, body: &Req) -> CallOutcome<Resp>
    where
        Req: Serialize + Sync + ?Sized,
        Resp: DeserializeOwned + Validate,
    {
        let key = idempotency_key(path, body);
        let url = self.url(path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.permits.acquire().await.expect("semaphore is never closed");
                self.attempt::<Req, Resp>(&url, &key, body).await
            };
            match outcome {
                Ok(resp) => return CallOutcome { result: Ok(resp), attempts },
                Err(AttemptError::Fatal(e)) => return CallOutcome { result: Err(e), attempts },
                Err(AttemptError::Transient(last)) => {
                    if attempts > self.config.max_retries {
                        return CallOutcome { result: Err(ProviderError::Exhausted { attempts, last }), attempts };
                    }
                    tracing::warn!(kind = %self.kind, attempts, %last, "transient provider failure, retrying");
                    tokio::time::sleep(self.config.backoff(attempts)).await;
                }
            }
        }
    }

    pub async fn call<Req, Resp>(&self, path: &str, body: &Req) -> ProviderResult<Resp>
    where
        Req: Serialize + Sync + ?Sized,
        Resp: DeserializeOwned + Validate,
    {
        self.call_counted(path, body).await.result
    }

    async fn attempt<Req, Resp>(&self, url: &str, key: &str, body: &Req) -> Result<Resp, AttemptError>
    where
        Req: Serialize + Sync + ?Sized,
        Resp: DeserializeOwned + Validate,
    {
        let mut req = self.client.post(url).header(IDEMPOTENCY_HEADER, key).json(body);
        if let Some(token) = &self.config.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Err(AttemptError::Fatal(ProviderError::Timeout)),
            Err(e) => return Err(AttemptError::Transient(format!("transport: {e}"))),
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Err(AttemptError::Fatal(ProviderError::Timeout)),
            Err(e) => return Err(AttemptError::Transient(format!("reading body: {e}"))),
        };
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Transient(format!("status {}: {}", status.as_u16(), text)));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(ProviderError::RemoteRejected { status: status.as_u16(), body: text }));
        }
        let parsed: Resp =
            serde_json::from_str(&text).map_err(|e| AttemptError::Fatal(ProviderError::invalid_response(e)))?;
        parsed.validate().map_err(AttemptError::Fatal)?;
        Ok(parsed)
    }
}

#[async_trait]
impl Embedder for HttpProvider {
    async fn embed_text(&self, req: &EmbedTextRequest) -> ProviderResult<Vec<f64>> {
        self.call::<_, EmbeddingResponse>(EMBED_TEXT_PATH, req).await.map(|r| r.embedding)
    }

    async fn embed_image(&self, req: &EmbedImageRequest) -> ProviderResult<Vec<f64>> {
        self.call::<_, EmbeddingResponse>(EMBED_IMAGE_PATH, req).await.map(|r| r.embedding)
    }
}

#[async_trait]
impl Llm for HttpProvider {
    async fn chat(&self, req: &ChatRequest) -> ProviderResult<String> {
        self.call::<_, ChatResponse>(CHAT_PATH, req).await.map(|r| r.text)
    }
}

#[async_trait]
impl ImageEditor for HttpProvider {
    async fn edit(&self, req: &EditRequest) -> ProviderResult<EditResponse> {
        self.call(EDIT_PATH, req).await
    }
}

#[async_trait]
impl VideoSynthesizer for HttpProvider {
    async fn synthesize(&self, req: &SynthesizeRequest) -> ProviderResult<SynthesizeResponse> {
        self.call(SYNTHESIZE_PATH, req).await
    }
}
