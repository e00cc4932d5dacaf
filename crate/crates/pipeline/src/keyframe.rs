//! Coarse-to-fine keyframe selection.
//!
//! Candidate frames are scored by the mean cosine similarity between the
//! caption embedding and three square crops of the frame. A coarse pass over a
//! low-rate grid finds the best region; a refined pass over a higher-rate grid
//! restricted to a window around the coarse winner picks the final frame.
//! Grid times are mapped to the nearest native frame, and each native frame is
//! scored at most once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use forge_core::model::{CropScores, FrameRef};
use serde::{Deserialize, Serialize};

use crate::providers::mock::mix_seed;
use crate::providers::{Crop, EmbedImageRequest, EmbedTextRequest, Embedder, ProviderError};

#[derive(Debug, thiserror::Error)]
pub enum KeyframeError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("caption is empty")]
    EmptyCaption,
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("frame source: {0}")]
    Source(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub coarse_fps: f64,
    pub refined_fps: f64,
    /// Half-width in seconds of the refined search window.
    pub neighborhood_s: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan { coarse_fps: 2.0, refined_fps: 12.0, neighborhood_s: 0.5 }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        let ok = self.coarse_fps.is_finite()
            && self.refined_fps.is_finite()
            && self.neighborhood_s.is_finite()
            && self.coarse_fps > 0.0
            && self.refined_fps > self.coarse_fps
            && self.neighborhood_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KeyframeError::InvalidPlan(format!(
                "need refined_fps > coarse_fps > 0 and neighborhood_s > 0, got {self:?}"
            )))
        }
    }

    /// Seconds between coarse samples.
    pub fn coarse_stride_s(&self) -> f64 {
        1.0 / self.coarse_fps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// Image locator relative to the data root.
    pub locator: String,
}

/// Every decoded frame of one video at its native rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFrames {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
}

impl VideoFrames {
    pub fn from_locators(fps: f64, width: u32, height: u32, locators: Vec<String>) -> Self {
        let frames = locators
            .into_iter()
            .enumerate()
            .map(|(index, locator)| Frame { index, timestamp: index as f64 / fps, locator })
            .collect();
        VideoFrames { fps, width, height, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }

    fn nearest(&self, t: f64) -> usize {
        ((t * self.fps).round().max(0.0) as usize).min(self.len() - 1)
    }

    /// Native frames nearest to each point of a `grid_fps` grid covering the video.
    pub fn grid(&self, grid_fps: f64) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        let last = ((self.duration_s() * grid_fps) - 1e-9).ceil().max(1.0) as usize;
        dedup_sorted((0..last).map(|k| self.nearest(k as f64 / grid_fps)))
    }

    /// Grid frames whose native timestamps lie within `half_width` of `center`.
    pub fn grid_window(&self, grid_fps: f64, center: f64, half_width: f64) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        let lo = ((center - half_width) * grid_fps - 1e-9).ceil().max(0.0) as i64;
        let hi = ((center + half_width) * grid_fps + 1e-9).floor() as i64;
        let end = self.duration_s();
        dedup_sorted(
            (lo..=hi)
                .map(|j| j as f64 / grid_fps)
                .filter(|t| *t < end)
                .map(|t| self.nearest(t))
                .filter(|&i| (self.timestamp(i) - center).abs() <= half_width + 1e-9),
        )
    }
}

fn dedup_sorted(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out: Vec<usize> = it.collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Three square crops as (left, center, right). Portrait frames use top,
/// middle and bottom in the same slots.
pub fn crop_boxes(width: u32, height: u32) -> [Crop; 3] {
    if width >= height {
        let s = height;
        let at = |x| Crop { x, y: 0, width: s, height: s };
        [at(0), at((width - s) / 2), at(width - s)]
    } else {
        let s = width;
        let at = |y| Crop { x: 0, y, width: s, height: s };
        [at(0), at((height - s) / 2), at(height - s)]
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, KeyframeError> {
    if a.len() != b.len() {
        return Err(KeyframeError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds the three crops of one frame and scores each against the caption.
pub async fn crop_similarity(
    image: &str,
    width: u32,
    height: u32,
    caption_embedding: &[f64],
    embed: &dyn Embedder,
) -> Result<CropScores, KeyframeError> {
    let [l, c, r] = crop_boxes(width, height);
    let req = |crop| EmbedImageRequest { image: image.to_string(), crop };
    let (lr, cr, rr) = (req(l), req(c), req(r));
    let (lv, cv, rv) = tokio::try_join!(embed.embed_image(&lr), embed.embed_image(&cr), embed.embed_image(&rr))?;
    Ok(CropScores {
        left: cosine(&lv, caption_embedding)?,
        center: cosine(&cv, caption_embedding)?,
        right: cosine(&rv, caption_embedding)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSelection {
    pub frame: FrameRef,
    pub index: usize,
    pub coarse_winner: usize,
    /// Distinct frames scored, each costing three embedding calls.
    pub frames_scored: usize,
    pub degenerate: bool,
}

struct Scorer<'a> {
    video: &'a VideoFrames,
    caption: Vec<f64>,
    embed: &'a dyn Embedder,
    cache: BTreeMap<usize, CropScores>,
}

impl Scorer<'_> {
    async fn score(&mut self, index: usize) -> Result<CropScores, KeyframeError> {
        if let Some(s) = self.cache.get(&index) {
            return Ok(*s);
        }
        let f = &self.video.frames[index];
        let s = crop_similarity(&f.locator, self.video.width, self.video.height, &self.caption, self.embed).await?;
        self.cache.insert(index, s);
        Ok(s)
    }

    /// Highest mean score over `candidates`; the earliest index wins ties.
    async fn argmax(&mut self, candidates: &[usize]) -> Result<(usize, CropScores), KeyframeError> {
        let mut best: Option<(usize, CropScores)> = None;
        for &i in candidates {
            let s = self.score(i).await?;
            if best.is_none_or(|(_, b)| s.mean() > b.mean()) {
                best = Some((i, s));
            }
        }
        best.ok_or(KeyframeError::EmptyVideo)
    }
}

pub async fn select_keyframe(
    video: &VideoFrames,
    caption: &str,
    embed: &dyn Embedder,
    plan: &SamplingPlan,
) -> Result<KeyframeSelection, KeyframeError> {
    plan.validate()?;
    if video.is_empty() {
        return Err(KeyframeError::EmptyVideo);
    }
    if caption.trim().is_empty() {
        return Err(KeyframeError::EmptyCaption);
    }
    let caption = embed.embed_text(&EmbedTextRequest { text: caption.to_string() }).await?;
    let mut scorer = Scorer { video, caption, embed, cache: BTreeMap::new() };

    let degenerate = video.duration_s() < plan.coarse_stride_s();
    let (coarse_winner, index, scores) = if degenerate {
        let all: Vec<usize> = (0..video.len()).collect();
        let (i, s) = scorer.argmax(&all).await?;
        (i, i, s)
    } else {
        let (cw, _) = scorer.argmax(&video.grid(plan.coarse_fps)).await?;
        let window = video.grid_window(plan.refined_fps, video.timestamp(cw), plan.neighborhood_s);
        let (i, s) = scorer.argmax(&window).await?;
        (cw, i, s)
    };
    Ok(KeyframeSelection {
        frame: FrameRef::new(video.frames[index].timestamp, scores),
        index,
        coarse_winner,
        frames_scored: scorer.cache.len(),
        degenerate,
    })
}

/// Supplies decoded frames for a source video and exports the chosen one.
#[async_trait]
pub trait FrameSource: Send + Sync {
    async fn load(&self, video: &str) -> Result<VideoFrames, KeyframeError>;
    /// Materializes frame `index` at `dest` (relative to the data root).
    async fn export(&self, frames: &VideoFrames, index: usize, dest: &str) -> Result<(), KeyframeError>;
}

/// Frames produced by an external command.
///
/// The command is run as `<cmd> <video_path> <out_dir>` through `sh -c`. It
/// must write the frames as PNG files into `out_dir` whose lexicographic order
/// is temporal order, and print the native frame rate on stdout.
#[derive(Debug, Clone)]
pub struct CommandFrameExtractor {
    pub command: String,
    pub data_root: PathBuf,
}

impl CommandFrameExtractor {
    fn frames_dir(&self, video: &str) -> String {
        format!("frames/{}", hex_id(video))
    }
}

fn hex_id(s: &str) -> String {
    format!("{:016x}", mix_seed(0, &["frames", s]))
}

fn resolve(root: &Path, locator: &str) -> PathBuf {
    let p = Path::new(locator);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[async_trait]
impl FrameSource for CommandFrameExtractor {
    async fn load(&self, video: &str) -> Result<VideoFrames, KeyframeError> {
        let rel = self.frames_dir(video);
        let out_dir = self.data_root.join(&rel);
        std::fs::create_dir_all(&out_dir).map_err(|e| KeyframeError::Source(format!("{}: {e}", out_dir.display())))?;
        let output = tokio::process::Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$1\" \"$2\"", self.command))
            .arg("forge-frames")
            .arg(resolve(&self.data_root, video))
            .arg(&out_dir)
            .output()
            .await
            .map_err(|e| KeyframeError::Source(format!("spawning extractor: {e}")))?;
        if !output.status.success() {
            return Err(KeyframeError::Source(format!(
                "extractor exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let fps: f64 = stdout
            .split_whitespace()
            .last()
            .and_then(|t| t.parse().ok())
            .filter(|f: &f64| f.is_finite() && *f > 0.0)
            .ok_or_else(|| KeyframeError::Source(format!("extractor did not print a frame rate: {stdout:?}")))?;
        let mut names: Vec<String> = std::fs::read_dir(&out_dir)
            .map_err(|e| KeyframeError::Source(format!("{}: {e}", out_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        let first = names.first().ok_or(KeyframeError::EmptyVideo)?;
        let (width, height) = image::image_dimensions(out_dir.join(first))
            .map_err(|e| KeyframeError::Source(format!("reading {first}: {e}")))?;
        let locators = names.into_iter().map(|n| format!("{rel}/{n}")).collect();
        Ok(VideoFrames::from_locators(fps, width, height, locators))
    }

    async fn export(&self, frames: &VideoFrames, index: usize, dest: &str) -> Result<(), KeyframeError> {
        let src = self.data_root.join(&frames.frames[index].locator);
        let dst = self.data_root.join(dest);
        if let Some(dir) = dst.parent() {
            std::fs::create_dir_all(dir).map_err(|e| KeyframeError::Source(format!("{}: {e}", dir.display())))?;
        }
        std::fs::copy(&src, &dst).map_err(|e| KeyframeError::Source(format!("{}: {e}", src.display())))?;
        Ok(())
    }
}

/// Frameless videos for mock runs: the frame count is derived from the video
/// locator, and frame locators are virtual.
#[derive(Debug, Clone)]
pub struct SyntheticFrameSource {
    pub data_root: PathBuf,
    pub seed: u64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub max_frames: usize,
}

impl SyntheticFrameSource {
    pub fn new(data_root: impl Into<PathBuf>, seed: u64) -> Self {
        SyntheticFrameSource { data_root: data_root.into(), seed, fps: 24.0, width: 640, height: 360, max_frames: 200 }
    }

    pub fn frames_for(&self, video: &str) -> VideoFrames {
        let n = 1 + (mix_seed(self.seed, &["synthetic-video", video]) % self.max_frames as u64) as usize;
        let locators = (0..n).map(|i| format!("{video}#frame={i:06}")).collect();
        VideoFrames::from_locators(self.fps, self.width, self.height, locators)
    }
}

#[derive(Serialize)]
struct SyntheticFrameFile<'a> {
    source: &'a str,
    index: usize,
    timestamp: f64,
}

#[async_trait]
impl FrameSource for SyntheticFrameSource {
    async fn load(&self, video: &str) -> Result<VideoFrames, KeyframeError> {
        Ok(self.frames_for(video))
    }

    async fn export(&self, frames: &VideoFrames, index: usize, dest: &str) -> Result<(), KeyframeError> {
        let f = &frames.frames[index];
        let body = SyntheticFrameFile { source: &f.locator, index, timestamp: f.timestamp };
        crate::store::write_json_atomic(&self.data_root.join(dest), &body)
            .map_err(|e| KeyframeError::Source(e.to_string()))
    }
}
