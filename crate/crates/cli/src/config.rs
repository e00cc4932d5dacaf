//! Run configuration: a TOML file, then `FORGE_*` environment variables, then
//! command-line flags, with later sources winning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use forge_pipeline::editloop::EditConfig;
use forge_pipeline::keyframe::SamplingPlan;
use forge_pipeline::providers::http::ProviderConfig;
use forge_pipeline::providers::ProviderKind;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const DEFAULT_DATA_ROOT: &str = "data";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Seed of the mock providers and the synthetic frame source.
    pub mock: u64,
    /// Seed of pairing, permutation sampling and the train/holdout split.
    pub pairing: u64,
    /// Seed of toy training.
    pub train: u64,
    /// Seed of the review service's sample ordering.
    pub review_order: u64,
}

/// Contents of a config file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_root: Option<PathBuf>,
    pub num_actions: Option<usize>,
    pub workers: Option<usize>,
    pub vpref_ratio: Option<f64>,
    pub holdout_fraction: Option<f64>,
    pub target_samples: Option<usize>,
    pub seeds: Seeds,
    pub sampling: Option<SamplingPlan>,
    pub edit: Option<EditConfig>,
    /// Keyed by provider kind: `embedding`, `proposer_llm`, `image_editor`,
    /// `video_synthesizer`, `judge_llm`.
    pub providers: BTreeMap<String, ProviderConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for key in cfg.providers.keys() {
            if !ProviderKind::ALL.iter().any(|k| k.as_str() == key) {
                bail!("config {}: unknown provider kind {key:?}", path.display());
            }
        }
        Ok(cfg)
    }
}

/// Values taken from flags or their mirrored environment variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub num_actions: Option<usize>,
    pub workers: Option<usize>,
    pub vpref_ratio: Option<f64>,
    pub holdout_fraction: Option<f64>,
    pub target_samples: Option<usize>,
    pub mock_seed: Option<u64>,
    pub pairing_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub review_order_seed: Option<u64>,
    pub resume: bool,
}

/// Fully resolved configuration, echoed to `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub num_actions: usize,
    pub workers: usize,
    pub vpref_ratio: f64,
    pub holdout_fraction: f64,
    pub target_samples: Option<usize>,
    pub seeds: Seeds,
    pub sampling: SamplingPlan,
    pub edit: EditConfig,
    pub providers: BTreeMap<String, ProviderConfig>,
    /// Left out of the echo so resumed and uninterrupted runs record the same config.
    #[serde(skip)]
    pub resume: bool,
}

/// Logical cores, capped by the smallest provider permit limit.
pub fn default_workers(providers: &BTreeMap<String, ProviderConfig>) -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = providers.values().map(|p| p.permits).min().unwrap_or(usize::MAX);
    cores.min(cap).max(1)
}

impl RunConfig {
    /// Layers `file`, then provider endpoint/token variables read through
    /// `env`, then `over`.
    pub fn resolve(file: FileConfig, over: &Overrides, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let mut providers = BTreeMap::new();
        for kind in ProviderKind::ALL {
            let mut p = file.providers.get(kind.as_str()).cloned().unwrap_or_default();
            p.apply_env(kind, &env);
            providers.insert(kind.as_str().to_string(), p);
        }
        let pairing_defaults = forge_core::pairing::PairingConfig::default();
        let seeds = Seeds {
            mock: over.mock_seed.unwrap_or(file.seeds.mock),
            pairing: over.pairing_seed.unwrap_or(file.seeds.pairing),
            train: over.train_seed.unwrap_or(file.seeds.train),
            review_order: over.review_order_seed.unwrap_or(file.seeds.review_order),
        };
        let workers = over.workers.or(file.workers).unwrap_or_else(|| default_workers(&providers));
        let cfg = RunConfig {
            data_root: over.data_root.clone().or(file.data_root).unwrap_or_else(|| DEFAULT_DATA_ROOT.into()),
            num_actions: over.num_actions.or(file.num_actions).unwrap_or(forge_pipeline::proposal::DEFAULT_NUM_ACTIONS),
            workers,
            vpref_ratio: over.vpref_ratio.or(file.vpref_ratio).unwrap_or(pairing_defaults.vpref_ratio),
            holdout_fraction: over
                .holdout_fraction
                .or(file.holdout_fraction)
                .unwrap_or(pairing_defaults.holdout_fraction),
            target_samples: over.target_samples.or(file.target_samples),
            seeds,
            sampling: file.sampling.unwrap_or_default(),
            edit: file.edit.unwrap_or_default(),
            providers,
            resume: over.resume,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.num_actions < 2 {
            bail!("num_actions must be >= 2, got {}", self.num_actions);
        }
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.vpref_ratio) {
            bail!("vpref_ratio must be in [0, 1], got {}", self.vpref_ratio);
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction) {
            bail!("holdout_fraction must be in [0, 1], got {}", self.holdout_fraction);
        }
        self.sampling.validate().map_err(|e| anyhow::anyhow!("sampling: {e}"))?;
        Ok(())
    }

    pub fn provider(&self, kind: ProviderKind) -> &ProviderConfig {
        &self.providers[kind.as_str()]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
