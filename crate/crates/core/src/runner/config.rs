use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::caption::AblationMask;
use crate::llm::PromptVariant;
use crate::metrics::{DEFAULT_RESAMPLES, MIN_RESAMPLES};
use crate::scoring::SelectionRule;

use super::RunError;

pub const DEFAULT_MODEL: &str = "gpt-4-0613";
pub const DEFAULT_JOBS: usize = 4;
pub const MOCK: &str = "mock";

/// Every field optional: one layer of settings from a config file or from
/// command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub dataset: Option<PathBuf>,
    pub store: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub variant: Option<PromptVariant>,
    pub rule: Option<SelectionRule>,
    pub mask: Option<AblationMask>,
    pub masks: Option<Vec<AblationMask>>,
    pub baseline: Option<BaselineKind>,
    pub frequency_dataset: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub vocab_dir: Option<PathBuf>,
    pub subsample: Option<usize>,
    pub resamples: Option<usize>,
    pub max_retries: Option<u32>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub mock_dim: Option<usize>,
}

macro_rules! take_newer {
    ($base:ident, $top:ident, $($field:ident),*) => {
        ConfigOverrides { $($field: $top.$field.or($base.$field)),* }
    };
}

impl ConfigOverrides {
    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(format!("{source_name}: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// `self` overlaid with `top`; fields set in `top` win.
    pub fn overlay(self, top: ConfigOverrides) -> ConfigOverrides {
        let base = self;
        take_newer!(
            base, top, dataset, store, endpoint, model, variant, rule, mask, masks, baseline,
            frequency_dataset, predictions, seed, out, jobs, cache_dir, vocab_dir, subsample,
            resamples, max_retries, temperature, max_tokens, mock_dim
        )
    }

    pub fn resolve(self) -> Result<ExperimentConfig, RunError> {
        let out = self.out.unwrap_or_else(|| PathBuf::from("out"));
        let cfg = ExperimentConfig {
            dataset: self.dataset,
            store: self.store,
            endpoint: self.endpoint.unwrap_or_else(|| MOCK.into()),
            model: self.model.unwrap_or_else(|| DEFAULT_MODEL.into()),
            variant: self.variant.unwrap_or_default(),
            rule: self.rule.unwrap_or_default(),
            mask: self.mask.unwrap_or_default(),
            masks: self.masks.unwrap_or_else(AblationMask::ablation_matrix),
            baseline: self.baseline,
            frequency_dataset: self.frequency_dataset,
            predictions: self.predictions,
            seed: self.seed.unwrap_or(1),
            cache_dir: Some(self.cache_dir.unwrap_or_else(|| out.join("llm_cache"))),
            out,
            jobs: self.jobs.unwrap_or(DEFAULT_JOBS),
            vocab_dir: self.vocab_dir,
            subsample: self.subsample,
            resamples: self.resamples.unwrap_or(DEFAULT_RESAMPLES),
            max_retries: self.max_retries.unwrap_or(5),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            mock_dim: self.mock_dim.unwrap_or(512),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    /// NEMB path, `http(s)://` embedding service, or `mock`.
    pub store: Option<String>,
    /// `mock` or an OpenAI-compatible base URL.
    pub endpoint: String,
    pub model: String,
    pub variant: PromptVariant,
    pub rule: SelectionRule,
    pub mask: AblationMask,
    pub masks: Vec<AblationMask>,
    pub baseline: Option<BaselineKind>,
    pub frequency_dataset: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
    pub vocab_dir: Option<PathBuf>,
    pub subsample: Option<usize>,
    pub resamples: usize,
    pub max_retries: u32,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Dimension of `mock` embeddings.
    pub mock_dim: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.resamples < MIN_RESAMPLES {
            return bad(format!("resamples must be at least {MIN_RESAMPLES}"));
        }
        if self.variant.uses_image() && self.mask != AblationMask::FULL {
            return bad(format!(
                "variant {} sends the image, not a caption; mask {} does not apply",
                self.variant, self.mask
            ));
        }
        if self.masks.is_empty() {
            return bad("masks must not be empty".into());
        }
        if self.subsample == Some(0) {
            return bad("subsample must be positive".into());
        }
        if self.mock_dim < 2 {
            return bad("mock_dim must be at least 2".into());
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return bad(format!("temperature {t} outside [0, 2]"));
            }
        }
        if self.endpoint != MOCK && !is_url(&self.endpoint) {
            return bad(format!("endpoint {:?} is neither \"mock\" nor an http(s) URL", self.endpoint));
        }
        Ok(())
    }

    pub fn require_dataset(&self) -> Result<&Path, RunError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| RunError::Config("--dataset is required".into()))
    }

    pub fn require_store(&self) -> Result<&str, RunError> {
        self.store
            .as_deref()
            .ok_or_else(|| RunError::Config("--store is required".into()))
    }
}

pub fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}
