//! Run and matrix configuration files (strict JSON).
//!
//! Unknown keys are rejected; anything omitted falls back to the library
//! defaults (the documented reference constants for λ, k, masking and
//! schedule; desk-scale model sizes).

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use daicl_core::embed::{EmbedderKind, EmbedderSpec, Metric};
use daicl_core::eval::SyntheticShiftSpec;
use daicl_core::model::AdapterConfig;
use daicl_core::prompt::Task;
use daicl_core::trainer::{ModelKind, TrainConfig, Variant};

/// Where a run's corpora come from: normalized files, or the bundled
/// synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source_train: PathBuf,
    pub source_dev: PathBuf,
    pub target_unlabeled: PathBuf,
    #[serde(default)]
    pub target_test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    #[serde(default = "default_embed_dim")]
    pub dim: usize,
    #[serde(default = "default_embed_seed")]
    pub seed: u64,
}

fn default_embed_dim() -> usize {
    32
}

fn default_embed_seed() -> u64 {
    1234
}

impl EmbedderConfig {
    pub fn spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            dim: self.dim,
            seed: self.seed,
            kind: EmbedderKind::NgramProjection,
        }
    }
}

/// Partial training-config override; every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub crf_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub warmup_frac: Option<f64>,
    pub grad_clip: Option<f64>,
    pub lambda: Option<f64>,
    pub mask_rate: Option<f64>,
    pub patience: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub max_len: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub lora_dropout: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            lr, crf_lr, weight_decay, batch_size, epochs, warmup_frac, grad_clip, lambda,
            mask_rate, patience, pretrain_epochs, dim, layers, heads, max_len
        );
        if let Some(rank) = self.lora_rank {
            cfg.adapter = Some(AdapterConfig {
                rank,
                alpha: self.lora_alpha.unwrap_or(rank as f64),
                dropout: self
                    .lora_dropout
                    .unwrap_or(daicl_core::trainer::paper_defaults::LORA_DROPOUT),
            });
        }
        cfg
    }
}

/// One run: task, variant, model kind, data, and knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub task: Task,
    pub variant: Variant,
    #[serde(default = "default_model_kind")]
    pub model: ModelKind,
    #[serde(default)]
    pub paths: Option<DataPaths>,
    #[serde(default)]
    pub synthetic: Option<SyntheticShiftSpec>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_model_kind() -> ModelKind {
    ModelKind::Encoder
}

fn default_k() -> usize {
    daicl_core::trainer::paper_defaults::TOP_K
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let spec: RunSpec = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_none() && self.synthetic.is_none() {
            bail!("config needs either \"paths\" or \"synthetic\"");
        }
        if self.paths.is_some() && self.synthetic.is_some() {
            bail!("config sets both \"paths\" and \"synthetic\"; pick one");
        }
        if self.synthetic.is_some() && self.task != Task::Sa {
            bail!("the synthetic benchmark is a sentiment task");
        }
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        Ok(())
    }

    /// The retrieval metric: explicit, or the task's conventional choice
    /// (cosine for sentiment, token matching for entity spans).
    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(match self.task {
            Task::Sa => Metric::Cosine,
            Task::Ner => Metric::TokenMatch,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = self.train.apply(TrainConfig::desk_default());
        cfg.seed = self.seed;
        cfg.k = self.k;
        cfg.validate()
            .map_err(|e| anyhow::anyhow!("invalid training config: {e}"))?;
        Ok(cfg)
    }
}

/// A matrix run: scenarios × variants × seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub scenarios: Vec<ScenarioSpec>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_jobs() -> usize {
    2
}

/// One scenario of a matrix: a named data configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub task: Task,
    #[serde(default = "default_model_kind")]
    pub model: ModelKind,
    #[serde(default)]
    pub paths: Option<DataPaths>,
    #[serde(default)]
    pub synthetic: Option<SyntheticShiftSpec>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default = "default_k")]
    pub k: usize,
}

impl MatrixSpec {
    pub fn load(path: &Path) -> Result<MatrixSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let spec: MatrixSpec = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            bail!("matrix needs at least one scenario, variant and seed");
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        for s in &self.scenarios {
            if s.paths.is_none() && s.synthetic.is_none() {
                bail!("scenario {:?} needs \"paths\" or \"synthetic\"", s.name);
            }
        }
        Ok(())
    }
}

impl ScenarioSpec {
    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(match self.task {
            Task::Sa => Metric::Cosine,
            Task::Ner => Metric::TokenMatch,
        })
    }
}
