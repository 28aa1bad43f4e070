//! One TOML file holding every experiment parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::ExperimentSetup;
use crate::pair::ModelConfig;
use crate::retrieval::{Bm25Params, PipelineConfig, RetrievalMode, Window};
use crate::training::{LossConfig, TrainConfig};

/// Environment variables that may replace the configured paths.
pub const PATH_ENV: [(&str, PathKey); 4] = [
    ("EMBRANK_DATA", PathKey::Data),
    ("EMBRANK_INDEX", PathKey::Index),
    ("EMBRANK_MODEL", PathKey::Model),
    ("EMBRANK_RUNS", PathKey::Runs),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKey {
    Data,
    Index,
    Model,
    Runs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub index: PathBuf,
    pub model: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "runs/data".into(),
            index: "runs/index".into(),
            model: "runs/train/checkpoints/model.ckpt".into(),
            runs: "runs".into(),
        }
    }
}

/// First-stage retrieval and reranking. `window = 0` reranks every
/// candidate in one pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub mode: RetrievalMode,
    pub depth: usize,
    pub rrf_k: u32,
    pub window: usize,
    pub stride: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let w = p.window.unwrap_or_default();
        Self {
            mode: p.mode,
            depth: p.depth,
            rrf_k: p.rrf_k,
            window: w.size,
            stride: w.stride,
        }
    }
}

impl RerankConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mode: self.mode,
            depth: self.depth,
            rrf_k: self.rrf_k,
            window: (self.window > 0).then_some(Window {
                size: self.window,
                stride: self.stride,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation, initialisation and batch order.
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub bm25: Bm25Params,
    pub rerank: RerankConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            bm25: Bm25Params::default(),
            rerank: RerankConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.validate()?;
        let m = &self.model;
        if m.dim == 0 || m.n_heads == 0 || !m.dim.is_multiple_of(m.n_heads) {
            return Err(Error::Config(format!(
                "model.dim ({}) must be a positive multiple of model.n_heads ({})",
                m.dim, m.n_heads
            )));
        }
        for (key, s) in [("train.stage1", &self.train.stage1), ("train.stage2", &self.train.stage2)] {
            if s.batch_size == 0 {
                return Err(Error::Config(format!("{key}.batch_size must be at least 1")));
            }
            if !(s.lr >= 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("{key}.lr must be a finite non-negative number")));
            }
        }
        if self.rerank.depth == 0 {
            return Err(Error::Config("rerank.depth must be at least 1".into()));
        }
        if self.rerank.rrf_k == 0 {
            return Err(Error::Config("rerank.rrf_k must be at least 1".into()));
        }
        if let Some(w) = self.rerank.pipeline().window {
            if let Err(Error::Config(m)) = w.validate() {
                return Err(Error::Config(format!("rerank.window/rerank.stride: {m}")));
            }
        }
        Ok(())
    }

    /// Replaces paths from `lookup` (normally the process environment).
    /// Hyperparameters are never read from the environment.
    pub fn apply_path_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, key) in PATH_ENV {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                let slot = match key {
                    PathKey::Data => &mut self.paths.data,
                    PathKey::Index => &mut self.paths.index,
                    PathKey::Model => &mut self.paths.model,
                    PathKey::Runs => &mut self.paths.runs,
                };
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn setup(&self) -> ExperimentSetup {
        ExperimentSetup {
            model: self.model.clone(),
            init_seed: self.seed,
            train: self.train_config(),
            loss: self.loss,
            pipeline: self.rerank.pipeline(),
        }
    }
}
