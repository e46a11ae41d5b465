use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, ModelKind, DEFAULT_EWMA_ALPHA};
use crate::error::{Error, Result};
use crate::synthdata::TaskConfig;

/// Optimisation and bookkeeping settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub cascade: CascadeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm ceiling.
    pub grad_clip: f64,
    /// Drives shuffling, memory initialisation and evaluation seeds.
    pub seed: u64,
    pub lstm_hidden: usize,
    pub ewma_alpha: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cmntm,
            cascade: CascadeConfig::default(),
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            seed: 0,
            lstm_hidden: 100,
            ewma_alpha: DEFAULT_EWMA_ALPHA,
            train_count: 2000,
            val_count: 500,
            test_count: 500,
            train_data: None,
            val_data: None,
            test_data: None,
            checkpoint_every: 0,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

/// A complete experiment description: the synthetic task and the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// 768-dimensional features, batch 80, learning rate 1e-4, 100 epochs
    /// and four memories of 8 x 768.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.task.dim = 768;
        cfg.train.cascade = CascadeConfig {
            stages: 4,
            locations: 8,
            width: 768,
            hidden: 256,
            features: 768,
            seed: 0,
        };
        cfg.train.batch_size = 80;
        cfg.train.learning_rate = 1e-4;
        cfg.train.epochs = 100;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// One seed for the task, the initialisation and the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.train.seed = seed;
        self.train.cascade.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let t = &self.train;
        if t.model.is_cascade() {
            t.cascade.validate()?;
        }
        if t.cascade.features != self.task.dim {
            return Err(Error::Config(format!(
                "cascade.features ({}) must equal task.dim ({})",
                t.cascade.features, self.task.dim
            )));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let positive = [
            ("learning_rate", t.learning_rate),
            ("adam_eps", t.adam_eps),
            ("grad_clip", t.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(t.ewma_alpha > 0.0 && t.ewma_alpha <= 1.0) {
            return Err(Error::Config("ewma_alpha must lie in (0, 1]".into()));
        }
        if t.lstm_hidden == 0 {
            return Err(Error::Config("lstm_hidden must be positive".into()));
        }
        if t.train_count < t.batch_size {
            return Err(Error::Config("train_count must be at least batch_size".into()));
        }
        Ok(())
    }
}
