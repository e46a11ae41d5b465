//! Training, checkpointing, evaluation and experiment protocols.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainConfig};
pub use eval::{evaluate, evaluate_oracle, RecallReport};
pub use gradcheck::{transaction_gradcheck, GradcheckShape};
pub use train::{run_training, write_metrics, MetricsRow, Trainer, METRICS_HEADER};

use crate::error::Result;
use crate::synthdata::{gen_distractor, load_dataset, Split, SyntheticDataset};

/// The train, validation and test sets of a run, loaded from the
/// configured paths or generated from the task. Generated splits share
/// one candidate database.
pub fn datasets(cfg: &RunConfig) -> Result<[SyntheticDataset; 3]> {
    let t = &cfg.train;
    let get = |path: &Option<std::path::PathBuf>, count: usize, split: Split| match path {
        Some(p) => load_dataset(p),
        None => gen_distractor(&cfg.task, count, split),
    };
    Ok([
        get(&t.train_data, t.train_count, Split::Train)?,
        get(&t.val_data, t.val_count, Split::Val)?,
        get(&t.test_data, t.test_count, Split::Test)?,
    ])
}
