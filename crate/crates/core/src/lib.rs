//! Cascaded memory neural Turing machine for multi-turn retrieval over
//! feature vectors, with its own reverse-mode differentiation engine,
//! baseline aggregators, synthetic tasks and an experiment harness.

pub mod autodiff;
pub mod cascade;
pub mod error;
pub mod harness;
pub mod layers;
pub mod ntm;
pub mod params;
pub mod retrieval;
pub mod synthdata;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use cascade::{CascadeConfig, CmNtm, Model, ModelKind, Stats};
pub use error::{Error, Result};
pub use harness::{Checkpoint, RecallReport, RunConfig, TrainConfig, Trainer};
pub use params::ParamStore;
pub use retrieval::{CandidateDb, RankingResult};
pub use synthdata::{Split, SyntheticDataset, TaskConfig, Transaction, Turn};
