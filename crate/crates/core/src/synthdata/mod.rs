//! Synthetic multi-turn retrieval tasks over feature vectors.
//!
//! Every transaction picks a reference item and a target item from the
//! candidate database. Turn `n` shows the reference with one coordinate
//! block replaced by the target's (plus noise). Blocks never repeat within
//! a transaction, so the final target is only identifiable by combining
//! every turn. The ground truth of turn `n` is the item nearest to the
//! noiseless composite of everything revealed up to `n`.

mod io;

pub use io::{load_dataset, save_dataset, FORMAT_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{retrieve, CandidateDb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Feature dimension (D).
    pub dim: usize,
    /// Number of equal coordinate blocks the features are split into.
    pub blocks: usize,
    /// Padded transaction length (N_max).
    pub max_turns: usize,
    /// Shortest real transaction length; every transaction has
    /// `max_turns` real turns when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_turns: Option<usize>,
    pub db_size: usize,
    pub noise_std: f64,
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 4,
            max_turns: 4,
            min_turns: None,
            db_size: 256,
            noise_std: 0.05,
            distractor_prob: 0.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.blocks == 0 || self.max_turns == 0 {
            return err("dim, blocks and max_turns must be positive");
        }
        if self.blocks < self.max_turns {
            return err("blocks must be at least max_turns");
        }
        if !self.dim.is_multiple_of(self.blocks) {
            return err("dim must be divisible by blocks");
        }
        if self.db_size < 8 {
            return err("db_size must be at least 8");
        }
        if self.min_turns.is_some_and(|n| n == 0 || n > self.max_turns) {
            return err("min_turns must lie in 1..=max_turns");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return err("distractor_prob must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.blocks
    }

    pub fn shortest(&self) -> usize {
        self.min_turns.unwrap_or(self.max_turns)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub query: Vec<f32>,
    pub target_id: u32,
    /// Block revealed by this turn, `None` for a distractor turn.
    pub block: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transaction {
    pub turns: Vec<Turn>,
    pub original_len: usize,
    pub reference_id: Option<u32>,
}

impl Transaction {
    pub fn final_target(&self) -> u32 {
        self.turns.last().expect("non-empty transaction").target_id
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub transactions: Vec<Transaction>,
    pub db: CandidateDb,
    pub split: Split,
    pub max_turns: usize,
    pub blocks: usize,
}

impl SyntheticDataset {
    pub fn dim(&self) -> usize {
        self.db.dim()
    }

    pub fn block_size(&self) -> usize {
        self.db.dim() / self.blocks
    }

    /// Checks that every target exists and every transaction is padded.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.transactions.iter().enumerate() {
            if t.turns.len() != self.max_turns || t.original_len == 0 || t.original_len > t.turns.len() {
                return Err(Error::Invalid(format!(
                    "transaction {i} is not padded to {}",
                    self.max_turns
                )));
            }
            for turn in &t.turns {
                if !self.db.contains(turn.target_id) {
                    return Err(Error::Invalid(format!(
                        "transaction {i}: unknown target {}",
                        turn.target_id
                    )));
                }
                if turn.query.len() != self.dim() {
                    return Err(Error::Invalid(format!("transaction {i}: query dimension mismatch")));
                }
            }
        }
        Ok(())
    }
}

/// Repeats the last real turn until the transaction has `max_turns` turns.
pub fn pad_transaction(txn: &Transaction, max_turns: usize) -> Result<Transaction> {
    let real = txn.original_len;
    if real == 0 || real > txn.turns.len() {
        return Err(Error::Invalid("pad_transaction: empty transaction".into()));
    }
    if real > max_turns {
        return Err(Error::Invalid(format!(
            "pad_transaction: {real} turns exceed the maximum of {max_turns}"
        )));
    }
    let mut turns = txn.turns[..real].to_vec();
    let last = turns[real - 1].clone();
    turns.resize(max_turns, last);
    Ok(Transaction {
        turns,
        original_len: real,
        reference_id: txn.reference_id,
    })
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

/// Database of `db_size` unit-norm Gaussian items with ids `0..db_size`.
pub fn generate_db(cfg: &TaskConfig) -> Result<CandidateDb> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let mut features = Vec::with_capacity(cfg.db_size * cfg.dim);
    for _ in 0..cfg.db_size {
        features.extend(unit_gaussian(&mut rng, cfg.dim));
    }
    CandidateDb::new((0..cfg.db_size as u32).collect(), features, cfg.dim)
}

fn nearest(point: &[f32], db: &CandidateDb) -> Result<u32> {
    Ok(retrieve(point, db)?.ids[0])
}

fn make_transaction(cfg: &TaskConfig, db: &CandidateDb, seed: u64) -> Result<Transaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = db.len() as u32;
    let reference = rng.random_range(0..n_items);
    let target = loop {
        let t = rng.random_range(0..n_items);
        if t != reference {
            break t;
        }
    };
    let len = rng.random_range(cfg.shortest()..=cfg.max_turns);
    let mut order: Vec<usize> = (0..cfg.blocks).collect();
    order.shuffle(&mut rng);
    let bs = cfg.block_size();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let r = db.feature(reference).expect("sampled id").to_vec();
    let t = db.feature(target).expect("sampled id").to_vec();
    let mut composite = r.clone();
    let mut turns = Vec::with_capacity(len);
    for &block in &order[..len] {
        let distractor = rng.random::<f64>() < cfg.distractor_prob;
        let span = block * bs..(block + 1) * bs;
        let turn = if distractor {
            let query = unit_gaussian(&mut rng, cfg.dim);
            Turn {
                query,
                target_id: nearest(&composite, db)?,
                block: None,
            }
        } else {
            let mut query = r.clone();
            for i in span.clone() {
                query[i] = t[i] + noise.sample(&mut rng) as f32;
                composite[i] = t[i];
            }
            Turn {
                query,
                target_id: nearest(&composite, db)?,
                block: Some(block),
            }
        };
        turns.push(turn);
    }
    let txn = Transaction {
        turns,
        original_len: len,
        reference_id: Some(reference),
    };
    pad_transaction(&txn, cfg.max_turns)
}

/// Block-reveal transactions interleaved with pure-noise distractor turns
/// (each turn independently with probability `distractor_prob`).
/// Generated in parallel from per-transaction seeds; the output does not
/// depend on the thread count.
pub fn gen_distractor(cfg: &TaskConfig, count: usize, split: Split) -> Result<SyntheticDataset> {
    let db = generate_db(cfg)?;
    let stream = mix_seed(cfg.seed, split.stream());
    let transactions = (0..count)
        .into_par_iter()
        .map(|i| make_transaction(cfg, &db, mix_seed(stream, i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        transactions,
        db,
        split,
        max_turns: cfg.max_turns,
        blocks: cfg.blocks,
    })
}

/// Block-reveal transactions without distractors.
pub fn gen_block_reveal(cfg: &TaskConfig, count: usize, split: Split) -> Result<SyntheticDataset> {
    let cfg = TaskConfig {
        distractor_prob: 0.0,
        ..cfg.clone()
    };
    gen_distractor(&cfg, count, split)
}

/// Reference features with every block revealed by the first `upto` real
/// turns copied from those turns' queries, skipping distractors.
pub fn oracle_composite(txn: &Transaction, db: &CandidateDb, block_size: usize, upto: usize) -> Result<Vec<f32>> {
    let reference = txn
        .reference_id
        .ok_or_else(|| Error::Invalid("oracle needs transactions with a reference id".into()))?;
    let mut out = db
        .feature(reference)
        .ok_or_else(|| Error::Invalid(format!("unknown reference {reference}")))?
        .to_vec();
    for turn in txn.turns.iter().take(upto.min(txn.original_len)) {
        if let Some(b) = turn.block {
            let span = b * block_size..(b + 1) * block_size;
            out[span.clone()].copy_from_slice(&turn.query[span]);
        }
    }
    Ok(out)
}
