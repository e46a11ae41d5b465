use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::cascade::{Model, Stats};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::retrieval::{recall_at_k, retrieve, CandidateDb, RankingResult};
use crate::synthdata::{mix_seed, oracle_composite, SyntheticDataset, Transaction};

/// Transactions per evaluation graph.
pub const EVAL_BATCH: usize = 64;

const EVAL_STREAM: u64 = 0x3E7A_1000;

/// Final-turn recall over the full candidate database.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub r1: f64,
    pub r5: f64,
    pub r8: f64,
    pub r10: f64,
    pub mean_r5_r8: f64,
    pub count: usize,
}

impl RecallReport {
    pub fn from_rankings(rankings: &[RankingResult], targets: &[u32]) -> Result<Self> {
        let r5 = recall_at_k(rankings, targets, 5)?;
        let r8 = recall_at_k(rankings, targets, 8)?;
        Ok(Self {
            r1: recall_at_k(rankings, targets, 1)?,
            r5,
            r8,
            r10: recall_at_k(rankings, targets, 10)?,
            mean_r5_r8: (r5 + r8) / 2.0,
            count: rankings.len(),
        })
    }

    /// Ranks each embedding against `db` and scores it against `targets`.
    pub fn from_embeddings(embeddings: &[Vec<f32>], targets: &[u32], db: &CandidateDb) -> Result<Self> {
        let rankings = rank_all(embeddings, db)?;
        Self::from_rankings(&rankings, targets)
    }
}

pub fn rank_all(embeddings: &[Vec<f32>], db: &CandidateDb) -> Result<Vec<RankingResult>> {
    embeddings.par_iter().map(|e| retrieve(e, db)).collect()
}

/// Seed of the memory initialisation for evaluation row `index`.
pub fn eval_memory_seed(seed: u64, index: usize) -> u64 {
    mix_seed(mix_seed(seed, EVAL_STREAM), index as u64)
}

/// Queries of turn `n` for a batch, as a `[B, D]` tensor.
pub(crate) fn turn_queries(batch: &[&Transaction], n: usize, dim: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(batch.len() * dim);
    for t in batch {
        let turn = t
            .turns
            .get(n)
            .ok_or_else(|| Error::Invalid(format!("transaction has no turn {n}")))?;
        if turn.query.len() != dim {
            return Err(Error::shape("turn_queries", &[&[turn.query.len()], &[dim]]));
        }
        data.extend_from_slice(&turn.query);
    }
    Tensor::new(vec![batch.len(), dim], data)
}

/// Per-turn embeddings, `out[transaction][turn]`, in eval mode.
///
/// All transactions must share one length. Batches are evaluated in
/// parallel and merged by transaction index, so the result does not
/// depend on the thread count.
pub fn embed(
    model: &Model,
    store: &ParamStore<f32>,
    txns: &[Transaction],
    dim: usize,
    seed: u64,
    reset_each_turn: bool,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let Some(first) = txns.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if txns.iter().any(|t| t.len() != n) {
        return Err(Error::Invalid("transactions must be padded to one length".into()));
    }
    if let Some(d) = model.features() {
        if d != dim {
            return Err(Error::shape("embed", &[&[d], &[dim]]));
        }
    }
    let batches: Vec<Vec<Vec<Vec<f32>>>> = txns
        .par_chunks(EVAL_BATCH)
        .enumerate()
        .map(|(bi, chunk)| {
            let refs: Vec<&Transaction> = chunk.iter().collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|i| eval_memory_seed(seed, bi * EVAL_BATCH + i))
                .collect();
            let mut g = Graph::<f32>::new();
            let p = store.bind_frozen(&mut g);
            let turns = (0..n)
                .map(|k| Ok(g.constant(turn_queries(&refs, k, dim)?)))
                .collect::<Result<Vec<Var>>>()?;
            let out = model.forward(&mut g, &p, &mut Stats::Eval(store), &turns, &seeds, reset_each_turn)?;
            let mut per_txn = vec![Vec::with_capacity(n); chunk.len()];
            for v in out {
                let t = g.value(v);
                for (i, row) in per_txn.iter_mut().enumerate() {
                    row.push(t.row(i).to_vec());
                }
            }
            Ok(per_txn)
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Final-turn recall of `model` on `ds`.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, ds: &SyntheticDataset, seed: u64) -> Result<RecallReport> {
    let emb = embed(model, store, &ds.transactions, ds.dim(), seed, false)?;
    let finals: Vec<Vec<f32>> = emb.into_iter().map(|mut t| t.pop().expect("turn")).collect();
    let targets: Vec<u32> = ds.transactions.iter().map(|t| t.final_target()).collect();
    RecallReport::from_embeddings(&finals, &targets, &ds.db)
}

/// Final-turn recall of the aggregator that copies every revealed block
/// into the reference feature.
pub fn evaluate_oracle(ds: &SyntheticDataset) -> Result<RecallReport> {
    let bs = ds.block_size();
    let finals = ds
        .transactions
        .iter()
        .map(|t| oracle_composite(t, &ds.db, bs, t.original_len))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<u32> = ds.transactions.iter().map(|t| t.final_target()).collect();
    RecallReport::from_embeddings(&finals, &targets, &ds.db)
}
