//! Protocols that probe how the aggregators use history: the amount of
//! history given as input, turn order, retention of early turns, the
//! number of memories and inference cost.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cascade::{CascadeConfig, CmNtm, Model, Stats};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{embed, eval_memory_seed, rank_all, RecallReport};
use crate::harness::train::{run_training, Trainer};
use crate::params::ParamStore;
use crate::retrieval::{cosine, CandidateDb};
use crate::synthdata::{pad_transaction, SyntheticDataset, Transaction, Turn};

/// A model together with its parameters.
#[derive(Clone, Copy)]
pub struct Scored<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
}

impl<'a> From<&'a Trainer> for Scored<'a> {
    fn from(t: &'a Trainer) -> Self {
        Self {
            model: &t.model,
            store: &t.store,
        }
    }
}

fn final_embeddings(m: Scored<'_>, txns: &[Transaction], dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    Ok(embed(m.model, m.store, txns, dim, seed, false)?
        .into_iter()
        .map(|mut t| t.pop().expect("turn"))
        .collect())
}

fn final_report(m: Scored<'_>, txns: &[Transaction], db: &CandidateDb, seed: u64) -> Result<RecallReport> {
    let emb = final_embeddings(m, txns, db.dim(), seed)?;
    let targets: Vec<u32> = txns.iter().map(|t| t.final_target()).collect();
    RecallReport::from_embeddings(&emb, &targets, db)
}

fn block_span(b: usize, size: usize) -> std::ops::Range<usize> {
    b * size..(b + 1) * size
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

pub const TURN_IMPORTANCE_PROTOCOL: &str = "k history turns are given as input; the transaction is \
entered at turn N-k and the reference of every remaining turn is replaced by the ground-truth \
target feature of turn N-k-1, keeping each turn's revealed block";

/// Keeps the last `k + 1` real turns of `txn`. Earlier turns are granted
/// by substituting the ground-truth target of the last dropped turn for
/// the reference in each kept query, outside the block the query
/// reveals. Distractor turns are kept unchanged.
pub fn substitute_history(
    txn: &Transaction,
    k: usize,
    db: &CandidateDb,
    block_size: usize,
    max_turns: usize,
) -> Result<Transaction> {
    let n = txn.original_len;
    let k = k.min(n - 1);
    if k == n - 1 {
        return Ok(txn.clone());
    }
    let start = n - k - 1;
    let truth = txn.turns[start - 1].target_id;
    let base = db
        .feature(truth)
        .ok_or_else(|| Error::Invalid(format!("unknown target id {truth}")))?;
    let turns = txn.turns[start..n]
        .iter()
        .map(|t| match t.block {
            Some(b) => {
                let mut q = base.to_vec();
                let span = block_span(b, block_size);
                q[span.clone()].copy_from_slice(&t.query[span]);
                Turn { query: q, ..t.clone() }
            }
            None => t.clone(),
        })
        .collect();
    let cut = Transaction {
        turns,
        original_len: k + 1,
        reference_id: Some(truth),
    };
    pad_transaction(&cut, max_turns)
}

#[derive(Clone, Debug, Serialize)]
pub struct TurnImportanceRow {
    /// History turns given as input.
    pub k: usize,
    pub model: RecallReport,
    pub baseline: RecallReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct TurnImportanceReport {
    pub protocol: &'static str,
    pub rows: Vec<TurnImportanceRow>,
    /// Max minus min of mean(R@5, R@8) over k.
    pub model_spread: f64,
    pub baseline_spread: f64,
}

impl TurnImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,model_r1,model_r5,model_r8,model_r10,model_mean_r5_r8,baseline_r1,baseline_r5,baseline_r8,baseline_r10,baseline_mean_r5_r8\n");
        for r in &self.rows {
            let (m, b) = (&r.model, &r.baseline);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.k, m.r1, m.r5, m.r8, m.r10, m.mean_r5_r8, b.r1, b.r5, b.r8, b.r10, b.mean_r5_r8
            )
            .expect("string write");
        }
        s
    }
}

pub fn turn_importance(
    model: Scored<'_>,
    baseline: Scored<'_>,
    ds: &SyntheticDataset,
    seed: u64,
) -> Result<TurnImportanceReport> {
    let mut rows = Vec::with_capacity(ds.max_turns);
    for k in 0..ds.max_turns {
        let txns = ds
            .transactions
            .iter()
            .map(|t| substitute_history(t, k, &ds.db, ds.block_size(), ds.max_turns))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TurnImportanceRow {
            k,
            model: final_report(model, &txns, &ds.db, seed)?,
            baseline: final_report(baseline, &txns, &ds.db, seed)?,
        });
    }
    Ok(TurnImportanceReport {
        protocol: TURN_IMPORTANCE_PROTOCOL,
        model_spread: spread(rows.iter().map(|r| r.model.mean_r5_r8)),
        baseline_spread: spread(rows.iter().map(|r| r.baseline.mean_r5_r8)),
        rows,
    })
}

/// The real turns of `txn` in reversed order, re-padded. The final turn
/// keeps the transaction's final target.
pub fn reverse_turns(txn: &Transaction, max_turns: usize) -> Result<Transaction> {
    let n = txn.original_len;
    let mut turns: Vec<Turn> = txn.turns[..n].iter().rev().cloned().collect();
    turns[n - 1].target_id = txn.turns[n - 1].target_id;
    pad_transaction(
        &Transaction {
            turns,
            original_len: n,
            reference_id: txn.reference_id,
        },
        max_turns,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct TurnOrderReport {
    pub transactions: usize,
    /// Mean of |top5(original) ∩ top5(reversed)| / 5.
    pub mean_overlap: f64,
    /// Among transactions whose target is in the original top 5, the
    /// fraction whose target is still in the top 5 after reversal.
    pub target_retention: f64,
    pub retained_base: usize,
}

impl TurnOrderReport {
    pub fn to_csv(&self) -> String {
        format!(
            "transactions,mean_overlap,target_retention,retained_base\n{},{},{},{}\n",
            self.transactions, self.mean_overlap, self.target_retention, self.retained_base
        )
    }
}

pub fn turn_order(m: Scored<'_>, ds: &SyntheticDataset, seed: u64) -> Result<TurnOrderReport> {
    let reversed = ds
        .transactions
        .iter()
        .map(|t| reverse_turns(t, ds.max_turns))
        .collect::<Result<Vec<_>>>()?;
    let a = rank_all(&final_embeddings(m, &ds.transactions, ds.dim(), seed)?, &ds.db)?;
    let b = rank_all(&final_embeddings(m, &reversed, ds.dim(), seed)?, &ds.db)?;
    let mut overlap = 0.0;
    let (mut base, mut kept) = (0usize, 0usize);
    for ((ra, rb), t) in a.iter().zip(&b).zip(&ds.transactions) {
        let (ta, tb) = (ra.top(5), rb.top(5));
        overlap += ta.iter().filter(|id| tb.contains(id)).count() as f64 / 5.0;
        let target = t.final_target();
        if ta.contains(&target) {
            base += 1;
            kept += usize::from(tb.contains(&target));
        }
    }
    let count = ds.transactions.len().max(1);
    Ok(TurnOrderReport {
        transactions: ds.transactions.len(),
        mean_overlap: overlap / count as f64,
        target_retention: if base == 0 { 0.0 } else { kept as f64 / base as f64 },
        retained_base: base,
    })
}

/// Minimum cosine between a candidate's turn-1 block and the target's for
/// the candidate to count as consistent with what turn 1 revealed.
pub const BLOCK_MATCH: f64 = 0.5;

#[derive(Clone, Debug, Serialize)]
pub struct RetentionRow {
    /// One-based turn index.
    pub turn: usize,
    pub stateful: f64,
    pub reset: f64,
    /// Fraction of database items consistent with turn 1.
    pub chance: f64,
    pub transactions: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetentionReport {
    pub threshold: f64,
    pub rows: Vec<RetentionRow>,
}

impl RetentionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("turn,stateful,reset,chance,transactions\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.turn, r.stateful, r.reset, r.chance, r.transactions
            )
            .expect("string write");
        }
        s
    }

    pub fn turn(&self, turn: usize) -> Option<&RetentionRow> {
        self.rows.iter().find(|r| r.turn == turn)
    }
}

/// Per turn, the fraction of top-5 retrievals whose turn-1 block agrees
/// with the final target's, for the model as is and for the same model
/// with its state reset before every turn. Only transactions with at
/// least two real turns and a non-distractor first turn are counted.
pub fn memory_retention(m: Scored<'_>, ds: &SyntheticDataset, seed: u64) -> Result<RetentionReport> {
    let txns: Vec<Transaction> = ds
        .transactions
        .iter()
        .filter(|t| t.original_len >= 2 && t.turns[0].block.is_some())
        .cloned()
        .collect();
    let bs = ds.block_size();
    let stateful = embed(m.model, m.store, &txns, ds.dim(), seed, false)?;
    let reset = embed(m.model, m.store, &txns, ds.dim(), seed, true)?;
    let mut rows = Vec::new();
    for n in 0..ds.max_turns {
        let (mut sa, mut sb, mut ch, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (i, t) in txns.iter().enumerate() {
            if n >= t.original_len {
                continue;
            }
            let span = block_span(t.turns[0].block.expect("filtered"), bs);
            let target = ds.db.feature(t.final_target()).expect("target in db");
            let truth = &target[span.clone()];
            let matches = |id: u32| -> Result<bool> {
                let f = ds.db.feature(id).expect("ranked id in db");
                Ok(cosine(&f[span.clone()], truth).unwrap_or(0.0) >= BLOCK_MATCH)
            };
            let rate = |emb: &[f32]| -> Result<f64> {
                let r = crate::retrieval::retrieve(emb, &ds.db)?;
                let mut hits = 0usize;
                for &id in r.top(5) {
                    hits += usize::from(matches(id)?);
                }
                Ok(hits as f64 / 5.0)
            };
            sa += rate(&stateful[i][n])?;
            sb += rate(&reset[i][n])?;
            let mut all = 0usize;
            for &id in ds.db.ids() {
                all += usize::from(matches(id)?);
            }
            ch += all as f64 / ds.db.len() as f64;
            count += 1;
        }
        if count > 0 {
            let c = count as f64;
            rows.push(RetentionRow {
                turn: n + 1,
                stateful: sa / c,
                reset: sb / c,
                chance: ch / c,
                transactions: count,
            });
        }
    }
    Ok(RetentionReport {
        threshold: BLOCK_MATCH,
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub stages: usize,
    pub mean_r5_r8: f64,
    /// Relative change against the single-memory row, in percent; absent
    /// when the list has no single-memory entry.
    pub pct_change: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("C,mean_r5_r8,pct_change_vs_c1\n");
    for r in rows {
        let pct = r.pct_change.map(|p| p.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{}", r.stages, r.mean_r5_r8, pct).expect("string write");
    }
    s
}

/// Trains and evaluates one cascade per entry of `stages`.
pub fn ablate_num_memories(
    base: &RunConfig,
    stages: &[usize],
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    test: &SyntheticDataset,
) -> Result<Vec<AblationRow>> {
    if stages.is_empty() {
        return Err(Error::Config("memory ablation needs at least one stage count".into()));
    }
    let mut scores = Vec::with_capacity(stages.len());
    for &c in stages {
        let mut cfg = base.clone();
        cfg.train.model = crate::cascade::ModelKind::Cmntm;
        cfg.train.cascade.stages = c;
        let mut tr = Trainer::new(cfg)?;
        run_training(&mut tr, train, val, |_, _| Ok(()))?;
        scores.push((c, tr.evaluate(test)?.mean_r5_r8));
    }
    let reference = scores.iter().find(|(c, _)| *c == 1).map(|&(_, s)| s);
    Ok(scores
        .into_iter()
        .map(|(c, s)| AblationRow {
            stages: c,
            mean_r5_r8: s,
            pct_change: reference.filter(|&r| r > 0.0).map(|r| 100.0 * (s - r) / r),
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub stages: usize,
    pub locations: usize,
    pub width: usize,
    pub mean_r5_r8: Option<f64>,
    /// Median wall-clock milliseconds per transaction.
    pub ms_per_txn: f64,
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("C,P,M,mean_r5_r8,ms_per_txn\n");
    for r in rows {
        let m = r.mean_r5_r8.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", r.stages, r.locations, r.width, m, r.ms_per_txn).expect("string write");
    }
    s
}

pub const TIMING_WARMUP: usize = 10;

/// Median single-transaction inference time of freshly initialised
/// cascades in eval mode, batch size one, one row per configuration.
pub fn timing(configs: &[CascadeConfig], txns: &[Transaction], runs: usize, seed: u64) -> Result<Vec<TimingRow>> {
    if txns.is_empty() || runs == 0 {
        return Err(Error::Invalid("timing needs transactions and at least one run".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut store = ParamStore::<f32>::new();
        let model = CmNtm::new(cfg, &mut store)?;
        let d = cfg.features;
        let run_one = |i: usize| -> Result<()> {
            let t = &txns[i % txns.len()];
            let mut g = Graph::<f32>::new();
            let p = store.bind_frozen(&mut g);
            let turns = t
                .turns
                .iter()
                .map(|turn| Ok(g.constant(Tensor::new(vec![1, d], turn.query.clone())?)))
                .collect::<Result<Vec<Var>>>()?;
            let st = model.init_state(&mut g, &[eval_memory_seed(seed, i)]);
            let out = model.forward_transaction(&mut g, &p, &mut Stats::Eval(&store), st, &turns)?;
            std::hint::black_box(g.value(*out.last().expect("turn")).data()[0]);
            Ok(())
        };
        for i in 0..TIMING_WARMUP {
            run_one(i)?;
        }
        let mut times = Vec::with_capacity(runs);
        for i in 0..runs {
            let t0 = Instant::now();
            run_one(i)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        let median = if times.len() % 2 == 1 {
            times[mid]
        } else {
            (times[mid - 1] + times[mid]) / 2.0
        };
        rows.push(TimingRow {
            stages: cfg.stages,
            locations: cfg.locations,
            width: cfg.width,
            mean_r5_r8: None,
            ms_per_txn: median,
        });
    }
    Ok(rows)
}

/// Whether time never drops by more than `tolerance_ms` as C grows at a
/// fixed memory shape.
pub fn timing_is_monotone(rows: &[TimingRow], tolerance_ms: f64) -> bool {
    let mut sorted: Vec<&TimingRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.locations, r.width, r.stages));
    sorted.windows(2).all(|w| {
        let same_shape = w[0].locations == w[1].locations && w[0].width == w[1].width;
        !same_shape || w[1].ms_per_txn + tolerance_ms >= w[0].ms_per_txn
    })
}
