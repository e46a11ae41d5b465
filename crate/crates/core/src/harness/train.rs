use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cascade::{Model, Stats};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, turn_queries, RecallReport};
use crate::harness::optim::{clip_global_norm, global_norm, Adam};
use crate::params::ParamStore;
use crate::retrieval::{transaction_loss, CandidateDb};
use crate::synthdata::{mix_seed, SyntheticDataset, Transaction};

pub const METRICS_HEADER: &str = "epoch,train_loss,r1,r5,r8,r10,mean_r5_r8";

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const MEMORY_STREAM: u64 = 0x3E3_0001;

/// Transaction loss of one batch and the gradients of every trainable
/// entry of `store`. Batch-norm running statistics in `store` are updated.
fn loss_and_grads(
    model: &Model,
    store: &mut ParamStore<f32>,
    batch: &[&Transaction],
    db: &CandidateDb,
    seeds: &[u64],
    want_grads: bool,
) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let dim = db.dim();
    let n = batch[0].len();
    if batch.iter().any(|t| t.len() != n) {
        return Err(Error::Invalid("batch transactions must be padded to one length".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g);
    let mut queries = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        queries.push(g.constant(turn_queries(batch, k, dim)?));
        let mut y = Vec::with_capacity(batch.len() * dim);
        for t in batch {
            let id = t.turns[k].target_id;
            let f = db
                .feature(id)
                .ok_or_else(|| Error::Invalid(format!("unknown target id {id}")))?;
            y.extend_from_slice(f);
        }
        targets.push(g.constant(Tensor::new(vec![batch.len(), dim], y)?));
    }
    let preds = model.forward(&mut g, &p, &mut Stats::Train(store), &queries, seeds, false)?;
    let loss = transaction_loss(&mut g, &preds, &targets)?;
    let value = g.value(loss).item() as f64;
    if !want_grads || !model.trainable() || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = store
        .entries()
        .iter()
        .zip(&p)
        .filter(|(e, _)| e.trainable)
        .map(|(_, &v): (_, &Var)| g.grad(v).map(|s| s.to_vec()))
        .collect();
    Ok((value, grads))
}

/// One line of the per-epoch metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub val: RecallReport,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let v = &self.val;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.train_loss, v.r1, v.r5, v.r8, v.r10, v.mean_r5_r8
        )
    }
}

/// Model parameters plus optimizer state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(t.model, &t.cascade, t.lstm_hidden, t.ewma_alpha, &mut store)?;
        let adam = Adam::new(&store, t.learning_rate, t.beta1, t.beta2, t.adam_eps);
        Ok(Self {
            config,
            model,
            store,
            adam,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut tr = Self::new(ckpt.config.clone())?;
        tr.store.load_from(&ckpt.params)?;
        let names: Vec<String> = tr
            .store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect();
        let pick = |moments: &[(String, Tensor<f32>)], slot: &mut Vec<Tensor<f32>>| -> Result<()> {
            if moments.len() != names.len() {
                return Err(Error::Invalid(format!(
                    "checkpoint has {} optimizer moments for {} tensors",
                    moments.len(),
                    names.len()
                )));
            }
            for ((name, t), (want, dst)) in moments.iter().zip(names.iter().zip(slot.iter_mut())) {
                if name != want || t.shape() != dst.shape() {
                    return Err(Error::Invalid(format!("optimizer moment {name} does not match {want}")));
                }
                *dst = t.clone();
            }
            Ok(())
        };
        pick(&ckpt.adam_m, &mut tr.adam.m)?;
        pick(&ckpt.adam_v, &mut tr.adam.v)?;
        tr.adam.step = ckpt.step;
        tr.epoch = ckpt.epoch;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        let names = self
            .store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone());
        let adam_m = names.clone().zip(self.adam.m.iter().cloned()).collect();
        let adam_v = names.zip(self.adam.v.iter().cloned()).collect();
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.adam.step,
            params,
            adam_m,
            adam_v,
        }
    }

    fn diverged(&self, step: u64, detail: &str, grads: &[Option<Vec<f32>>]) -> Error {
        let pnorm = self
            .store
            .entries()
            .iter()
            .flat_map(|e| e.tensor.data())
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        Error::Diverged {
            epoch: self.epoch as usize,
            step: step as usize,
            diagnostic: format!("{detail}; parameter norm {pnorm}, gradient norm {}", global_norm(grads)),
        }
    }

    /// Loss of `batch` without changing parameters or running statistics.
    pub fn batch_loss(&self, batch: &[&Transaction], db: &CandidateDb, seeds: &[u64]) -> Result<f64> {
        let mut scratch = self.store.clone();
        Ok(loss_and_grads(&self.model, &mut scratch, batch, db, seeds, false)?.0)
    }

    /// One optimisation step. Returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&Transaction], db: &CandidateDb, seeds: &[u64]) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(&self.model, &mut self.store, batch, db, seeds, true)?;
        if !loss.is_finite() {
            return Err(self.diverged(self.adam.step, &format!("loss is {loss}"), &grads));
        }
        if !self.model.trainable() {
            return Ok(loss);
        }
        clip_global_norm(&mut grads, self.config.train.grad_clip);
        self.adam.update(&mut self.store, &grads)?;
        if self.store.entries().iter().any(|e| !e.tensor.is_finite()) {
            return Err(self.diverged(self.adam.step, "non-finite parameters after update", &grads));
        }
        Ok(loss)
    }

    /// Memory seeds of training transactions in `epoch`.
    pub fn memory_seeds(&self, epoch: u64, indices: &[usize]) -> Vec<u64> {
        let base = mix_seed(mix_seed(self.config.train.seed, MEMORY_STREAM), epoch);
        indices.iter().map(|&i| mix_seed(base, i as u64)).collect()
    }

    /// Seeded shuffle of `0..count` for `epoch`.
    pub fn epoch_order(&self, epoch: u64, count: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.config.train.seed, SHUFFLE_STREAM), epoch));
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch over `ds` and returns the mean batch loss.
    /// A trailing batch smaller than two transactions is skipped.
    pub fn train_epoch(&mut self, ds: &SyntheticDataset) -> Result<f64> {
        let order = self.epoch_order(self.epoch, ds.transactions.len());
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(self.config.train.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&Transaction> = idx.iter().map(|&i| &ds.transactions[i]).collect();
            let seeds = self.memory_seeds(self.epoch, idx);
            total += self.step(&batch, &ds.db, &seeds)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    pub fn evaluate(&self, ds: &SyntheticDataset) -> Result<RecallReport> {
        evaluate(&self.model, &self.store, ds, self.config.train.seed)
    }
}

/// Trains until `config.train.epochs` epochs are complete, evaluating on
/// `val` after each one. `on_epoch` sees the trainer after every epoch,
/// e.g. to write a checkpoint.
pub fn run_training(
    trainer: &mut Trainer,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    mut on_epoch: impl FnMut(&Trainer, &MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    if train.dim() != trainer.config.task.dim || val.dim() != trainer.config.task.dim {
        return Err(Error::shape(
            "train",
            &[&[train.dim()], &[val.dim()], &[trainer.config.task.dim]],
        ));
    }
    let mut rows = Vec::new();
    while trainer.epoch < trainer.config.train.epochs as u64 {
        let train_loss = trainer.train_epoch(train)?;
        let row = MetricsRow {
            epoch: trainer.epoch,
            train_loss,
            val: trainer.evaluate(val)?,
        };
        on_epoch(trainer, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    f.flush()?;
    Ok(())
}
