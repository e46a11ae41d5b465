use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::cascade::{CascadeConfig, CmNtm, LstmBaseline, Stats};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Cascaded memory model with the configured number of stages.
    Cmntm,
    /// Single-stage memory model.
    Vntm,
    Lstm,
    Ewma,
    Mean,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cmntm => "cmntm",
            ModelKind::Vntm => "vntm",
            ModelKind::Lstm => "lstm",
            ModelKind::Ewma => "ewma",
            ModelKind::Mean => "mean",
        }
    }

    pub fn is_cascade(self) -> bool {
        matches!(self, ModelKind::Cmntm | ModelKind::Vntm)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cmntm" => Ok(ModelKind::Cmntm),
            "vntm" => Ok(ModelKind::Vntm),
            "lstm" => Ok(ModelKind::Lstm),
            "ewma" => Ok(ModelKind::Ewma),
            "mean" => Ok(ModelKind::Mean),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Any multi-turn query aggregator that maps turn features to per-turn
/// retrieval embeddings.
#[derive(Clone, Debug)]
pub enum Model {
    Cascade(CmNtm),
    Lstm(LstmBaseline),
    Ewma { alpha: f64 },
    Mean,
}

impl Model {
    pub fn build<T: Real>(
        kind: ModelKind,
        config: &CascadeConfig,
        lstm_hidden: usize,
        ewma_alpha: f64,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Cmntm => Model::Cascade(CmNtm::new(config, store)?),
            ModelKind::Vntm => Model::Cascade(CmNtm::new(
                &CascadeConfig {
                    stages: 1,
                    ..config.clone()
                },
                store,
            )?),
            ModelKind::Lstm => {
                if lstm_hidden == 0 {
                    return Err(Error::Config("lstm_hidden must be positive".into()));
                }
                Model::Lstm(LstmBaseline::new(store, config.features, lstm_hidden, config.seed))
            }
            ModelKind::Ewma => {
                if !(ewma_alpha > 0.0 && ewma_alpha <= 1.0) {
                    return Err(Error::Config(format!("ewma alpha {ewma_alpha} outside (0, 1]")));
                }
                Model::Ewma { alpha: ewma_alpha }
            }
            ModelKind::Mean => Model::Mean,
        })
    }

    /// Whether the model has parameters to fit.
    pub fn trainable(&self) -> bool {
        matches!(self, Model::Cascade(_) | Model::Lstm(_))
    }

    pub fn features(&self) -> Option<usize> {
        match self {
            Model::Cascade(m) => Some(m.config.features),
            Model::Lstm(m) => Some(m.lstm.inputs),
            _ => None,
        }
    }

    /// Per-turn embeddings for a batch. `seeds` seeds the memory of each
    /// batch row. With `reset_each_turn` the model forgets all history
    /// before every turn.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stats: &mut Stats<'_, T>,
        turns: &[Var],
        seeds: &[u64],
        reset_each_turn: bool,
    ) -> Result<Vec<Var>> {
        match self {
            Model::Cascade(m) => {
                if reset_each_turn {
                    turns
                        .iter()
                        .map(|&q| {
                            let st = m.init_state(g, seeds);
                            Ok(m.turn(g, p, stats, &st, q)?.0)
                        })
                        .collect()
                } else {
                    let st = m.init_state(g, seeds);
                    m.forward_transaction(g, p, stats, st, turns)
                }
            }
            Model::Lstm(m) => m.forward_transaction(g, p, turns, reset_each_turn),
            Model::Mean => {
                let mut out = Vec::with_capacity(turns.len());
                let mut total: Option<Var> = None;
                for (n, &q) in turns.iter().enumerate() {
                    if reset_each_turn {
                        out.push(q);
                        continue;
                    }
                    let s = match total {
                        Some(t) => g.add(t, q)?,
                        None => q,
                    };
                    total = Some(s);
                    out.push(g.scale(s, T::one() / T::of((n + 1) as f64)));
                }
                Ok(out)
            }
            Model::Ewma { alpha } => {
                let a = T::of(*alpha);
                let mut out: Vec<Var> = Vec::with_capacity(turns.len());
                for &q in turns {
                    let next = match out.last() {
                        Some(&prev) if !reset_each_turn => {
                            let x = g.scale(q, a);
                            let y = g.scale(prev, T::one() - a);
                            g.add(x, y)?
                        }
                        _ => q,
                    };
                    out.push(next);
                }
                Ok(out)
            }
        }
    }
}
