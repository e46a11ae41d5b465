//! The cascaded memory model and the baseline aggregators it is compared with.
//!
//! Within a turn the C stages run in order. Stage `c` receives
//! `[carry; derived_c; own previous read]`, where the carry is the read
//! vector of stage `c - 1` for this turn (or of the last stage for the
//! previous turn when `c = 1`). Stages `1..C-1` see batch-normalized linear
//! projections of the query, the last stage sees the raw query. The output
//! embedding is a linear map of `[last controller output; last read]`.

mod baselines;
mod model;

pub use baselines::{ewma_aggregate, mean_aggregate, LstmBaseline, DEFAULT_EWMA_ALPHA};
pub use model::{Model, ModelKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, LstmState};
use crate::ntm::{NtmStage, StageState};
use crate::params::{ParamId, ParamStore};

/// Standard deviation of the random memory initialization.
pub const MEMORY_INIT_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Number of cascaded memory stages (C). One is a vanilla NTM.
    pub stages: usize,
    /// Memory locations per stage (P).
    pub locations: usize,
    /// Memory width (M).
    pub width: usize,
    /// Controller hidden size (H).
    pub hidden: usize,
    /// Feature dimension (D).
    pub features: usize,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            locations: 16,
            width: 32,
            hidden: 64,
            features: 32,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stages", self.stages),
            ("locations", self.locations),
            ("width", self.width),
            ("hidden", self.hidden),
            ("features", self.features),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// How batch normalization treats its statistics during a forward pass.
pub enum Stats<'a, T> {
    /// Batch moments; running estimates in the store are updated.
    Train(&'a mut ParamStore<T>),
    /// Running estimates from the store.
    Eval(&'a ParamStore<T>),
}

impl<T> Stats<'_, T> {
    pub fn is_train(&self) -> bool {
        matches!(self, Stats::Train(_))
    }
}

/// Fully connected layer followed by batch normalization, `D -> D`.
#[derive(Clone, Debug)]
pub struct DerivedProjection {
    pub fc: Linear,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl DerivedProjection {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        Self {
            fc: Linear::new(store, rng, &format!("{name}.fc"), dim, dim, true),
            scale: store.add(format!("{name}.bn.scale"), Tensor::full(vec![dim], T::one()), true),
            shift: store.add(format!("{name}.bn.shift"), Tensor::zeros(vec![dim]), true),
            running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(vec![dim]), false),
            running_var: store.add(
                format!("{name}.bn.running_var"),
                Tensor::full(vec![dim], T::one()),
                false,
            ),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], stats: &mut Stats<'_, T>, x: Var) -> Result<Var> {
        let z = self.fc.forward(g, p, x)?;
        let (scale, shift) = (p[self.scale.0], p[self.shift.0]);
        match stats {
            Stats::Train(store) => {
                let (m, v) = store.pair_mut(self.running_mean, self.running_var);
                let bs = BatchStats::Train {
                    mean: m.data_mut(),
                    var: v.data_mut(),
                };
                g.batch_norm(z, scale, shift, bs)
            }
            Stats::Eval(store) => {
                let bs = BatchStats::Eval {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                g.batch_norm(z, scale, shift, bs)
            }
        }
    }
}

/// Recurrent state of the whole cascade for a batch of transactions.
#[derive(Clone, Debug)]
pub struct CascadeState {
    pub stages: Vec<StageState>,
    /// Read vector entering the first stage of the next turn.
    pub carry: Var,
}

#[derive(Clone, Debug)]
pub struct CmNtm {
    pub config: CascadeConfig,
    pub derive: Vec<DerivedProjection>,
    pub stages: Vec<NtmStage>,
    pub fusion: Linear,
}

impl CmNtm {
    pub fn new<T: Real>(config: &CascadeConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let CascadeConfig {
            stages,
            locations,
            width,
            hidden,
            features,
            ..
        } = *config;
        let derive = (1..stages)
            .map(|c| DerivedProjection::new(store, &mut rng, &format!("derive{c}"), features))
            .collect();
        let input = 2 * width + features;
        let stages = (1..=stages)
            .map(|c| NtmStage::new(store, &mut rng, &format!("stage{c}"), input, hidden, locations, width))
            .collect();
        let fusion = Linear::new(store, &mut rng, "fusion", hidden + width, features, true);
        Ok(Self {
            config: config.clone(),
            derive,
            stages,
            fusion,
        })
    }

    /// Fresh state for a batch; row `b` of every memory is drawn from
    /// `Normal(0, 0.05^2)` seeded by `seeds[b]`.
    pub fn init_state<T: Real>(&self, g: &mut Graph<T>, seeds: &[u64]) -> CascadeState {
        let CascadeConfig {
            locations: p,
            width: m,
            hidden: h,
            ..
        } = self.config;
        let b = seeds.len();
        let normal = Normal::new(0.0, MEMORY_INIT_STD).expect("valid std");
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let stages = (0..self.stages.len())
            .map(|_| {
                let mut mem = Vec::with_capacity(b * p * m);
                for rng in rngs.iter_mut() {
                    mem.extend((0..p * m).map(|_| T::of(normal.sample(rng))));
                }
                let uniform = T::one() / T::of(p as f64);
                StageState {
                    memory: g.constant(Tensor::new(vec![b, p, m], mem).expect("shape")),
                    controller: LstmState::zeros(g, b, h),
                    prev_read: g.constant(Tensor::zeros(vec![b, m])),
                    prev_read_weights: g.constant(Tensor::full(vec![b, p], uniform)),
                    prev_write_weights: g.constant(Tensor::full(vec![b, p], uniform)),
                }
            })
            .collect();
        CascadeState {
            stages,
            carry: g.constant(Tensor::zeros(vec![b, m])),
        }
    }

    /// The C-1 derived query features; empty for a single stage.
    pub fn derive_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stats: &mut Stats<'_, T>,
        query: Var,
    ) -> Result<Vec<Var>> {
        self.derive.iter().map(|d| d.forward(g, p, stats, query)).collect()
    }

    /// One turn through all stages. Returns the output embedding `[B, D]`
    /// and the updated state.
    pub fn turn<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stats: &mut Stats<'_, T>,
        state: &CascadeState,
        query: Var,
    ) -> Result<(Var, CascadeState)> {
        let d = self.config.features;
        let sq = g.shape(query);
        if sq.len() != 2 || sq[1] != d {
            return Err(Error::shape("cascade_turn", &[sq, &[d]]));
        }
        let mut inputs = self.derive_features(g, p, stats, query)?;
        inputs.push(query);
        let mut carry = state.carry;
        let mut next = Vec::with_capacity(self.stages.len());
        let mut ctrl = None;
        for ((stage, st), feat) in self.stages.iter().zip(&state.stages).zip(inputs) {
            let x = g.concat(&[carry, feat, st.prev_read], 1)?;
            let out = stage.step(g, p, st, x)?;
            carry = out.read;
            ctrl = Some(out.controller);
            next.push(out.state);
        }
        let ctrl = ctrl.expect("at least one stage");
        let fused = g.concat(&[ctrl, carry], 1)?;
        let emb = self.fusion.forward(g, p, fused)?;
        Ok((emb, CascadeState { stages: next, carry }))
    }

    /// Per-turn embeddings for `turns`, each `[B, D]`.
    pub fn forward_transaction<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        stats: &mut Stats<'_, T>,
        state: CascadeState,
        turns: &[Var],
    ) -> Result<Vec<Var>> {
        let mut state = state;
        let mut out = Vec::with_capacity(turns.len());
        for &q in turns {
            let (emb, next) = self.turn(g, p, stats, &state, q)?;
            out.push(emb);
            state = next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stages: usize) -> CascadeConfig {
        CascadeConfig {
            stages,
            locations: 4,
            width: 8,
            hidden: 16,
            features: 8,
            seed: 5,
        }
    }

    fn queries(g: &mut Graph<f64>, n: usize, b: usize, d: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let data = (0..b * d).map(|_| normal.sample(&mut rng)).collect();
                g.constant(Tensor::new(vec![b, d], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn derived_features_count_and_shape() {
        for c in [1, 3] {
            let mut store = ParamStore::<f64>::new();
            let model = CmNtm::new(&cfg(c), &mut store).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let q = queries(&mut g, 1, 3, 8, 1)[0];
            let feats = model
                .derive_features(&mut g, &p, &mut Stats::Train(&mut store), q)
                .unwrap();
            assert_eq!(feats.len(), c - 1);
            for f in feats {
                assert_eq!(g.shape(f), &[3, 8]);
            }
        }
    }

    #[test]
    fn identity_projection_of_identical_rows_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let model = CmNtm::new(&cfg(2), &mut store).unwrap();
        let fc = &model.derive[0].fc;
        *store.get_mut(fc.weight) = Tensor::eye(8);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let q = g.constant(Tensor::new(vec![2, 8], [row.clone(), row].concat()).unwrap());
        let f = model
            .derive_features(&mut g, &p, &mut Stats::Train(&mut store), q)
            .unwrap();
        assert!(g.value(f[0]).data().iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn stage_input_is_read_feature_read() {
        let mut store = ParamStore::<f64>::new();
        let model = CmNtm::new(&cfg(3), &mut store).unwrap();
        for s in &model.stages {
            assert_eq!(s.input_size(), 8 + 8 + 8);
        }
    }

    #[test]
    fn embeddings_have_feature_shape() {
        for c in [1, 2, 4] {
            let mut store = ParamStore::<f64>::new();
            let model = CmNtm::new(&cfg(c), &mut store).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let qs = queries(&mut g, 3, 2, 8, 2);
            let st = model.init_state(&mut g, &[1, 2]);
            let out = model
                .forward_transaction(&mut g, &p, &mut Stats::Train(&mut store), st, &qs)
                .unwrap();
            assert_eq!(out.len(), 3);
            for o in out {
                assert_eq!(g.shape(o), &[2, 8]);
            }
        }
    }

    #[test]
    fn init_state_is_seeded() {
        let mut store = ParamStore::<f64>::new();
        let model = CmNtm::new(&cfg(2), &mut store).unwrap();
        let mut g = Graph::<f64>::new();
        let a = model.init_state(&mut g, &[9]);
        let b = model.init_state(&mut g, &[9]);
        let c = model.init_state(&mut g, &[10]);
        let mem = |s: &CascadeState| g.value(s.stages[0].memory).data().to_vec();
        assert_eq!(mem(&a), mem(&b));
        assert_ne!(mem(&a), mem(&c));
        for &w in g.value(a.stages[1].prev_read_weights).data() {
            assert_eq!(w, 0.25);
        }
    }

    #[test]
    fn memory_init_mean_is_near_zero() {
        let config = CascadeConfig {
            locations: 16,
            width: 32,
            ..cfg(1)
        };
        let mut store = ParamStore::<f64>::new();
        let model = CmNtm::new(&config, &mut store).unwrap();
        let mut g = Graph::new();
        let st = model.init_state(&mut g, &[123]);
        let mem = g.value(st.stages[0].memory).data();
        let mean = mem.iter().sum::<f64>() / mem.len() as f64;
        assert!(mean.abs() <= 3.0 * MEMORY_INIT_STD / (512f64).sqrt());
    }

    #[test]
    fn rejects_wrong_query_width() {
        let mut store = ParamStore::<f64>::new();
        let model = CmNtm::new(&cfg(2), &mut store).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let st = model.init_state(&mut g, &[1, 2]);
        let q = g.constant(Tensor::zeros(vec![2, 7]));
        assert!(model.turn(&mut g, &p, &mut Stats::Train(&mut store), &st, q).is_err());
    }
}
