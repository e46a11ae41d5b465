use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, GradCheck, Graph, Tensor, Var};
use crate::cascade::{CascadeConfig, CmNtm, Stats};
use crate::error::Result;
use crate::params::ParamStore;
use crate::retrieval::transaction_loss;

/// Shape of the end-to-end check.
#[derive(Clone, Copy, Debug)]
pub struct GradcheckShape {
    pub stages: usize,
    pub locations: usize,
    pub width: usize,
    pub features: usize,
    pub hidden: usize,
    pub turns: usize,
    pub batch: usize,
}

impl Default for GradcheckShape {
    fn default() -> Self {
        Self {
            stages: 2,
            locations: 4,
            width: 8,
            features: 8,
            hidden: 16,
            turns: 3,
            batch: 2,
        }
    }
}

/// Central-difference check, in double precision, of the transaction loss
/// of a randomly initialised cascade on random queries and targets with
/// respect to every trainable parameter.
pub fn transaction_gradcheck(shape: &GradcheckShape, seed: u64, h: f64) -> Result<GradCheck> {
    let cfg = CascadeConfig {
        stages: shape.stages,
        locations: shape.locations,
        width: shape.width,
        hidden: shape.hidden,
        features: shape.features,
        seed,
    };
    let mut store = ParamStore::<f64>::new();
    let model = CmNtm::new(&cfg, &mut store)?;
    let (idx, params): (Vec<usize>, Vec<Tensor<f64>>) = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, e)| (i, e.tensor.clone()))
        .unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C4E_C4EC);
    let mut sample = || -> Result<Tensor<f64>> {
        let n = shape.batch * shape.features;
        Tensor::new(
            vec![shape.batch, shape.features],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    };
    let queries = (0..shape.turns).map(|_| sample()).collect::<Result<Vec<_>>>()?;
    let targets = (0..shape.turns).map(|_| sample()).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..shape.batch as u64).map(|i| seed.wrapping_add(i + 1)).collect();
    gradient_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let mut pv = store.bind_frozen(g);
            for (&i, &var) in idx.iter().zip(v) {
                pv[i] = var;
            }
            let mut scratch = store.clone();
            let qs: Vec<Var> = queries.iter().map(|q| g.constant(q.clone())).collect();
            let ts: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            let st = model.init_state(g, &seeds);
            let preds = model.forward_transaction(g, &pv, &mut Stats::Train(&mut scratch), st, &qs)?;
            transaction_loss(g, &preds, &ts)
        },
        &params,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cascade_passes() {
        let shape = GradcheckShape {
            turns: 2,
            ..GradcheckShape::default()
        };
        let r = transaction_gradcheck(&shape, 3, 1e-4).unwrap();
        assert!(r.coordinates > 0);
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }
}
