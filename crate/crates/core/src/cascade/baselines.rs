use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Lstm, LstmState};
use crate::params::ParamStore;

pub const DEFAULT_EWMA_ALPHA: f64 = 0.5;

/// Arithmetic mean of a non-empty list of equal-length features.
pub fn mean_aggregate<T: Real>(features: &[&[T]]) -> Result<Vec<T>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Invalid("mean_aggregate: no features".into()))?;
    let mut acc = vec![T::zero(); first.len()];
    for f in features {
        if f.len() != acc.len() {
            return Err(Error::shape("mean_aggregate", &[&[acc.len()], &[f.len()]]));
        }
        acc.iter_mut().zip(*f).for_each(|(a, &x)| *a = *a + x);
    }
    let n = T::of(features.len() as f64);
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Exponentially weighted moving average, `m_1 = f_1`,
/// `m_n = alpha f_n + (1 - alpha) m_{n-1}`.
pub fn ewma_aggregate<T: Real>(features: &[&[T]], alpha: T) -> Result<Vec<T>> {
    if !(alpha > T::zero() && alpha <= T::one()) {
        return Err(Error::Config(format!("ewma alpha {alpha} outside (0, 1]")));
    }
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::Invalid("ewma_aggregate: no features".into()))?;
    let mut acc = first.to_vec();
    for f in rest {
        if f.len() != acc.len() {
            return Err(Error::shape("ewma_aggregate", &[&[acc.len()], &[f.len()]]));
        }
        acc.iter_mut()
            .zip(*f)
            .for_each(|(a, &x)| *a = alpha * x + (T::one() - alpha) * *a);
    }
    Ok(acc)
}

/// LSTM over turn features with a per-turn linear read-out to the feature
/// dimension.
#[derive(Clone, Debug)]
pub struct LstmBaseline {
    pub lstm: Lstm,
    pub proj: Linear,
}

impl LstmBaseline {
    pub fn new<T: Real>(store: &mut ParamStore<T>, features: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            lstm: Lstm::new(store, &mut rng, "lstm", features, hidden),
            proj: Linear::new(store, &mut rng, "lstm.proj", hidden, features, true),
        }
    }

    /// Per-turn outputs. With `reset_each_turn` every turn starts from the
    /// zero state.
    pub fn forward_transaction<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        turns: &[Var],
        reset_each_turn: bool,
    ) -> Result<Vec<Var>> {
        let Some(&first) = turns.first() else {
            return Ok(Vec::new());
        };
        let b = g.shape(first)[0];
        let zero = LstmState::zeros(g, b, self.lstm.hidden);
        let mut state = zero;
        let mut out = Vec::with_capacity(turns.len());
        for &q in turns {
            if reset_each_turn {
                state = zero;
            }
            let (h, next) = self.lstm.step(g, p, q, state)?;
            out.push(self.proj.forward(g, p, h)?);
            state = next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn mean_examples() {
        assert_eq!(mean_aggregate(&[&[1.0f64, 2.0][..]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mean_aggregate(&[&[1.0f64][..], &[3.0][..]]).unwrap(), vec![2.0]);
        assert!(mean_aggregate::<f64>(&[]).is_err());
    }

    #[test]
    fn ewma_examples() {
        let f = [&[0.0f64][..], &[2.0][..], &[4.0][..]];
        // 0 -> 1 -> 2.5
        assert_eq!(ewma_aggregate(&f, 0.5).unwrap(), vec![2.5]);
        assert_eq!(ewma_aggregate(&f, 1.0).unwrap(), vec![4.0]);
        assert_eq!(ewma_aggregate(&f[..1], 0.3).unwrap(), vec![0.0]);
        assert!(ewma_aggregate::<f64>(&[], 0.5).is_err());
        assert!(ewma_aggregate(&f, 0.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut store = ParamStore::<f64>::new();
        let model = LstmBaseline::new(&mut store, 4, 6, 1);
        for e in store.entries_mut() {
            e.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let q = g.constant(Tensor::full(vec![2, 4], 0.7));
        let out = model.forward_transaction(&mut g, &p, &[q, q], false).unwrap();
        for o in out {
            assert!(g.value(o).data().iter().all(|&x| x == 0.0));
        }
    }
}
