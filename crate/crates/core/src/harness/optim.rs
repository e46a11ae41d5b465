use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with bias correction over the trainable entries of a store, in
/// store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<_> = store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads` holds one gradient per trainable entry;
    /// `None` means the entry did not influence the loss.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let trainable = store.entries_mut().iter_mut().filter(|e| e.trainable);
        for (((entry, m), v), g) in trainable.zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let Some(g) = g else { continue };
            let p = entry.tensor.data_mut();
            for i in 0..p.len() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * m.data()[i] / (v.data()[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients.
pub fn global_norm(grads: &[Option<Vec<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::vector(vec![1.0, -1.0]), true);
        store.add("frozen", Tensor::vector(vec![5.0]), false);
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.update(&mut store, &[Some(vec![3.0, -0.5])]).unwrap();
        let w = store.entries()[0].tensor.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.entries()[1].tensor.data(), &[5.0]);
        assert!(adam.update(&mut store, &[]).is_err());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::vector(vec![4.0]), true);
        let mut adam = Adam::new(&store, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..1000 {
            let x = store.entries()[0].tensor.data()[0];
            adam.update(&mut store, &[Some(vec![2.0 * (x - 1.0)])]).unwrap();
        }
        assert!((store.entries()[0].tensor.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_deref(), Some(&[3.0f32, 4.0][..]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
