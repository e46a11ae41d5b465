//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
mod tensor;

pub use graph::{BatchStats, Graph, Var, BN_EPS, BN_MOMENTUM, COSINE_EPS};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors as a scalar node.
///
/// Either input having a norm at or below [`COSINE_EPS`] is rejected rather
/// than silently producing 0.
pub fn cosine_similarity<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 1 || sa != sb {
        return Err(Error::shape("cosine_similarity", &[sa, sb]));
    }
    let eps = T::of(COSINE_EPS);
    if g.value(a).l2_norm() <= eps || g.value(b).l2_norm() <= eps {
        return Err(Error::degenerate("cosine_similarity", "zero-norm vector"));
    }
    g.cosine(a, b)
}

/// Circular convolution of a weighting with a shift distribution, both
/// required to lie on the probability simplex.
pub fn circular_convolution<T: Real>(g: &mut Graph<T>, w: Var, s: Var) -> Result<Var> {
    let tol = T::of(1e-5);
    for v in [w, s] {
        let t = g.value(v);
        let row = t.shape().last().copied().unwrap_or(1);
        for r in t.data().chunks(row) {
            let total: T = r.iter().copied().sum();
            if r.iter().any(|&x| x < T::zero()) || (total - T::one()).abs() > tol {
                return Err(Error::Domain {
                    op: "circular_convolution",
                    msg: "input is not a probability vector".into(),
                });
            }
        }
    }
    g.circular_conv(w, s)
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` against central differences with step
/// `h` at every coordinate of every parameter. The relative error of one
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` rebuilds the computation from scratch on each call and must be
/// deterministic.
pub fn gradient_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
