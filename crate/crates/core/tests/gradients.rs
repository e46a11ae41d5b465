//! Tape gradients against central finite differences in double precision.

use cmntm_core::autodiff::{gradient_check, BatchStats, Graph, Tensor, Var};
use cmntm_core::cascade::{CascadeConfig, CmNtm, LstmBaseline, Stats};
use cmntm_core::layers::{Lstm, LstmState};
use cmntm_core::ntm::NtmStage;
use cmntm_core::params::ParamStore;
use cmntm_core::retrieval::{batch_loss, transaction_loss};
use cmntm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
/// Step of the single-primitive checks.
const PRIMITIVE_H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an output to a scalar through fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_primitive<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
        let report = gradient_check(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, seed)
            },
            &params,
            PRIMITIVE_H,
        )
        .unwrap();
        assert!(report.max_rel_error <= PRIMITIVE_TOL, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn elementwise_primitives() {
    check_primitive("add", &[&[3, 4], &[4]], -2.0, 2.0, |g, v| g.add(v[0], v[1]));
    check_primitive("sub", &[&[3, 1], &[1, 4]], -2.0, 2.0, |g, v| g.sub(v[0], v[1]));
    check_primitive("mul", &[&[2, 3, 4], &[2, 1, 4]], -2.0, 2.0, |g, v| g.mul(v[0], v[1]));
    check_primitive("div", &[&[3, 4], &[3, 1]], 0.5, 2.0, |g, v| g.div(v[0], v[1]));
    check_primitive("pow", &[&[3, 4], &[3, 1]], 0.5, 2.0, |g, v| g.pow(v[0], v[1]));
    check_primitive("scale", &[&[5]], -2.0, 2.0, |g, v| Ok(g.scale(v[0], 0.7)));
    check_primitive("sigmoid", &[&[6]], -3.0, 3.0, |g, v| Ok(g.sigmoid(v[0])));
    check_primitive("tanh", &[&[6]], -3.0, 3.0, |g, v| Ok(g.tanh(v[0])));
    check_primitive("softplus", &[&[6]], -3.0, 3.0, |g, v| Ok(g.softplus(v[0])));
    check_primitive("exp", &[&[6]], -2.0, 2.0, |g, v| Ok(g.exp(v[0])));
    check_primitive("ln", &[&[6]], 0.5, 3.0, |g, v| g.ln(v[0]));
}

#[test]
fn structural_primitives() {
    check_primitive("matmul", &[&[3, 4], &[4, 2]], -1.0, 1.0, |g, v| g.matmul(v[0], v[1]));
    check_primitive("bmm", &[&[2, 3, 4], &[2, 4, 5]], -1.0, 1.0, |g, v| g.matmul(v[0], v[1]));
    check_primitive("concat", &[&[2, 3], &[2, 2]], -1.0, 1.0, |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check_primitive("slice", &[&[3, 6]], -1.0, 1.0, |g, v| g.slice(v[0], 1, 2, 3));
    check_primitive("reshape", &[&[2, 6]], -1.0, 1.0, |g, v| g.reshape(v[0], &[3, 4]));
    check_primitive("sum", &[&[2, 3]], -1.0, 1.0, |g, v| Ok(g.sum(v[0])));
    check_primitive("mean", &[&[2, 3]], -1.0, 1.0, |g, v| Ok(g.mean(v[0])));
    check_primitive("sum_axis", &[&[2, 3, 4]], -1.0, 1.0, |g, v| g.sum_axis(v[0], 1));
}

#[test]
fn normalizing_primitives() {
    check_primitive("softmax", &[&[3, 5]], -2.0, 2.0, |g, v| g.softmax(v[0]));
    check_primitive("log_sum_exp", &[&[3, 5]], -2.0, 2.0, |g, v| g.log_sum_exp(v[0]));
    check_primitive("l2_norm", &[&[3, 5]], -2.0, 2.0, |g, v| g.l2_norm(v[0]));
    check_primitive("cosine", &[&[4, 1, 6], &[1, 3, 6]], -1.0, 1.0, |g, v| {
        g.cosine(v[0], v[1])
    });
    check_primitive("circular_conv", &[&[2, 5], &[2, 3]], 0.1, 1.0, |g, v| {
        g.circular_conv(v[0], v[1])
    });
    check_primitive("batch_norm", &[&[4, 3], &[3], &[3]], -1.0, 1.0, |g, v| {
        let (mut m, mut s) = (vec![0.0; 3], vec![1.0; 3]);
        g.batch_norm(
            v[0],
            v[1],
            v[2],
            BatchStats::Train {
                mean: &mut m,
                var: &mut s,
            },
        )
    });
    check_primitive("batch_norm_eval", &[&[4, 3], &[3], &[3]], -1.0, 1.0, |g, v| {
        g.batch_norm(
            v[0],
            v[1],
            v[2],
            BatchStats::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[0.5, 1.5, 2.0],
            },
        )
    });
}

#[test]
fn quadratic_gradient() {
    let x = Tensor::vector(vec![3.0]);
    let r = gradient_check(
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        },
        &[x],
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
    assert!((r.analytic - 6.0).abs() < 1e-12);
}

#[test]
fn softmax_cross_entropy_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = rand_tensor(&mut rng, &[4, 5], -2.0, 2.0);
    let mut onehot = Tensor::zeros(vec![4, 5]);
    for r in 0..4 {
        onehot.data_mut()[r * 5 + (r * 2) % 5] = 1.0;
    }
    let r = gradient_check(
        |g, v| {
            let p = g.softmax(v[0])?;
            let lp = g.ln(p)?;
            let y = g.constant(onehot.clone());
            let t = g.mul(lp, y)?;
            let s = g.mean(t);
            Ok(g.neg(s))
        },
        &[logits],
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn cosine_with_itself_is_stationary() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.5]));
    let c = cmntm_core::autodiff::cosine_similarity(&mut g, x, x).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);
    g.backward(c).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|d| d.abs() < 1e-12));
}

/// Params of `store` that are trainable, with their store indices.
fn trainable(store: &ParamStore<f64>) -> (Vec<usize>, Vec<Tensor<f64>>) {
    store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, e)| (i, e.tensor.clone()))
        .unzip()
}

/// Rebinds the store with trainable entries replaced by `vars`.
fn bind_with(g: &mut Graph<f64>, store: &ParamStore<f64>, idx: &[usize], vars: &[Var]) -> Vec<Var> {
    let mut out = store.bind_frozen(g);
    for (&i, &v) in idx.iter().zip(vars) {
        out[i] = v;
    }
    out
}

#[test]
fn lstm_controller_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lstm = Lstm::new(&mut store, &mut rng, "c", 5, 4);
    let (idx, params) = trainable(&store);
    let x = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let r = gradient_check(
        |g, v| {
            let p = bind_with(g, &store, &idx, v);
            let xv = g.constant(x.clone());
            let s0 = LstmState::zeros(g, 2, 4);
            let (h1, s1) = lstm.step(g, &p, xv, s0)?;
            let x2 = h1_pad(g, h1)?;
            let (h2, _) = lstm.step(g, &p, x2, s1)?;
            weighted_sum(g, h2, 1)
        },
        &params,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= PRIMITIVE_TOL, "{r:?}");
}

/// Feeds a hidden state back as a 5-wide input.
fn h1_pad(g: &mut Graph<f64>, h: Var) -> Result<Var> {
    let extra = g.slice(h, 1, 0, 1)?;
    g.concat(&[h, extra], 1)
}

#[test]
fn stage_step_gradients() {
    let (p, m, hid, d) = (4, 8, 16, 8);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stage = NtmStage::new(&mut store, &mut rng, "s", 2 * m + d, hid, p, m);
    let model_cfg = CascadeConfig {
        stages: 1,
        locations: p,
        width: m,
        hidden: hid,
        features: d,
        seed: 0,
    };
    let mut init_store = ParamStore::<f64>::new();
    let holder = CmNtm::new(&model_cfg, &mut init_store).unwrap();
    let (idx, params) = trainable(&store);
    let x = rand_tensor(&mut rng, &[2, 2 * m + d], -1.0, 1.0);
    let r = gradient_check(
        |g, v| {
            let pv = bind_with(g, &store, &idx, v);
            let st = holder.init_state(g, &[1, 2]).stages[0];
            let xv = g.constant(x.clone());
            let out = stage.step(g, &pv, &st, xv)?;
            let out2 = stage.step(g, &pv, &out.state, xv)?;
            weighted_sum(g, out2.read, 2)
        },
        &params,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= MODEL_TOL, "{r:?}");
}

fn gradcheck_cascade(stages: usize, turns: usize) -> f64 {
    let cfg = CascadeConfig {
        stages,
        locations: 4,
        width: 8,
        hidden: 16,
        features: 8,
        seed: 21,
    };
    let mut store = ParamStore::<f64>::new();
    let model = CmNtm::new(&cfg, &mut store).unwrap();
    let (idx, params) = trainable(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let queries: Vec<_> = (0..turns).map(|_| rand_tensor(&mut rng, &[2, 8], -1.0, 1.0)).collect();
    let targets: Vec<_> = (0..turns).map(|_| rand_tensor(&mut rng, &[2, 8], -1.0, 1.0)).collect();
    let r = gradient_check(
        |g, v| {
            let pv = bind_with(g, &store, &idx, v);
            let mut scratch = store.clone();
            let qs: Vec<Var> = queries.iter().map(|q| g.constant(q.clone())).collect();
            let ts: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            let st = model.init_state(g, &[5, 6]);
            let preds = model.forward_transaction(g, &pv, &mut Stats::Train(&mut scratch), st, &qs)?;
            transaction_loss(g, &preds, &ts)
        },
        &params,
        H,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn single_turn_cascade_gradients() {
    let e = gradcheck_cascade(2, 1);
    assert!(e <= MODEL_TOL, "max relative error {e}");
}

#[test]
fn full_transaction_gradients() {
    let e = gradcheck_cascade(2, 3);
    assert!(e <= MODEL_TOL, "max relative error {e}");
}

#[test]
fn lstm_baseline_gradients() {
    let mut store = ParamStore::<f64>::new();
    let model = LstmBaseline::new(&mut store, 6, 5, 3);
    let (idx, params) = trainable(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let qs: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 6], -1.0, 1.0)).collect();
    let ts: Vec<_> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 6], -1.0, 1.0)).collect();
    let r = gradient_check(
        |g, v| {
            let pv = bind_with(g, &store, &idx, v);
            let q: Vec<Var> = qs.iter().map(|q| g.constant(q.clone())).collect();
            let t: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let preds = model.forward_transaction(g, &pv, &q, false)?;
            transaction_loss(g, &preds, &t)
        },
        &params,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= MODEL_TOL, "{r:?}");
}

#[test]
fn batch_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let r = gradient_check(|g, v| batch_loss(g, v[0], v[1]), &[x, y], H).unwrap();
    assert!(r.max_rel_error <= PRIMITIVE_TOL, "{r:?}");
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    assert!(g.backward(x).is_err());
}
