//! Tape of recorded tensor operations and the reverse sweep over it.
//!
//! Every operation appends one node holding its forward value. Nodes refer
//! to their inputs by [`Var`], which always points at an earlier node, so
//! the tape is topologically ordered by construction and [`Graph::backward`]
//! is a single reverse pass.

use crate::autodiff::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clamp for the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Pow(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    SumAxis(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogSumExp(Var),
    Norm(Var),
    Cosine {
        a: Var,
        b: Var,
    },
    CircConv {
        w: Var,
        s: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Batch-norm statistics access. Train mode normalizes with batch moments
/// and folds them into the running estimates; eval mode reads them.
pub enum BatchStats<'a, T> {
    Train { mean: &'a mut [T], var: &'a mut [T] },
    Eval { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op_name, &[sa, sb]))?;
        let data = if sa == sb {
            self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ta, tb) = (broadcast_strides(sa, &out), broadcast_strides(sb, &out));
            let (va, vb) = (self.vals(a), self.vals(b));
            let mut data = vec![T::zero(); out.iter().product()];
            for_each_broadcast(&out, &ta, &tb, |o, i, j| data[o] = f(va[i], vb[j]));
            data
        };
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals(b).iter().any(|&y| y == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `a^b` for non-negative bases.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals(a).iter().any(|&x| x < T::zero()) {
            return Err(Error::Domain {
                op: "pow",
                msg: "negative base".into(),
            });
        }
        self.binary("pow", a, b, |x, y| x.powf(y), Op::Pow(a, b))
    }

    /// `k * x`.
    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let data = self.vals(x).iter().map(|&v| v * k).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Affine(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let one = self.constant(Tensor::scalar(T::one()));
        self.sub(one, x)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.vals(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.vals(x).iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "ln",
                msg: "logarithm of a non-positive value".into(),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Ln(x)))
    }

    // ---- structural -------------------------------------------------------

    /// Matrix product of rank-2 `[n,k]x[k,m]` or batched rank-3 `[b,n,k]x[b,k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, n, k, m) = match (sa.as_slice(), sb.as_slice()) {
            ([n, k], [k2, m]) if k == k2 => (1, *n, *k, *m),
            ([b1, n, k], [b2, k2, m]) if b1 == b2 && k == k2 => (*b1, *n, *k, *m),
            _ => return Err(Error::shape("matmul", &[&sa, &sb])),
        };
        let (va, vb) = (self.vals(a), self.vals(b));
        let mut out = vec![T::zero(); batch * n * m];
        for bi in 0..batch {
            let (ao, bo, oo) = (bi * n * k, bi * k * m, bi * n * m);
            for i in 0..n {
                let row = &mut out[oo + i * m..oo + (i + 1) * m];
                for p in 0..k {
                    let x = va[ao + i * k + p];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &vb[bo + p * m..bo + (p + 1) * m];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        let shape = if sa.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mismatch = inputs.iter().any(|&v| {
            let s = self.shape(v);
            s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
        });
        if mismatch {
            let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
            return Err(Error::Shape { op: "concat", shapes });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.vals(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &[&shape, &[axis, start, len]]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.vals(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &[&shape]));
        }
        let mut out = shape.clone();
        out[axis] = 1;
        let mut data = vec![T::zero(); out.iter().product()];
        let src = self.vals(x);
        let (si, so) = (strides(&shape), broadcast_strides(&out, &shape));
        for_each_broadcast(&shape, &si, &so, |_, i, o| data[o] = data[o] + src[i]);
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, Op::SumAxis(x), &[x]))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        match shape.last() {
            Some(&l) => Ok((self.value(x).len() / l, l)),
            None => Err(Error::shape(op, &[shape])),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, l) = self.last_axis("softmax", x)?;
        let src = self.vals(x);
        let mut data = vec![T::zero(); rows * l];
        for r in 0..rows {
            let row = &src[r * l..(r + 1) * l];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[r * l..(r + 1) * l];
            let mut z = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z = z + *o;
            }
            for o in out.iter_mut() {
                *o = *o / z;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// `log(sum(exp(x)))` along the last axis, which is dropped.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let (rows, l) = self.last_axis("log_sum_exp", x)?;
        let src = self.vals(x);
        let data = (0..rows)
            .map(|r| {
                let row = &src[r * l..(r + 1) * l];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
            })
            .collect();
        let shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::LogSumExp(x), &[x]))
    }

    /// Euclidean norm along the last axis, which is dropped.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, l) = self.last_axis("l2_norm", x)?;
        let src = self.vals(x);
        let data = (0..rows)
            .map(|r| src[r * l..(r + 1) * l].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Norm(x), &[x]))
    }

    // ---- model primitives -------------------------------------------------

    /// Cosine similarity along the last axis with leading dims broadcast.
    /// The denominator is clamped below at [`COSINE_EPS`], so zero vectors
    /// score 0 here; API boundaries reject them before reaching the tape.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (la, lb) = (sa.len(), sb.len());
        if la == 0 || lb == 0 || sa[la - 1] != sb[lb - 1] {
            return Err(Error::shape("cosine", &[&sa, &sb]));
        }
        let l = sa[la - 1];
        let out = broadcast_shape(&sa[..la - 1], &sb[..lb - 1]).ok_or_else(|| Error::shape("cosine", &[&sa, &sb]))?;
        let (ta, tb) = (
            broadcast_strides(&sa[..la - 1], &out),
            broadcast_strides(&sb[..lb - 1], &out),
        );
        let (va, vb) = (self.vals(a), self.vals(b));
        let eps = T::of(COSINE_EPS);
        let mut data = vec![T::zero(); out.iter().product()];
        for_each_broadcast(&out, &ta, &tb, |o, i, j| {
            let (x, y) = (&va[i * l..(i + 1) * l], &vb[j * l..(j + 1) * l]);
            let (dot, nx, ny) = dot_norms(x, y);
            data[o] = dot / (nx * ny).max(eps);
        });
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, Op::Cosine { a, b }, &[a, b]))
    }

    /// Circular convolution of weightings `w[..., P]` with shift
    /// distributions `s[..., K]` over offsets `-(K/2)..=K/2`:
    /// `out[i] = sum_k s[k] * w[(i - offset_k) mod P]`.
    pub fn circular_conv(&mut self, w: Var, s: Var) -> Result<Var> {
        let (sw, ss) = (self.shape(w).to_vec(), self.shape(s).to_vec());
        let ok = !sw.is_empty()
            && sw.len() == ss.len()
            && sw[..sw.len() - 1] == ss[..ss.len() - 1]
            && ss[ss.len() - 1] % 2 == 1;
        if !ok {
            return Err(Error::shape("circular_conv", &[&sw, &ss]));
        }
        let p = sw[sw.len() - 1];
        let k = ss[ss.len() - 1];
        let rows = self.value(w).len() / p;
        let (vw, vs) = (self.vals(w), self.vals(s));
        let mut data = vec![T::zero(); rows * p];
        for r in 0..rows {
            for i in 0..p {
                let mut acc = T::zero();
                for j in 0..k {
                    acc = acc + vs[r * k + j] * vw[r * p + shifted(i, j, k, p)];
                }
                data[r * p + i] = acc;
            }
        }
        let value = Tensor::new(sw, data)?;
        Ok(self.push(value, Op::CircConv { w, s }, &[w, s]))
    }

    /// Batch normalization of `x[B, D]` with per-feature `scale` and `shift`.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, stats: BatchStats<'_, T>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let [b, d] = sx[..] else {
            return Err(Error::shape("batch_norm", &[&sx]));
        };
        if self.shape(scale) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape("batch_norm", &[&sx, self.shape(scale), self.shape(shift)]));
        }
        let eps = T::of(BN_EPS);
        let src = self.vals(x);
        let (mean, var, train) = match stats {
            BatchStats::Train { mean, var } => {
                if b < 2 {
                    return Err(Error::Invalid(
                        "batch_norm: train mode needs a batch of at least 2".into(),
                    ));
                }
                if mean.len() != d || var.len() != d {
                    return Err(Error::shape("batch_norm", &[&sx, &[mean.len()]]));
                }
                let bt = T::of(b as f64);
                let mut mu = vec![T::zero(); d];
                let mut v = vec![T::zero(); d];
                for r in 0..b {
                    for c in 0..d {
                        mu[c] = mu[c] + src[r * d + c];
                    }
                }
                mu.iter_mut().for_each(|m| *m = *m / bt);
                for r in 0..b {
                    for c in 0..d {
                        let e = src[r * d + c] - mu[c];
                        v[c] = v[c] + e * e;
                    }
                }
                v.iter_mut().for_each(|x| *x = *x / bt);
                let mom = T::of(BN_MOMENTUM);
                let unbias = bt / T::of((b - 1) as f64);
                for c in 0..d {
                    mean[c] = (T::one() - mom) * mean[c] + mom * mu[c];
                    var[c] = (T::one() - mom) * var[c] + mom * v[c] * unbias;
                }
                (mu, v, true)
            }
            BatchStats::Eval { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::shape("batch_norm", &[&sx, &[mean.len()]]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, h) = (self.vals(scale), self.vals(shift));
        let mut xhat = vec![T::zero(); b * d];
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (src[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + h[c];
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
            &[x, scale, shift],
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into the gradients of every leaf that requires them. Calling it again
    /// without [`Graph::zero_grad`] accumulates a second copy.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, a) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Some(a), Op::Leaf, true) = (a, &node.op, node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&a).for_each(|(x, &y)| *x = *x + y),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if wants($v) {
                    let n = self.nodes[$v.0].value.len();
                    let $ga: &mut Vec<T> = adj[$v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                for (v, k) in [(*a, T::one()), (*b, sign)] {
                    with_grad!(v, |ga| {
                        let sv = broadcast_strides(self.shape(v), out_shape);
                        let so = strides(out_shape);
                        for_each_broadcast(out_shape, &so, &sv, |_, o, j| ga[j] = ga[j] + k * g[o]);
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) | Op::Pow(a, b) => {
                let (va, vb) = (self.vals(*a), self.vals(*b));
                let ta = broadcast_strides(self.shape(*a), out_shape);
                let tb = broadcast_strides(self.shape(*b), out_shape);
                let op = &node.op;
                with_grad!(*a, |ga| {
                    for_each_broadcast(out_shape, &ta, &tb, |o, p, q| {
                        let (x, y) = (va[p], vb[q]);
                        let d = match op {
                            Op::Mul(..) => y,
                            Op::Div(..) => T::one() / y,
                            _ => y * x.powf(y - T::one()),
                        };
                        ga[p] = ga[p] + g[o] * d;
                    });
                });
                with_grad!(*b, |gb| {
                    for_each_broadcast(out_shape, &ta, &tb, |o, p, q| {
                        let (x, y) = (va[p], vb[q]);
                        let d = match op {
                            Op::Mul(..) => x,
                            Op::Div(..) => -x / (y * y),
                            _ if x > T::zero() => out[o] * x.ln(),
                            _ => T::zero(),
                        };
                        gb[q] = gb[q] + g[o] * d;
                    });
                });
            }
            Op::Affine(x, k) => with_grad!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + *k * b);
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, n, k) = if sa.len() == 2 {
                    (1, sa[0], sa[1])
                } else {
                    (sa[0], sa[1], sa[2])
                };
                let m = sb[sb.len() - 1];
                let (va, vb) = (self.vals(*a), self.vals(*b));
                with_grad!(*a, |ga| {
                    for bi in 0..batch {
                        for i in 0..n {
                            let grow = &g[bi * n * m + i * m..bi * n * m + (i + 1) * m];
                            for p in 0..k {
                                let brow = &vb[bi * k * m + p * m..bi * k * m + (p + 1) * m];
                                let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                                let idx = bi * n * k + i * k + p;
                                ga[idx] = ga[idx] + s;
                            }
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for bi in 0..batch {
                        for i in 0..n {
                            let grow = &g[bi * n * m + i * m..bi * n * m + (i + 1) * m];
                            for p in 0..k {
                                let x = va[bi * n * k + i * k + p];
                                if x == T::zero() {
                                    continue;
                                }
                                let off = bi * k * m + p * m;
                                for (o, &y) in gb[off..off + m].iter_mut().zip(grow) {
                                    *o = *o + x * y;
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => with_grad!(*x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }),
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    with_grad!(v, |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + len];
                            for (a, &b) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *a = *a + b;
                            }
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => with_grad!(*x, |gx| {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let len = out_shape[*axis] * inner;
                for o in 0..outer {
                    let base = (o * sx[*axis] + start) * inner;
                    for (a, &b) in gx[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                        *a = *a + b;
                    }
                }
            }),
            Op::Sum(x) => with_grad!(*x, |gx| {
                gx.iter_mut().for_each(|a| *a = *a + g[0]);
            }),
            Op::SumAxis(x) => with_grad!(*x, |gx| {
                let sx = self.shape(*x);
                let (si, so) = (strides(sx), broadcast_strides(out_shape, sx));
                for_each_broadcast(sx, &si, &so, |_, i, o| gx[i] = gx[i] + g[o]);
            }),
            Op::Sigmoid(x) => with_grad!(*x, |gx| {
                for ((a, &y), &d) in gx.iter_mut().zip(out).zip(g) {
                    *a = *a + d * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => with_grad!(*x, |gx| {
                for ((a, &y), &d) in gx.iter_mut().zip(out).zip(g) {
                    *a = *a + d * (T::one() - y * y);
                }
            }),
            Op::Softplus(x) => with_grad!(*x, |gx| {
                for ((a, &v), &d) in gx.iter_mut().zip(self.vals(*x)).zip(g) {
                    *a = *a + d * sigmoid(v);
                }
            }),
            Op::Exp(x) => with_grad!(*x, |gx| {
                for ((a, &y), &d) in gx.iter_mut().zip(out).zip(g) {
                    *a = *a + d * y;
                }
            }),
            Op::Ln(x) => with_grad!(*x, |gx| {
                for ((a, &v), &d) in gx.iter_mut().zip(self.vals(*x)).zip(g) {
                    *a = *a + d / v;
                }
            }),
            Op::Softmax(x) => with_grad!(*x, |gx| {
                let l = out_shape[out_shape.len() - 1];
                for r in 0..out.len() / l {
                    let (ys, gs) = (&out[r * l..(r + 1) * l], &g[r * l..(r + 1) * l]);
                    let dot: T = ys.iter().zip(gs).map(|(&y, &d)| y * d).sum();
                    for j in 0..l {
                        gx[r * l + j] = gx[r * l + j] + ys[j] * (gs[j] - dot);
                    }
                }
            }),
            Op::LogSumExp(x) => with_grad!(*x, |gx| {
                let src = self.vals(*x);
                let l = self.shape(*x)[self.shape(*x).len() - 1];
                for r in 0..out.len() {
                    for j in 0..l {
                        let idx = r * l + j;
                        gx[idx] = gx[idx] + g[r] * (src[idx] - out[r]).exp();
                    }
                }
            }),
            Op::Norm(x) => with_grad!(*x, |gx| {
                let src = self.vals(*x);
                let l = self.shape(*x)[self.shape(*x).len() - 1];
                for r in 0..out.len() {
                    if out[r] == T::zero() {
                        continue;
                    }
                    for j in 0..l {
                        let idx = r * l + j;
                        gx[idx] = gx[idx] + g[r] * src[idx] / out[r];
                    }
                }
            }),
            Op::Cosine { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let l = sa[sa.len() - 1];
                let ta = broadcast_strides(&sa[..sa.len() - 1], out_shape);
                let tb = broadcast_strides(&sb[..sb.len() - 1], out_shape);
                let (va, vb) = (self.vals(*a), self.vals(*b));
                let eps = T::of(COSINE_EPS);
                // d/dx = y/den - [den unclamped] * cos * x / |x|^2
                let rule = |x: &[T], y: &[T], o: usize, gx: &mut [T]| {
                    let (_, nx, ny) = dot_norms(x, y);
                    let den = nx * ny;
                    let clamped = den < eps;
                    let den = den.max(eps);
                    for j in 0..l {
                        let mut d = y[j] / den;
                        if !clamped {
                            d = d - out[o] * x[j] / (nx * nx);
                        }
                        gx[j] = gx[j] + g[o] * d;
                    }
                };
                with_grad!(*a, |ga| {
                    for_each_broadcast(out_shape, &ta, &tb, |o, i, j| {
                        rule(
                            &va[i * l..(i + 1) * l],
                            &vb[j * l..(j + 1) * l],
                            o,
                            &mut ga[i * l..(i + 1) * l],
                        )
                    });
                });
                with_grad!(*b, |gb| {
                    for_each_broadcast(out_shape, &ta, &tb, |o, i, j| {
                        rule(
                            &vb[j * l..(j + 1) * l],
                            &va[i * l..(i + 1) * l],
                            o,
                            &mut gb[j * l..(j + 1) * l],
                        )
                    });
                });
            }
            Op::CircConv { w, s } => {
                let p = out_shape[out_shape.len() - 1];
                let k = self.shape(*s)[self.shape(*s).len() - 1];
                let rows = out.len() / p;
                let (vw, vs) = (self.vals(*w), self.vals(*s));
                with_grad!(*w, |gw| {
                    for r in 0..rows {
                        for i in 0..p {
                            for j in 0..k {
                                let idx = r * p + shifted(i, j, k, p);
                                gw[idx] = gw[idx] + g[r * p + i] * vs[r * k + j];
                            }
                        }
                    }
                });
                with_grad!(*s, |gs| {
                    for r in 0..rows {
                        for i in 0..p {
                            for j in 0..k {
                                let idx = r * k + j;
                                gs[idx] = gs[idx] + g[r * p + i] * vw[r * p + shifted(i, j, k, p)];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let b = xhat.len() / d;
                let gamma = self.vals(*scale);
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for r in 0..b {
                    for c in 0..d {
                        sum_g[c] = sum_g[c] + g[r * d + c];
                        sum_gx[c] = sum_gx[c] + g[r * d + c] * xhat[r * d + c];
                    }
                }
                with_grad!(*scale, |gs| {
                    for c in 0..d {
                        gs[c] = gs[c] + sum_gx[c];
                    }
                });
                with_grad!(*shift, |gh| {
                    for c in 0..d {
                        gh[c] = gh[c] + sum_g[c];
                    }
                });
                with_grad!(*x, |gx| {
                    let bt = T::of(b as f64);
                    for r in 0..b {
                        for c in 0..d {
                            let i = r * d + c;
                            let k = gamma[c] * inv_std[c];
                            let dx = if *train {
                                k * (g[i] - sum_g[c] / bt - xhat[i] * sum_gx[c] / bt)
                            } else {
                                k * g[i]
                            };
                            gx[i] = gx[i] + dx;
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let (mut dot, mut nx, mut ny) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        dot = dot + a * b;
        nx = nx + a * a;
        ny = ny + b * b;
    }
    (dot, nx.sqrt(), ny.sqrt())
}

/// Source index of output `i` under shift slot `j` of a width-`k` kernel.
fn shifted(i: usize, j: usize, k: usize, p: usize) -> usize {
    let offset = j as isize - (k / 2) as isize;
    (i as isize - offset).rem_euclid(p as isize) as usize
}
