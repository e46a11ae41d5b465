//! Dense and recurrent building blocks.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, ParamId, ParamStore};

/// Affine map `x W + b` over row batches.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, inputs, vec![inputs, outputs]),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]), true));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight.0])?;
        match self.bias {
            Some(b) => g.add(y, p[b.0]),
            None => Ok(y),
        }
    }
}

/// Recurrent state of an LSTM over a batch: `hidden` and `cell`, both `[B, H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros<T: Real>(g: &mut Graph<T>, batch: usize, hidden: usize) -> Self {
        Self {
            hidden: g.constant(Tensor::zeros(vec![batch, hidden])),
            cell: g.constant(Tensor::zeros(vec![batch, hidden])),
        }
    }
}

/// Single-layer LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: Linear,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        hidden: usize,
    ) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.input"), inputs, 4 * hidden, true);
        let recurrent = Linear::new(store, rng, &format!("{name}.recurrent"), hidden, 4 * hidden, false);
        // forget-gate bias starts at +1
        if let Some(b) = input.bias {
            let data = store.get_mut(b).data_mut();
            for x in &mut data[hidden..2 * hidden] {
                *x = T::one();
            }
        }
        Self {
            input,
            recurrent,
            inputs,
            hidden,
        }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, state: LstmState) -> Result<(Var, LstmState)> {
        let sx = g.shape(x);
        if sx.len() != 2 || sx[1] != self.inputs {
            return Err(Error::shape("lstm", &[sx, &[self.inputs]]));
        }
        let h = self.hidden;
        let zx = self.input.forward(g, p, x)?;
        let zh = self.recurrent.forward(g, p, state.hidden)?;
        let z = g.add(zx, zh)?;
        let i = g.slice(z, 1, 0, h)?;
        let f = g.slice(z, 1, h, h)?;
        let c = g.slice(z, 1, 2 * h, h)?;
        let o = g.slice(z, 1, 3 * h, h)?;
        let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
        let c = g.tanh(c);
        let keep = g.mul(f, state.cell)?;
        let write = g.mul(i, c)?;
        let cell = g.add(keep, write)?;
        let tc = g.tanh(cell);
        let hidden = g.mul(o, tc)?;
        Ok((hidden, LstmState { hidden, cell }))
    }
}
