//! One memory stage: external memory, LSTM controller, and a read and a
//! write head driving content plus location addressing.
//!
//! All quantities are batched along the leading axis: memory is `[B, P, M]`,
//! weightings `[B, P]`, head vectors `[B, M]` and scalars `[B, 1]`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Lstm, LstmState};
use crate::params::ParamStore;

/// Number of location-shift offsets, covering `{-1, 0, +1}`.
pub const SHIFTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Read,
    Write,
}

/// Addressing parameters emitted by a head for one step.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub key: Var,
    pub strength: Var,
    pub gate: Var,
    pub shift: Var,
    pub sharpen: Var,
    pub erase: Option<Var>,
    pub add: Option<Var>,
}

/// Head MLP: one tanh hidden layer of the controller width, then a linear
/// layer whose output is split into the individual parameters.
#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub hidden: Linear,
    pub out: Linear,
    pub width: usize,
}

impl Head {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: HeadKind,
        controller: usize,
        width: usize,
    ) -> Self {
        let n_out = match kind {
            HeadKind::Read => width + 3 + SHIFTS,
            HeadKind::Write => 3 * width + 3 + SHIFTS,
        };
        Self {
            kind,
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), controller, controller, true),
            out: Linear::new(store, rng, &format!("{name}.out"), controller, n_out, true),
            width,
        }
    }

    /// key linear, strength softplus, gate sigmoid, shift softmax,
    /// sharpen `1 + softplus`, erase sigmoid, add linear.
    pub fn emit<T: Real>(&self, g: &mut Graph<T>, p: &[Var], ctrl_out: Var) -> Result<HeadParams> {
        let m = self.width;
        let z = self.hidden.forward(g, p, ctrl_out)?;
        let z = g.tanh(z);
        let o = self.out.forward(g, p, z)?;
        let key = g.slice(o, 1, 0, m)?;
        let strength = g.slice(o, 1, m, 1)?;
        let strength = g.softplus(strength);
        let gate = g.slice(o, 1, m + 1, 1)?;
        let gate = g.sigmoid(gate);
        let shift = g.slice(o, 1, m + 2, SHIFTS)?;
        let shift = g.softmax(shift)?;
        let sharpen = g.slice(o, 1, m + 2 + SHIFTS, 1)?;
        let sharpen = g.softplus(sharpen);
        let one = g.constant(Tensor::scalar(T::one()));
        let sharpen = g.add(sharpen, one)?;
        let (erase, add) = match self.kind {
            HeadKind::Read => (None, None),
            HeadKind::Write => {
                let base = m + 3 + SHIFTS;
                let e = g.slice(o, 1, base, m)?;
                let e = g.sigmoid(e);
                let a = g.slice(o, 1, base + m, m)?;
                (Some(e), Some(a))
            }
        };
        Ok(HeadParams {
            key,
            strength,
            gate,
            shift,
            sharpen,
            erase,
            add,
        })
    }
}

/// Content then location addressing over `memory[B, P, M]`:
/// softmax of strength-scaled cosine similarity, interpolation with the
/// previous weighting, circular shift, and sharpening.
pub fn address<T: Real>(g: &mut Graph<T>, memory: Var, params: &HeadParams, w_prev: Var) -> Result<Var> {
    let sm = g.shape(memory).to_vec();
    let &[b, p, m] = &sm[..] else {
        return Err(Error::shape("address", &[&sm]));
    };
    if g.shape(params.key) != [b, m] || g.shape(w_prev) != [b, p] {
        return Err(Error::shape("address", &[&sm, g.shape(params.key), g.shape(w_prev)]));
    }
    let key = g.reshape(params.key, &[b, 1, m])?;
    let sim = g.cosine(key, memory)?;
    let logits = g.mul(sim, params.strength)?;
    let content = g.softmax(logits)?;
    let gated = g.mul(content, params.gate)?;
    let keep = g.one_minus(params.gate)?;
    let prev = g.mul(w_prev, keep)?;
    let interp = g.add(gated, prev)?;
    let shifted = g.circular_conv(interp, params.shift)?;
    let sharp = g.pow(shifted, params.sharpen)?;
    let total = g.sum_axis(sharp, 1)?;
    g.div(sharp, total)
}

/// Erase then add: `row_i <- row_i * (1 - w_i e) + w_i a`.
pub fn memory_write<T: Real>(g: &mut Graph<T>, memory: Var, w: Var, erase: Var, add: Var) -> Result<Var> {
    let sm = g.shape(memory).to_vec();
    let &[b, p, m] = &sm[..] else {
        return Err(Error::shape("memory_write", &[&sm]));
    };
    if g.shape(w) != [b, p] || g.shape(erase) != [b, m] || g.shape(add) != [b, m] {
        return Err(Error::shape(
            "memory_write",
            &[&sm, g.shape(w), g.shape(erase), g.shape(add)],
        ));
    }
    let w3 = g.reshape(w, &[b, p, 1])?;
    let e3 = g.reshape(erase, &[b, 1, m])?;
    let a3 = g.reshape(add, &[b, 1, m])?;
    let we = g.mul(w3, e3)?;
    let keep = g.one_minus(we)?;
    let kept = g.mul(memory, keep)?;
    let wa = g.mul(w3, a3)?;
    g.add(kept, wa)
}

/// Weighted sum of memory rows, `[B, M]`.
pub fn memory_read<T: Real>(g: &mut Graph<T>, memory: Var, w: Var) -> Result<Var> {
    let sm = g.shape(memory).to_vec();
    let &[b, p, m] = &sm[..] else {
        return Err(Error::shape("memory_read", &[&sm]));
    };
    if g.shape(w) != [b, p] {
        return Err(Error::shape("memory_read", &[&sm, g.shape(w)]));
    }
    let w3 = g.reshape(w, &[b, 1, p])?;
    let r = g.matmul(w3, memory)?;
    g.reshape(r, &[b, m])
}

/// Per-stage recurrent state carried between turns.
#[derive(Clone, Copy, Debug)]
pub struct StageState {
    pub memory: Var,
    pub controller: LstmState,
    pub prev_read: Var,
    pub prev_read_weights: Var,
    pub prev_write_weights: Var,
}

/// Output of one [`NtmStage::step`].
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub read: Var,
    pub controller: Var,
    pub state: StageState,
}

#[derive(Clone, Debug)]
pub struct NtmStage {
    pub controller: Lstm,
    pub write_head: Head,
    pub read_head: Head,
    pub locations: usize,
    pub width: usize,
}

impl NtmStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        locations: usize,
        width: usize,
    ) -> Self {
        Self {
            controller: Lstm::new(store, rng, &format!("{name}.controller"), input, hidden),
            write_head: Head::new(store, rng, &format!("{name}.write"), HeadKind::Write, hidden, width),
            read_head: Head::new(store, rng, &format!("{name}.read"), HeadKind::Read, hidden, width),
            locations,
            width,
        }
    }

    pub fn input_size(&self) -> usize {
        self.controller.inputs
    }

    /// controller, write addressing, memory write, read addressing on the
    /// updated memory, memory read.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &[Var], state: &StageState, input: Var) -> Result<StageOutput> {
        let (ctrl, controller) = self.controller.step(g, p, input, state.controller)?;
        let wp = self.write_head.emit(g, p, ctrl)?;
        let ww = address(g, state.memory, &wp, state.prev_write_weights)?;
        let (erase, add) = (wp.erase.expect("write head"), wp.add.expect("write head"));
        let memory = memory_write(g, state.memory, ww, erase, add)?;
        let rp = self.read_head.emit(g, p, ctrl)?;
        let rw = address(g, memory, &rp, state.prev_read_weights)?;
        let read = memory_read(g, memory, rw)?;
        Ok(StageOutput {
            read,
            controller: ctrl,
            state: StageState {
                memory,
                controller,
                prev_read: read,
                prev_read_weights: rw,
                prev_write_weights: ww,
            },
        })
    }
}
