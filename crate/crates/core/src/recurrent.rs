//! LSTM cells with packed weights and sequence runners.
//!
//! A cell's recurrent weights are packed as one `4·N_h × (N_h + N_x)` matrix
//! whose row blocks are the gates in the order input (`i`), candidate (`g`),
//! forget (`f`), output (`o`), and whose columns are `[h-block | x-block]`.
//! Every adapter and the checkpoint format use this layout.
//!
//! Weights for each step come from a [`WeightProvider`], so the same runner
//! drives static cells and cells whose weights are regenerated every step.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Packed weight matrix and bias of one LSTM cell, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PackedLstmWeights {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[hidden])),
            c: g.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// Rows of the packed matrix for a hidden size.
pub fn packed_rows(hidden: usize) -> usize {
    4 * hidden
}

/// Columns of the packed matrix for hidden and input sizes.
pub fn packed_cols(hidden: usize, input: usize) -> usize {
    hidden + input
}

/// One LSTM step:
/// `i,g,f,o = split(W·[h; x] + b)`, `c' = σ(f)⊙c + σ(i)⊙tanh(g)`,
/// `h' = σ(o)⊙tanh(c')`.
pub fn lstm_step(g: &mut Graph, weights: PackedLstmWeights, x: Var, state: LstmState) -> Result<LstmState> {
    let nh = g.shape(state.h)[0];
    if g.shape(state.c) != [nh] {
        return Err(Error::shape("lstm_step", g.shape(state.h), g.shape(state.c)));
    }
    let nx = g.value(x).len();
    let ws = g.shape(weights.w);
    if ws != [packed_rows(nh), packed_cols(nh, nx)] {
        return Err(Error::shape("lstm_step", ws, &[packed_rows(nh), packed_cols(nh, nx)]));
    }
    if g.shape(weights.b) != [packed_rows(nh)] {
        return Err(Error::shape("lstm_step", g.shape(weights.b), &[packed_rows(nh)]));
    }

    let hx = g.concat(&[state.h, x])?;
    let z = g.matvec(weights.w, hx)?;
    let z = g.add(z, weights.b)?;
    let i = g.slice(z, 0, nh)?;
    let cand = g.slice(z, nh, nh)?;
    let f = g.slice(z, 2 * nh, nh)?;
    let o = g.slice(z, 3 * nh, nh)?;

    let si = g.sigmoid(i)?;
    let tg = g.tanh(cand)?;
    let sf = g.sigmoid(f)?;
    let so = g.sigmoid(o)?;
    let keep = g.mul(sf, state.c)?;
    let write = g.mul(si, tg)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(so, tc)?;
    Ok(LstmState { h, c })
}

/// Supplies the packed `W` for each step of a sequence.
pub trait WeightProvider {
    /// `h_prev` is the host cell's hidden state before step `step`.
    fn weights(&mut self, g: &mut Graph, step: usize, h_prev: Var) -> Result<Var>;
}

/// A provider that returns the same matrix every step.
pub struct StaticWeights(pub Var);

impl WeightProvider for StaticWeights {
    fn weights(&mut self, _g: &mut Graph, _step: usize, _h_prev: Var) -> Result<Var> {
        Ok(self.0)
    }
}

/// A provider backed by a closure; handy for tests and one-off wiring.
pub struct FnWeights<F>(pub F);

impl<F> WeightProvider for FnWeights<F>
where
    F: FnMut(&mut Graph, usize, Var) -> Result<Var>,
{
    fn weights(&mut self, g: &mut Graph, step: usize, h_prev: Var) -> Result<Var> {
        (self.0)(g, step, h_prev)
    }
}

/// Runs a cell over `inputs`, asking `provider` for weights at every step.
/// Returns one state per input.
pub fn run_sequence(
    g: &mut Graph,
    provider: &mut dyn WeightProvider,
    bias: Var,
    inputs: &[Var],
    init: LstmState,
) -> Result<Vec<LstmState>> {
    let mut state = init;
    let mut out = Vec::with_capacity(inputs.len());
    for (t, &x) in inputs.iter().enumerate() {
        let w = provider.weights(g, t, state.h)?;
        state = lstm_step(g, PackedLstmWeights { w, b: bias }, x, state).map_err(|e| match e {
            Error::Shape { lhs, rhs, .. } => Error::Contract(format!(
                "step {t}: weight provider returned shape {lhs:?}, expected {rhs:?}"
            )),
            other => other,
        })?;
        out.push(state);
    }
    Ok(out)
}

/// One bidirectional layer: a forward and a backward cell.
pub struct BiLayer<'a> {
    pub fwd: &'a mut dyn WeightProvider,
    pub fwd_bias: Var,
    pub bwd: &'a mut dyn WeightProvider,
    pub bwd_bias: Var,
    pub hidden: usize,
}

pub struct BiOutput {
    /// `[h_fwd(t); h_bwd(t)]` of the top layer for every step.
    pub states: Vec<Var>,
    /// `[h_fwd(T); h_bwd(1)]` of the top layer.
    pub summary: Var,
}

/// Stacked bidirectional runner. Layer `l+1` consumes the per-step
/// concatenated outputs of layer `l`, passed through `between` (dropout).
pub fn run_bidirectional(
    g: &mut Graph,
    layers: &mut [BiLayer<'_>],
    inputs: &[Var],
    between: &mut dyn FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<BiOutput> {
    if inputs.is_empty() {
        return Err(Error::Contract("bidirectional LSTM over an empty sequence".into()));
    }
    if layers.is_empty() {
        return Err(Error::Contract("bidirectional LSTM with zero layers".into()));
    }
    let mut current = inputs.to_vec();
    let mut summary = None;
    let n_layers = layers.len();
    for (l, layer) in layers.iter_mut().enumerate() {
        if l > 0 {
            current = current
                .into_iter()
                .map(|v| between(g, v))
                .collect::<Result<Vec<_>>>()?;
        }
        let init = LstmState::zeros(g, layer.hidden);
        let fwd = run_sequence(g, layer.fwd, layer.fwd_bias, &current, init)?;
        let reversed: Vec<Var> = current.iter().rev().copied().collect();
        let init = LstmState::zeros(g, layer.hidden);
        let mut bwd = run_sequence(g, layer.bwd, layer.bwd_bias, &reversed, init)?;
        bwd.reverse();
        current = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| g.concat(&[f.h, b.h]))
            .collect::<Result<Vec<_>>>()?;
        if l + 1 == n_layers {
            let last = fwd.last().expect("non-empty").h;
            let first = bwd[0].h;
            summary = Some(g.concat(&[last, first])?);
        }
    }
    Ok(BiOutput {
        states: current,
        summary: summary.expect("at least one layer"),
    })
}
