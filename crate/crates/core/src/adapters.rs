//! Weight generation for adapted LSTM cells.
//!
//! All generated matrices share the packed layout of [`crate::recurrent`]
//! (`N_r = 4·N_h` rows, `N_c = N_h + N_x` columns) and the low-rank form
//! `W = U·diag(s)·Vᵀ` with `U: N_r × r`, `V: N_c × r`:
//!
//! * context-aware: `s = ξ_t`, the output of the adapter LSTM `Φ` stepped on
//!   `[ζ; h_{t-1}]`; regenerated every step;
//! * topic-aware: `s = θ`, the conversation's topic distribution; generated
//!   once per conversation;
//! * gated: `W = Ψ_t·W_c + (1 − Ψ_t)·W_κ`, `Ψ_t = σ(w_g·[ξ_t; θ] + b_g)`.
//!
//! Biases are never generated. [`naive_generate`] is the full-tensor form the
//! factorization replaces and exists as a reference for small sizes.

use crate::error::{Error, Result};
use crate::recurrent::{lstm_step, packed_cols, packed_rows, LstmState, PackedLstmWeights};
use crate::tensor::{Graph, Tensor, Var};

/// Context-aware adapter of one cell, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct ContextAdapter {
    pub u: Var,
    pub v: Var,
    pub phi: PackedLstmWeights,
}

/// Topic-aware adapter of one cell, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct TopicAdapter {
    pub u: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w: Var,
    pub b: Var,
}

/// `Φ`'s recurrent state for one conversation.
///
/// [`context_generate`] refuses to run until [`ContextSession::begin`] has
/// been called, and again after [`ContextSession::end`], so state can never
/// leak from one dialogue into the next.
pub struct ContextSession {
    adapter: ContextAdapter,
    state: Option<LstmState>,
}

impl ContextSession {
    pub fn new(adapter: ContextAdapter) -> Self {
        Self { adapter, state: None }
    }

    pub fn adapter(&self) -> &ContextAdapter {
        &self.adapter
    }

    /// Resets `Φ` to the zero state for a new conversation.
    pub fn begin(&mut self, g: &mut Graph) {
        let size = g.shape(self.adapter.u)[1];
        self.state = Some(LstmState::zeros(g, size));
    }

    pub fn end(&mut self) {
        self.state = None;
    }

    pub fn is_active(&self) -> bool {
        self.state.is_some()
    }
}

/// `U·diag(s)·Vᵀ`.
pub fn factorized_weight(g: &mut Graph, u: Var, s: Var, v: Var) -> Result<Var> {
    let scaled = g.mul_cols(u, s)?;
    g.matmul_nt(scaled, v)
}

/// Steps `Φ` on `[ζ; h_prev]` and returns `(W, ξ_t)` with `W = U·diag(ξ_t)·Vᵀ`.
pub fn context_generate(g: &mut Graph, session: &mut ContextSession, zeta: Var, h_prev: Var) -> Result<(Var, Var)> {
    let Some(state) = session.state else {
        return Err(Error::Contract(
            "context adapter used without beginning a conversation".into(),
        ));
    };
    let input = g.concat(&[zeta, h_prev])?;
    let next = lstm_step(g, session.adapter.phi, input, state)?;
    session.state = Some(next);
    let w = factorized_weight(g, session.adapter.u, next.h, session.adapter.v)?;
    Ok((w, next.h))
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// `W = U·diag(θ)·Vᵀ`; `θ` must lie on the simplex.
pub fn topic_generate(g: &mut Graph, adapter: TopicAdapter, theta: Var) -> Result<Var> {
    let t = g.value(theta);
    let sum: f64 = t.data().iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || t.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Contract(format!(
            "topic distribution is not normalized (sum {sum})"
        )));
    }
    factorized_weight(g, adapter.u, theta, adapter.v)
}

/// `Ψ_t = σ(w_g·[ξ_t; θ] + b_g)`, a scalar in (0, 1).
pub fn gate_value(g: &mut Graph, gate: GateParams, xi: Var, theta: Var) -> Result<Var> {
    let input = g.concat(&[xi, theta])?;
    let z = g.dot(gate.w, input)?;
    let z = g.add(z, gate.b)?;
    g.sigmoid(z)
}

/// `Ψ·W_c + (1 − Ψ)·W_κ`.
pub fn gated_combine(g: &mut Graph, psi: Var, w_context: Var, w_topic: Var) -> Result<Var> {
    let one = g.constant(Tensor::scalar(1.0));
    let rest = g.sub(one, psi)?;
    let a = g.mul(psi, w_context)?;
    let b = g.mul(rest, w_topic)?;
    g.add(a, b)
}

pub struct GatedOutput {
    pub w: Var,
    pub xi: Var,
    pub psi: Var,
}

pub fn gated_generate(
    g: &mut Graph,
    session: &mut ContextSession,
    topic: TopicAdapter,
    gate: GateParams,
    zeta: Var,
    h_prev: Var,
    theta: Var,
) -> Result<GatedOutput> {
    let (w_c, xi) = context_generate(g, session, zeta, h_prev)?;
    let w_k = topic_generate(g, topic, theta)?;
    let psi = gate_value(g, gate, xi, theta)?;
    let w = gated_combine(g, psi, w_c, w_k)?;
    Ok(GatedOutput { w, xi, psi })
}

/// The full-tensor form: `W[r, c] = Σ_z M[r, c, z]·ζ[z]`.
pub fn naive_generate(m: &Tensor, zeta: &Tensor) -> Result<Tensor> {
    let s = m.shape();
    if s.len() != 3 || zeta.shape() != [s[2]] {
        return Err(Error::shape("naive_generate", s, zeta.shape()));
    }
    let (rows, cols, k) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * k;
            out[r * cols + c] = (0..k).map(|z| m.data()[base + z] * zeta.data()[z]).sum();
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Sizes that determine one adapted cell's adapter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterDims {
    pub hidden: usize,
    pub input: usize,
    /// `N_ζ`, size of `ξ_t`.
    pub adapter: usize,
    /// Size of the context summary `ζ` fed to `Φ`.
    pub context: usize,
    pub topics: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterParamCount {
    /// `L = N_r·N_ζ + N_c·N_ζ`.
    pub context_factors: usize,
    /// Packed weights and bias of `Φ`.
    pub phi: usize,
    /// `N_r·K + N_c·K`.
    pub topic_factors: usize,
    /// `w_g` and `b_g`.
    pub gate: usize,
    /// `N_r·N_c·N_ζ`, the full tensor the factorization avoids.
    pub naive: usize,
    /// A static `W` of the same cell, for comparison.
    pub static_weight: usize,
}

pub fn adapter_param_count(d: AdapterDims) -> AdapterParamCount {
    let nr = packed_rows(d.hidden);
    let nc = packed_cols(d.hidden, d.input);
    let phi_rows = packed_rows(d.adapter);
    let phi_cols = packed_cols(d.adapter, d.context + d.hidden);
    AdapterParamCount {
        context_factors: nr * d.adapter + nc * d.adapter,
        phi: phi_rows * phi_cols + phi_rows,
        topic_factors: nr * d.topics + nc * d.topics,
        gate: d.adapter + d.topics + 1,
        naive: nr * nc * d.adapter,
        static_weight: nr * nc,
    }
}
