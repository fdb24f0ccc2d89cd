//! The full adaptive encoder-decoder.
//!
//! Layout of one pass:
//!
//! 1. a static single-layer bidirectional LSTM over the context embeddings
//!    gives the summary `ζ` (context and both modes);
//! 2. the topic inferrer gives `ν` and `θ` (topic and both modes);
//! 3. a stacked bidirectional encoder and a unidirectional decoder run with
//!    recurrent matrices supplied per step by [`CellProvider`];
//! 4. the decoder state, optionally joined with dot-product attention over
//!    the encoder states, is projected onto the vocabulary.
//!
//! Embeddings, the output projection, the decoder initializer and all biases
//! are ordinary static parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{context_generate, gate_value, gated_combine, topic_generate, ContextAdapter, ContextSession, GateParams, TopicAdapter};
use crate::config::{Mode, ModelConfig};
use crate::corpus::{EncodedPair, EOS, SOS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::recurrent::{lstm_step, packed_cols, packed_rows, run_bidirectional, BiLayer, LstmState, PackedLstmWeights, StaticWeights, WeightProvider};
use crate::tensor::{Graph, Tensor, Var};
use crate::topic::{gaussian_kl, topic_word_nll, BowVector, GaussianNet, TopicInferrer, TopicPosterior};

pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
struct ContextIds {
    u: ParamId,
    v: ParamId,
    phi_w: ParamId,
    phi_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FactorIds {
    u: ParamId,
    v: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct GateIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct CellIds {
    name: String,
    bias: ParamId,
    static_w: Option<ParamId>,
    context: Option<ContextIds>,
    topic: Option<FactorIds>,
    gate: Option<GateIds>,
}

#[derive(Clone, Copy, Debug)]
struct StaticLstmIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NetIds {
    hidden_w: ParamId,
    hidden_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    lv_w: ParamId,
    lv_b: ParamId,
}

impl NetIds {
    fn bind(&self, b: &Bound) -> GaussianNet {
        GaussianNet {
            hidden_w: b[self.hidden_w],
            hidden_b: b[self.hidden_b],
            mu_w: b[self.mu_w],
            mu_b: b[self.mu_b],
            lv_w: b[self.lv_w],
            lv_b: b[self.lv_b],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct InferrerIds {
    prior: NetIds,
    posterior: NetIds,
    w_nu: ParamId,
    word_emb: ParamId,
    topic_emb: ParamId,
}

impl InferrerIds {
    fn bind(&self, b: &Bound) -> TopicInferrer {
        TopicInferrer {
            prior: self.prior.bind(b),
            posterior: self.posterior.bind(b),
            w_nu: b[self.w_nu],
            word_emb: b[self.word_emb],
            topic_emb: b[self.topic_emb],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BowIds {
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    context_encoder: Option<[StaticLstmIds; 2]>,
    encoder: Vec<[CellIds; 2]>,
    decoder: CellIds,
    init_w: ParamId,
    init_b: ParamId,
    attention: Option<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
    inferrer: Option<InferrerIds>,
    bow: Option<BowIds>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, group: &'static str, shape: &[usize], scale: f64) -> ParamId {
        self.store.add_uniform(name, group, shape, scale, &mut self.rng)
    }

    fn zeros(&mut self, name: &str, group: &'static str, shape: &[usize]) -> ParamId {
        self.store.add(name, group, Tensor::zeros(shape))
    }

    fn lstm_bias(&mut self, name: &str, group: &'static str, hidden: usize) -> ParamId {
        let mut t = Tensor::zeros(&[packed_rows(hidden)]);
        t.data_mut()[2 * hidden..3 * hidden].fill(FORGET_BIAS);
        self.store.add(name, group, t)
    }

    fn linear(&mut self, name: &str, group: &'static str, out: usize, inp: usize) -> (ParamId, ParamId) {
        let w = self.uniform(&format!("{name}.w"), group, &[out, inp], 1.0 / (inp as f64).sqrt());
        let b = self.zeros(&format!("{name}.b"), group, &[out]);
        (w, b)
    }

    fn net(&mut self, name: &str, c: usize, hidden: usize, latent: usize) -> NetIds {
        let (hidden_w, hidden_b) = self.linear(&format!("{name}.hidden"), "topic_inferrer", hidden, c);
        let (mu_w, mu_b) = self.linear(&format!("{name}.mu"), "topic_inferrer", latent, hidden);
        let (lv_w, lv_b) = self.linear(&format!("{name}.log_var"), "topic_inferrer", latent, hidden);
        NetIds { hidden_w, hidden_b, mu_w, mu_b, lv_w, lv_b }
    }

    /// Uniform half-width giving `U·diag(s)·Vᵀ` entries of scale `1/sqrt(cols)`
    /// when `s` is a uniform simplex point of the given rank.
    fn factor_scale(rank: usize, cols: usize) -> f64 {
        3f64.sqrt() * (rank as f64 / cols as f64).powf(0.25)
    }

    fn cell(&mut self, cfg: &ModelConfig, name: &str, input: usize, adapted: bool) -> CellIds {
        let h = cfg.hidden_size;
        let (rows, cols) = (packed_rows(h), packed_cols(h, input));
        let bias = self.lstm_bias(&format!("{name}.b"), "recurrent", h);
        let mut cell = CellIds { name: name.to_string(), bias, static_w: None, context: None, topic: None, gate: None };
        if !adapted || cfg.mode == Mode::Vanilla {
            cell.static_w = Some(self.uniform(&format!("{name}.w"), "recurrent", &[rows, cols], 1.0 / (cols as f64).sqrt()));
            return cell;
        }
        let r = cfg.adapter_size;
        let k = cfg.num_topics;
        if cfg.mode.uses_context() {
            let s = Self::factor_scale(r, cols);
            let u = self.uniform(&format!("{name}.ctx.u"), "context_adapter", &[rows, r], s);
            let v = self.uniform(&format!("{name}.ctx.v"), "context_adapter", &[cols, r], s);
            let phi_cols = packed_cols(r, cfg.context_size + h);
            let phi_w = self.uniform(&format!("{name}.ctx.phi.w"), "phi", &[packed_rows(r), phi_cols], 1.0 / (phi_cols as f64).sqrt());
            let phi_b = self.lstm_bias(&format!("{name}.ctx.phi.b"), "phi", r);
            cell.context = Some(ContextIds { u, v, phi_w, phi_b });
        }
        if cfg.mode.uses_topics() {
            let s = Self::factor_scale(k, cols);
            let u = self.uniform(&format!("{name}.topic.u"), "topic_adapter", &[rows, k], s);
            let v = self.uniform(&format!("{name}.topic.v"), "topic_adapter", &[cols, k], s);
            cell.topic = Some(FactorIds { u, v });
        }
        if cfg.mode == Mode::Both {
            let w = self.uniform(&format!("{name}.gate.w"), "gate", &[r + k], 0.1);
            let b = self.store.add(format!("{name}.gate.b"), "gate", Tensor::scalar(0.0));
            cell.gate = Some(GateIds { w, b });
        }
        cell
    }
}

/// Supplies one cell's recurrent matrix step by step according to the mode,
/// and records every matrix it hands out.
pub struct CellProvider {
    kind: ProviderKind,
    /// The matrix used at each step, in order.
    pub generated: Vec<Var>,
    /// `Ψ_t` per step (gated cells only).
    pub gates: Vec<Var>,
}

enum ProviderKind {
    Fixed(Var),
    Context { session: ContextSession, zeta: Var },
    Gated { session: ContextSession, zeta: Var, w_topic: Var, gate: GateParams, theta: Var },
}

impl WeightProvider for CellProvider {
    fn weights(&mut self, g: &mut Graph, _step: usize, h_prev: Var) -> Result<Var> {
        let w = match &mut self.kind {
            ProviderKind::Fixed(w) => *w,
            ProviderKind::Context { session, zeta } => context_generate(g, session, *zeta, h_prev)?.0,
            ProviderKind::Gated { session, zeta, w_topic, gate, theta } => {
                let (w_c, xi) = context_generate(g, session, *zeta, h_prev)?;
                let psi = gate_value(g, *gate, xi, *theta)?;
                self.gates.push(psi);
                gated_combine(g, psi, w_c, *w_topic)?
            }
        };
        self.generated.push(w);
        Ok(w)
    }
}

/// Graph handles of one forward pass.
pub struct ForwardOutput {
    pub total: Var,
    pub gen_nll: Var,
    pub topic_nll: Option<Var>,
    pub kl: Option<Var>,
    pub bow_nll: Option<Var>,
    /// `T_y × vocab`.
    pub token_logits: Var,
    pub topic: Option<TopicPosterior>,
    pub zeta: Option<Var>,
    /// Decoder recurrent matrix at each step.
    pub decoder_weights: Vec<Var>,
    /// Decoder gate value at each step (both mode).
    pub decoder_gates: Vec<Var>,
    /// Number of predicted tokens, end-of-sequence included.
    pub target_tokens: usize,
}

/// Scalar loss components of one pass; absent components are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub gen_nll: f64,
    pub topic_nll: f64,
    pub kl: f64,
    pub bow_nll: f64,
    pub total: f64,
    pub tokens: usize,
}

impl ForwardOutput {
    pub fn values(&self, g: &Graph) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        LossValues {
            gen_nll: g.scalar(self.gen_nll),
            topic_nll: get(self.topic_nll),
            kl: get(self.kl),
            bow_nll: get(self.bow_nll),
            total: g.scalar(self.total),
            tokens: self.target_tokens,
        }
    }
}

/// Prefixes numeric errors with the loss component they arose in.
fn tag(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{component}: {msg}")),
        other => other,
    }
}

/// Inverted dropout with a fresh mask; identity without an rng.
fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    g.mul(x, m)
}

/// Orthogonality of one adapter's factors.
#[derive(Clone, Debug, Serialize)]
pub struct OrthogonalityEntry {
    pub adapter: String,
    /// Mean `|(UᵀU)_{ij}|` over `i ≠ j`.
    pub u_offdiag: f64,
    pub v_offdiag: f64,
    /// Mean `|(UᵀU)_{ii} − 1|`.
    pub u_diag_dev: f64,
    pub v_diag_dev: f64,
}

fn gram_stats(m: &Tensor) -> (f64, f64) {
    let (rows, r) = (m.rows(), m.cols());
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..rows).map(|k| m.at(k, i) * m.at(k, j)).sum();
            if i == j {
                diag += (dot - 1.0).abs();
            } else {
                off += dot.abs();
            }
        }
    }
    let pairs = (r * r - r).max(1) as f64;
    (off / pairs, diag / r as f64)
}

#[derive(Clone, Debug)]
pub struct Adand {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Adand {
    /// Builds a freshly initialized model (seeded by `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut params = ParamStore::new();
        let mut bld = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(cfg.init_seed) };
        let (h, x) = (cfg.hidden_size, cfg.embed_size);

        let embedding = bld.uniform("emb", "embedding", &[cfg.vocab_size, x], 0.1);
        let context_encoder = cfg.mode.uses_context().then(|| {
            let half = cfg.context_size / 2;
            let cols = packed_cols(half, x);
            let mut dir = |d: &str| StaticLstmIds {
                w: bld.uniform(&format!("ctxenc.{d}.w"), "context_encoder", &[packed_rows(half), cols], 1.0 / (cols as f64).sqrt()),
                b: bld.lstm_bias(&format!("ctxenc.{d}.b"), "context_encoder", half),
            };
            [dir("fwd"), dir("bwd")]
        });
        let mut encoder = Vec::new();
        for l in 0..cfg.encoder_layers {
            let input = if l == 0 { x } else { 2 * h };
            let fwd = bld.cell(cfg, &format!("enc.l{l}.fwd"), input, cfg.adapt_encoder);
            let bwd = bld.cell(cfg, &format!("enc.l{l}.bwd"), input, cfg.adapt_encoder);
            encoder.push([fwd, bwd]);
        }
        let decoder = bld.cell(cfg, "dec", x, cfg.adapt_decoder);
        let (init_w, init_b) = bld.linear("dec.init", "decoder_init", h, 2 * h);
        let attention = cfg
            .attention
            .then(|| bld.uniform("attn.w", "attention", &[2 * h, h], 1.0 / (h as f64).sqrt()));
        let out_in = if cfg.attention { 3 * h } else { h };
        let (out_w, out_b) = bld.linear("out", "output", cfg.vocab_size, out_in);

        let (inferrer, bow) = if cfg.mode.uses_topics() {
            let c = cfg.topical_vocab_size;
            let prior = bld.net("topic.prior", c, cfg.mlp_hidden, cfg.latent_size);
            let posterior = bld.net("topic.posterior", c, cfg.mlp_hidden, cfg.latent_size);
            let w_nu = bld.uniform("topic.w_nu", "topic_inferrer", &[cfg.latent_size, cfg.num_topics], 1.0 / (cfg.latent_size as f64).sqrt());
            let word_emb = bld.uniform("topic.word_emb", "topic_inferrer", &[c, cfg.topic_embed_size], 0.5);
            let topic_emb = bld.uniform("topic.topic_emb", "topic_inferrer", &[cfg.num_topics, cfg.topic_embed_size], 0.5);
            let bow_in = cfg.latent_size + if cfg.mode.uses_context() { cfg.context_size } else { 0 };
            let (hidden_w, hidden_b) = bld.linear("bow.hidden", "bow", cfg.mlp_hidden, bow_in);
            let (out_w, out_b) = bld.linear("bow.out", "bow", cfg.vocab_size, cfg.mlp_hidden);
            (
                Some(InferrerIds { prior, posterior, w_nu, word_emb, topic_emb }),
                Some(BowIds { hidden_w, hidden_b, out_w, out_b }),
            )
        } else {
            (None, None)
        };

        let layout = Layout {
            embedding,
            context_encoder,
            encoder,
            decoder,
            init_w,
            init_b,
            attention,
            out_w,
            out_b,
            inferrer,
            bow,
        };
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Element counts per component plus `"total"`.
    pub fn count_parameters(&self) -> BTreeMap<String, usize> {
        let mut m = self.params.count_by_group();
        m.insert("total".into(), self.params.total());
        m
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!("{what} token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, b: &Bound, tokens: &[usize], rng: &mut Option<&mut ChaCha8Rng>) -> Result<Vec<Var>> {
        let emb = b[self.layout.embedding];
        tokens
            .iter()
            .map(|&t| {
                let e = g.row(emb, t)?;
                dropout(g, e, self.config.dropout, rng)
            })
            .collect()
    }

    /// `ζ = [h_fwd(T); h_bwd(1)]` of the context encoder.
    fn context_summary(&self, g: &mut Graph, b: &Bound, embedded: &[Var]) -> Result<Option<Var>> {
        let Some([fwd, bwd]) = self.layout.context_encoder else { return Ok(None) };
        if embedded.is_empty() {
            return Err(Error::Contract("context summary of an empty context".into()));
        }
        let mut f = StaticWeights(b[fwd.w]);
        let mut r = StaticWeights(b[bwd.w]);
        let mut layers = [BiLayer { fwd: &mut f, fwd_bias: b[fwd.b], bwd: &mut r, bwd_bias: b[bwd.b], hidden: self.config.context_size / 2 }];
        let out = run_bidirectional(g, &mut layers, embedded, &mut |_, v| Ok(v))?;
        Ok(Some(out.summary))
    }

    /// Context summary of a token sequence, outside of any training pass.
    pub fn encode_context_summary(&self, context: &[usize]) -> Result<Option<Tensor>> {
        self.check_tokens(context, "context")?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let embedded = self.embed(&mut g, &b, context, &mut None)?;
        Ok(self.context_summary(&mut g, &b, &embedded)?.map(|z| g.value(z).clone()))
    }

    fn provider(&self, g: &mut Graph, b: &Bound, cell: &CellIds, zeta: Option<Var>, theta: Option<Var>) -> Result<CellProvider> {
        let kind = if let Some(w) = cell.static_w {
            ProviderKind::Fixed(b[w])
        } else {
            let context = cell.context.map(|c| {
                let mut s = ContextSession::new(ContextAdapter {
                    u: b[c.u],
                    v: b[c.v],
                    phi: PackedLstmWeights { w: b[c.phi_w], b: b[c.phi_b] },
                });
                s.begin(g);
                s
            });
            let w_topic = match cell.topic {
                Some(t) => {
                    let theta = theta.ok_or_else(|| Error::Contract(format!("{}: topic adapter without θ", cell.name)))?;
                    Some(topic_generate(g, TopicAdapter { u: b[t.u], v: b[t.v] }, theta)?)
                }
                None => None,
            };
            let need_zeta = || zeta.ok_or_else(|| Error::Contract(format!("{}: context adapter without ζ", cell.name)));
            match (context, w_topic, cell.gate) {
                (Some(session), Some(w_topic), Some(gate)) => ProviderKind::Gated {
                    session,
                    zeta: need_zeta()?,
                    w_topic,
                    gate: GateParams { w: b[gate.w], b: b[gate.b] },
                    theta: theta.expect("checked with the topic adapter"),
                },
                (Some(session), None, None) => ProviderKind::Context { session, zeta: need_zeta()? },
                (None, Some(w), None) => ProviderKind::Fixed(w),
                _ => return Err(Error::Contract(format!("{}: inconsistent adapter layout", cell.name))),
            }
        };
        Ok(CellProvider { kind, generated: Vec::new(), gates: Vec::new() })
    }

    /// Runs the main encoder; returns the per-step top-layer states and the summary.
    fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        embedded: &[Var],
        zeta: Option<Var>,
        theta: Option<Var>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Var)> {
        let mut providers = Vec::with_capacity(self.layout.encoder.len());
        for [f, r] in &self.layout.encoder {
            providers.push((self.provider(g, b, f, zeta, theta)?, self.provider(g, b, r, zeta, theta)?));
        }
        let mut layers: Vec<BiLayer<'_>> = providers
            .iter_mut()
            .zip(&self.layout.encoder)
            .map(|((pf, pr), [f, r])| BiLayer {
                fwd: pf,
                fwd_bias: b[f.bias],
                bwd: pr,
                bwd_bias: b[r.bias],
                hidden: self.config.hidden_size,
            })
            .collect();
        let p = self.config.dropout;
        let out = run_bidirectional(g, &mut layers, embedded, &mut |g, v| dropout(g, v, p, rng))?;
        Ok((out.states, out.summary))
    }

    fn decoder_init(&self, g: &mut Graph, b: &Bound, summary: Var) -> Result<LstmState> {
        let z = g.matvec(b[self.layout.init_w], summary)?;
        let z = g.add(z, b[self.layout.init_b])?;
        let h = g.tanh(z)?;
        let c = g.constant(Tensor::zeros(&[self.config.hidden_size]));
        Ok(LstmState { h, c })
    }

    /// One decoder step: weights for this step, the LSTM update, and the
    /// vocabulary logits from `[h_t; attention context]`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        provider: &mut CellProvider,
        input: Var,
        state: LstmState,
        memory: Var,
    ) -> Result<(Var, LstmState)> {
        let step = provider.generated.len();
        let w = provider.weights(g, step, state.h)?;
        let next = lstm_step(g, PackedLstmWeights { w, b: b[self.layout.decoder.bias] }, input, state)?;
        let features = match self.layout.attention {
            Some(wa) => {
                let q = g.matvec(b[wa], next.h)?;
                let scores = g.matvec(memory, q)?;
                let alpha = g.softmax(scores)?;
                let ctx = g.vecmat(alpha, memory)?;
                g.concat(&[next.h, ctx])?
            }
            None => next.h,
        };
        let logits = g.matvec(b[self.layout.out_w], features)?;
        let logits = g.add(logits, b[self.layout.out_b])?;
        Ok((logits, next))
    }

    /// `−Σ_{t∈y} log softmax(MLP([ν; ζ]))[t]`.
    pub fn bow_aux_loss(&self, g: &mut Graph, b: &Bound, nu: Var, zeta: Option<Var>, response: &[usize]) -> Result<Var> {
        let ids = self.layout.bow.ok_or_else(|| Error::Contract("bag-of-words head requires a topic mode".into()))?;
        let input = match zeta {
            Some(z) => g.concat(&[nu, z])?,
            None => nu,
        };
        let hid = g.matvec(b[ids.hidden_w], input)?;
        let hid = g.add(hid, b[ids.hidden_b])?;
        let hid = g.tanh(hid)?;
        let z = g.matvec(b[ids.out_w], hid)?;
        let z = g.add(z, b[ids.out_b])?;
        let lp = g.log_softmax(z)?;
        let picked = g.gather(lp, response)?;
        let s = g.sum(picked)?;
        g.neg(s)
    }

    /// The training objective on one pair under teacher forcing.
    ///
    /// `eps` is the reparameterization noise (length `latent_size`, ignored
    /// without topics); `dropout` enables dropout when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        pair: &EncodedPair,
        eps: &[f64],
        kl_weight: f64,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if pair.context.is_empty() {
            return Err(Error::Contract("empty context".into()));
        }
        self.check_tokens(&pair.context, "context")?;
        self.check_tokens(&pair.response, "response")?;
        let mut rng = dropout_rng;

        let ctx_emb = self.embed(g, b, &pair.context, &mut rng)?;
        let zeta = self.context_summary(g, b, &ctx_emb)?;

        let mut topic = None;
        let mut topic_nll = None;
        let mut kl = None;
        let mut bow_nll = None;
        if let Some(ids) = self.layout.inferrer {
            let inf = ids.bind(b);
            let prior = inf.prior_net(g, &pair.bow_context).map_err(tag("kl"))?;
            let post = inf.infer_for_training(g, &pair.bow_dialogue, eps).map_err(tag("topic_nll"))?;
            kl = Some(gaussian_kl(g, post.gaussian, prior).map_err(tag("kl"))?);
            let beta = inf.beta(g).map_err(tag("topic_nll"))?;
            topic_nll = Some(topic_word_nll(g, &pair.bow_dialogue, post.theta, beta).map_err(tag("topic_nll"))?);
            bow_nll = Some(self.bow_aux_loss(g, b, post.nu, zeta, &pair.response).map_err(tag("bow_nll"))?);
            topic = Some(post);
        }
        let theta = topic.map(|t| t.theta);

        let (mut provider, token_logits, gen_nll, target_tokens) =
            self.teacher_forced(g, b, pair, &ctx_emb, zeta, theta, &mut rng).map_err(tag("gen_nll"))?;

        let mut total = gen_nll;
        if let (Some(t), Some(k), Some(w)) = (topic_nll, kl, bow_nll) {
            let wk = g.scale(k, kl_weight)?;
            total = g.add(total, t)?;
            total = g.add(total, wk)?;
            total = g.add(total, w)?;
        }

        for (name, v) in [("gen_nll", Some(gen_nll)), ("topic_nll", topic_nll), ("kl", kl), ("bow_nll", bow_nll)] {
            if let Some(v) = v {
                let x = g.scalar(v);
                if !x.is_finite() {
                    return Err(Error::Numeric(format!("{name} is {x}")));
                }
            }
        }

        Ok(ForwardOutput {
            total,
            gen_nll,
            topic_nll,
            kl,
            bow_nll,
            token_logits,
            topic,
            zeta,
            decoder_weights: std::mem::take(&mut provider.generated),
            decoder_gates: std::mem::take(&mut provider.gates),
            target_tokens,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn teacher_forced(
        &self,
        g: &mut Graph,
        b: &Bound,
        pair: &EncodedPair,
        ctx_emb: &[Var],
        zeta: Option<Var>,
        theta: Option<Var>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(CellProvider, Var, Var, usize)> {
        let (states, summary) = self.encode(g, b, ctx_emb, zeta, theta, rng)?;
        let memory = g.stack_rows(&states)?;
        let mut state = self.decoder_init(g, b, summary)?;
        let mut provider = self.provider(g, b, &self.layout.decoder, zeta, theta)?;

        let inputs: Vec<usize> = std::iter::once(SOS).chain(pair.response.iter().copied()).collect();
        let targets: Vec<usize> = pair.response.iter().copied().chain(std::iter::once(EOS)).collect();
        let embedded = self.embed(g, b, &inputs, rng)?;
        let mut logits = Vec::with_capacity(targets.len());
        let mut picked = Vec::with_capacity(targets.len());
        for (&x, &y) in embedded.iter().zip(&targets) {
            let (l, next) = self.decoder_step(g, b, &mut provider, x, state, memory)?;
            state = next;
            let lp = g.log_softmax(l)?;
            picked.push(g.gather(lp, &[y])?);
            logits.push(l);
        }
        let token_logits = g.stack_rows(&logits)?;
        let ll = g.concat(&picked)?;
        let ll = g.sum(ll)?;
        let gen_nll = g.neg(ll)?;
        Ok((provider, token_logits, gen_nll, targets.len()))
    }

    /// Loss components of one pair with the parameters frozen.
    pub fn evaluate(&self, pair: &EncodedPair, eps: &[f64], kl_weight: f64) -> Result<LossValues> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, pair, eps, kl_weight, None)?;
        Ok(out.values(&g))
    }

    /// Greedy decoding; `θ` comes from the prior network at its mean.
    /// The end-of-sequence token is not included in the output.
    pub fn greedy_decode(&self, context: &[usize], bow_context: &BowVector, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Ok(Vec::new());
        }
        if context.is_empty() {
            return Err(Error::Contract("empty context".into()));
        }
        self.check_tokens(context, "context")?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let mut none = None;
        let ctx_emb = self.embed(&mut g, &b, context, &mut none)?;
        let zeta = self.context_summary(&mut g, &b, &ctx_emb)?;
        let theta = match self.layout.inferrer {
            Some(ids) => Some(ids.bind(&b).infer_for_generation(&mut g, bow_context)?.theta),
            None => None,
        };
        let (states, summary) = self.encode(&mut g, &b, &ctx_emb, zeta, theta, &mut none)?;
        let memory = g.stack_rows(&states)?;
        let mut state = self.decoder_init(&mut g, &b, summary)?;
        let mut provider = self.provider(&mut g, &b, &self.layout.decoder, zeta, theta)?;
        let emb = b[self.layout.embedding];
        let mut prev = SOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let x = g.row(emb, prev)?;
            let (logits, next) = self.decoder_step(&mut g, &b, &mut provider, x, state, memory)?;
            state = next;
            let tok = argmax(g.value(logits).data());
            if tok == EOS {
                break;
            }
            out.push(tok);
            prev = tok;
        }
        Ok(out)
    }

    /// `β`, the `K × C` topic-word matrix, if the mode has topics.
    pub fn topic_word_distributions(&self) -> Result<Option<Tensor>> {
        let Some(ids) = self.layout.inferrer else { return Ok(None) };
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let beta = ids.bind(&b).beta(&mut g)?;
        Ok(Some(g.value(beta).clone()))
    }

    /// Rows of the topical word embedding `Ϝ`.
    pub fn topical_word_embeddings(&self) -> Option<&Tensor> {
        self.layout.inferrer.map(|ids| self.params.get(ids.word_emb))
    }

    /// Column-Gram statistics of every adapter factor pair.
    pub fn orthogonality(&self) -> Vec<OrthogonalityEntry> {
        let mut cells: Vec<&CellIds> = self.layout.encoder.iter().flatten().collect();
        cells.push(&self.layout.decoder);
        let mut out = Vec::new();
        for cell in cells {
            let factors = cell
                .context
                .map(|c| ("ctx", c.u, c.v))
                .into_iter()
                .chain(cell.topic.map(|t| ("topic", t.u, t.v)));
            for (kind, u, v) in factors {
                let (u_offdiag, u_diag_dev) = gram_stats(self.params.get(u));
                let (v_offdiag, v_diag_dev) = gram_stats(self.params.get(v));
                out.push(OrthogonalityEntry { adapter: format!("{}.{kind}", cell.name), u_offdiag, v_offdiag, u_diag_dev, v_diag_dev });
            }
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
