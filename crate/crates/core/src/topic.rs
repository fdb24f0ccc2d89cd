//! Neural variational topic inference.
//!
//! A Gaussian latent `ν` is inferred from a bag of topical words: the prior
//! network sees the context alone, the posterior (inference) network sees the
//! whole dialogue. The topic distribution is `θ = softmax(ν·W_ν)`, and each
//! topic's word distribution is `β_k = softmax(Ϝ·Λ_kᵀ)` from topical word
//! embeddings `Ϝ` and topic embeddings `Λ`. Topic assignments are summed out:
//! `log p(w | β, θ) = log (θ·β)[w]`.

use std::collections::BTreeMap;

use crate::corpus::TopicalVocab;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Sparse counts over topical-vocabulary indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BowVector {
    counts: BTreeMap<usize, usize>,
}

impl BowVector {
    pub fn from_counts(counts: BTreeMap<usize, usize>) -> Self {
        debug_assert!(counts.values().all(|&c| c >= 1));
        Self { counts }
    }

    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn to_dense(&self, size: usize) -> Tensor {
        let mut v = vec![0.0; size];
        for (&i, &c) in &self.counts {
            v[i] = c as f64;
        }
        Tensor::vector(v)
    }
}

/// Counts tokens that belong to the topical vocabulary; everything else is dropped.
pub fn bow_featurize(tokens: &[String], topical: &TopicalVocab) -> BowVector {
    let mut counts = BTreeMap::new();
    for t in tokens {
        if let Some(i) = topical.index_of(t) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    BowVector { counts }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub log_var: Var,
}

/// One tanh hidden layer feeding two linear heads (mean and log-variance).
#[derive(Clone, Copy, Debug)]
pub struct GaussianNet {
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub lv_w: Var,
    pub lv_b: Var,
}

impl GaussianNet {
    pub fn forward(&self, g: &mut Graph, bow: &BowVector) -> Result<GaussianParams> {
        let c = g.shape(self.hidden_w)[1];
        if let Some((&i, _)) = bow.counts().iter().next_back() {
            if i >= c {
                return Err(Error::shape("gaussian_net", &[i + 1], &[c]));
            }
        }
        let x = g.constant(bow.to_dense(c));
        let h = g.matvec(self.hidden_w, x)?;
        let h = g.add(h, self.hidden_b)?;
        let h = g.tanh(h)?;
        let mu = g.matvec(self.mu_w, h)?;
        let mu = g.add(mu, self.mu_b)?;
        let lv = g.matvec(self.lv_w, h)?;
        let log_var = g.add(lv, self.lv_b)?;
        Ok(GaussianParams { mu, log_var })
    }
}

/// `ν = μ + ε ⊙ exp(log σ² / 2)`.
pub fn reparameterize(g: &mut Graph, p: GaussianParams, eps: &[f64]) -> Result<Var> {
    let n = g.shape(p.mu)[0];
    if eps.len() != n {
        return Err(Error::shape("reparameterize", &[eps.len()], &[n]));
    }
    let half = g.scale(p.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let e = g.constant(Tensor::vector(eps.to_vec()));
    let noise = g.mul(e, sigma)?;
    g.add(p.mu, noise)
}

/// `θ = softmax(ν·W_ν)`.
pub fn topic_distribution(g: &mut Graph, nu: Var, w_nu: Var) -> Result<Var> {
    let logits = g.vecmat(nu, w_nu)?;
    g.softmax(logits)
}

/// `β` as a `K × C` matrix whose row `k` is `softmax(Ϝ·Λ_kᵀ)`.
pub fn topic_word_matrix(g: &mut Graph, word_emb: Var, topic_emb: Var) -> Result<Var> {
    let logits = g.matmul_nt(topic_emb, word_emb)?;
    g.softmax_rows(logits)
}

/// `−Σ_w count_w · log Σ_k θ_k β_k[w]`.
pub fn topic_word_nll(g: &mut Graph, bow: &BowVector, theta: Var, beta: Var) -> Result<Var> {
    let c = g.shape(beta)[1];
    let idx: Vec<usize> = bow.counts().keys().copied().collect();
    let counts: Vec<f64> = bow.counts().values().map(|&n| n as f64).collect();
    if idx.last().is_some_and(|&i| i >= c) {
        return Err(Error::shape("topic_word_nll", &[idx[idx.len() - 1] + 1], &[c]));
    }
    let p = g.vecmat(theta, beta)?;
    let picked = g.gather(p, &idx)?;
    let logp = g.log_clamped(picked, PROB_FLOOR)?;
    let w = g.constant(Tensor::vector(counts));
    let ll = g.dot(logp, w)?;
    g.neg(ll)
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl(g: &mut Graph, q: GaussianParams, p: GaussianParams) -> Result<Var> {
    if g.shape(q.mu) != g.shape(p.mu) {
        return Err(Error::shape("gaussian_kl", g.shape(q.mu), g.shape(p.mu)));
    }
    let var_q = g.exp(q.log_var)?;
    let neg_lvp = g.neg(p.log_var)?;
    let inv_var_p = g.exp(neg_lvp)?;
    let diff = g.sub(q.mu, p.mu)?;
    let sq = g.mul(diff, diff)?;
    let num = g.add(var_q, sq)?;
    let ratio = g.mul(num, inv_var_p)?;
    let lv = g.sub(p.log_var, q.log_var)?;
    let t = g.add(lv, ratio)?;
    let s = g.sum(t)?;
    let n = g.shape(q.mu)[0] as f64;
    let one = g.constant(Tensor::scalar(n));
    let s = g.sub(s, one)?;
    g.scale(s, 0.5)
}

/// Variational state of one dialogue.
#[derive(Clone, Copy, Debug)]
pub struct TopicPosterior {
    pub gaussian: GaussianParams,
    pub nu: Var,
    pub theta: Var,
}

/// The topic inferrer's parameters, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct TopicInferrer {
    pub prior: GaussianNet,
    pub posterior: GaussianNet,
    pub w_nu: Var,
    /// `Ϝ`, `C × H`.
    pub word_emb: Var,
    /// `Λ`, `K × H`.
    pub topic_emb: Var,
}

impl TopicInferrer {
    pub fn prior_net(&self, g: &mut Graph, bow_context: &BowVector) -> Result<GaussianParams> {
        self.prior.forward(g, bow_context)
    }

    pub fn posterior_net(&self, g: &mut Graph, bow_dialogue: &BowVector) -> Result<GaussianParams> {
        self.posterior.forward(g, bow_dialogue)
    }

    /// Generation path: prior network, `ν` at the prior mean.
    pub fn infer_for_generation(&self, g: &mut Graph, bow_context: &BowVector) -> Result<TopicPosterior> {
        let gaussian = self.prior_net(g, bow_context)?;
        let theta = topic_distribution(g, gaussian.mu, self.w_nu)?;
        Ok(TopicPosterior { gaussian, nu: gaussian.mu, theta })
    }

    /// Training path: posterior network and one reparameterized sample.
    pub fn infer_for_training(&self, g: &mut Graph, bow_dialogue: &BowVector, eps: &[f64]) -> Result<TopicPosterior> {
        let gaussian = self.posterior_net(g, bow_dialogue)?;
        let nu = reparameterize(g, gaussian, eps)?;
        let theta = topic_distribution(g, nu, self.w_nu)?;
        Ok(TopicPosterior { gaussian, nu, theta })
    }

    pub fn beta(&self, g: &mut Graph) -> Result<Var> {
        topic_word_matrix(g, self.word_emb, self.topic_emb)
    }
}
