//! Optimization: Adam with decoupled weight decay, KL annealing, mean-reduced
//! batches, validation-driven early stopping, and a gradient-check harness.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{AnnealSteps, ModelConfig, TrainConfig};
use crate::corpus::EncodedPair;
use crate::error::{Error, Result};
use crate::gradcheck::{derivative, relative_error};
use crate::model::{Adand, LossValues};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};
use crate::topic::BowVector;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `min(1, step / anneal_steps)`.
pub fn kl_weight(step: u64, anneal_steps: u64) -> Result<f64> {
    if anneal_steps == 0 {
        return Err(Error::Config("kl_anneal_steps must be positive".into()));
    }
    Ok((step as f64 / anneal_steps as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update, preceded by `p ← p − lr·wd·p`.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, grad) in params.ids().zip(grads) {
        if params.get(id).shape() != grad.shape() {
            return Err(Error::shape("adam_step", params.get(id).shape(), grad.shape()));
        }
        if grad.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN gradient for {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            p[j] -= lr * weight_decay * p[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Standard-normal reparameterization noise for one sample.
pub fn draw_eps(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if config.mode.uses_topics() {
        (0..config.latent_size).map(|_| rng.sample(StandardNormal)).collect()
    } else {
        Vec::new()
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(
    model: &Adand,
    pair: &EncodedPair,
    eps: &[f64],
    kl_weight: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, true);
    let out = model.forward(&mut g, &b, pair, eps, kl_weight, dropout_rng)?;
    let values = out.values(&g);
    let grads = g.backward(out.total)?;
    Ok((values, b.collect(&grads, &g)))
}

/// Element-wise mean of per-sample gradients.
pub fn mean_gradients(per_sample: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let Some(first) = per_sample.first() else {
        return Err(Error::Contract("mean of zero gradients".into()));
    };
    let n = per_sample.len() as f64;
    let mut acc: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for grads in per_sample {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    Ok(acc)
}

/// Mean objective over a set of pairs, with `ε = 0` and dropout off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossSummary {
    pub total: f64,
    pub gen_nll_per_token: f64,
    pub topic_nll: f64,
    pub kl: f64,
    pub bow_nll: f64,
}

pub fn mean_loss(model: &Adand, pairs: &[EncodedPair], kl_weight: f64) -> Result<LossSummary> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to evaluate".into()));
    }
    let eps = vec![0.0; if model.config().mode.uses_topics() { model.config().latent_size } else { 0 }];
    let mut s = LossSummary::default();
    let mut gen = 0.0;
    let mut tokens = 0usize;
    for p in pairs {
        let v = model.evaluate(p, &eps, kl_weight)?;
        s.total += v.total;
        s.topic_nll += v.topic_nll;
        s.kl += v.kl;
        s.bow_nll += v.bow_nll;
        gen += v.gen_nll;
        tokens += v.tokens;
    }
    let n = pairs.len() as f64;
    s.total /= n;
    s.topic_nll /= n;
    s.kl /= n;
    s.bow_nll /= n;
    s.gen_nll_per_token = gen / tokens as f64;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-sample objective over the epoch's batches.
    pub loss: f64,
    pub gen_nll_per_token: f64,
    pub kl_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub epoch: f64,
    pub loss: f64,
    pub gen_nll_per_token: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameter_counts: BTreeMap<String, usize>,
    pub train_curve: Vec<EpochPoint>,
    pub validation_curve: Vec<ValidationPoint>,
    pub best_validation_loss: f64,
    pub best_step: u64,
    pub steps: u64,
    pub stopped_early: bool,
    /// Training-set objective of the retained parameters.
    pub final_train: LossSummary,
    /// Filled in by callers that run the metric suite.
    pub metrics: Option<serde_json::Value>,
}

/// Epoch-at-a-time training loop with validation-driven early stopping.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train_set: &'a [EncodedPair],
    valid_set: &'a [EncodedPair],
    rng: ChaCha8Rng,
    state: OptimizerState,
    order: Vec<usize>,
    batches_per_epoch: usize,
    anneal: u64,
    validate_period: u64,
    best_loss: f64,
    best_params: Vec<Tensor>,
    best_step: u64,
    bad: usize,
    epoch: usize,
    stopped_early: bool,
    train_curve: Vec<EpochPoint>,
    validation_curve: Vec<ValidationPoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &Adand, cfg: &TrainConfig, train_set: &'a [EncodedPair], valid_set: &'a [EncodedPair]) -> Result<Self> {
        cfg.validate()?;
        if train_set.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        if valid_set.is_empty() {
            return Err(Error::Config("empty validation corpus".into()));
        }
        let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
        let anneal = match cfg.kl_anneal_steps {
            AnnealSteps::Epoch => batches_per_epoch as u64,
            AnnealSteps::Steps(n) => n,
        };
        Ok(Self {
            cfg: cfg.clone(),
            train_set,
            valid_set,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            state: OptimizerState::new(model.params()),
            order: (0..train_set.len()).collect(),
            batches_per_epoch,
            anneal,
            validate_period: ((batches_per_epoch as f64 * cfg.validate_every).ceil() as u64).max(1),
            best_loss: f64::INFINITY,
            best_params: model.params().tensors(),
            best_step: 0,
            bad: 0,
            epoch: 0,
            stopped_early: false,
            train_curve: Vec::new(),
            validation_curve: Vec::new(),
        })
    }

    /// Whether another epoch may run.
    pub fn active(&self) -> bool {
        !self.stopped_early && self.epoch < self.cfg.max_epochs
    }

    pub fn train_curve(&self) -> &[EpochPoint] {
        &self.train_curve
    }

    pub fn validation_curve(&self) -> &[ValidationPoint] {
        &self.validation_curve
    }

    fn validate(&mut self, model: &Adand) -> Result<()> {
        let v = mean_loss(model, self.valid_set, 1.0)?;
        let improved = v.total < self.best_loss;
        if improved {
            self.best_loss = v.total;
            self.best_params = model.params().tensors();
            self.best_step = self.state.step;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        debug!("step {} validation {:.5} (best {:.5})", self.state.step, v.total, self.best_loss);
        self.validation_curve.push(ValidationPoint {
            step: self.state.step,
            epoch: self.state.step as f64 / self.batches_per_epoch as f64,
            loss: v.total,
            gen_nll_per_token: v.gen_nll_per_token,
            improved,
        });
        if self.bad >= self.cfg.patience {
            self.stopped_early = true;
        }
        Ok(())
    }

    /// Runs one shuffled epoch (cut short if early stopping triggers) and
    /// returns its curve point.
    pub fn run_epoch(&mut self, model: &mut Adand) -> Result<EpochPoint> {
        if !self.active() {
            return Err(Error::Contract("training has finished".into()));
        }
        self.order.shuffle(&mut self.rng);
        let order = self.order.clone();
        let mut loss_sum = 0.0;
        let mut gen_sum = 0.0;
        let mut tokens = 0usize;
        let mut seen = 0usize;
        let mut last_kl = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let w = kl_weight(self.state.step, self.anneal)?;
            last_kl = w;
            let mut per_sample = Vec::with_capacity(batch.len());
            for &i in batch {
                let eps = draw_eps(model.config(), &mut self.rng);
                let (values, grads) = sample_gradient(model, &self.train_set[i], &eps, w, Some(&mut self.rng))?;
                loss_sum += values.total;
                gen_sum += values.gen_nll;
                tokens += values.tokens;
                per_sample.push(grads);
            }
            seen += batch.len();
            let grads = mean_gradients(&per_sample)?;
            adam_step(model.params_mut(), &grads, &mut self.state, self.cfg.lr, self.cfg.weight_decay)?;
            if self.state.step.is_multiple_of(self.validate_period) {
                self.validate(model)?;
                if self.stopped_early {
                    break;
                }
            }
        }
        self.epoch += 1;
        let point = EpochPoint {
            epoch: self.epoch,
            step: self.state.step,
            loss: loss_sum / seen as f64,
            gen_nll_per_token: gen_sum / tokens as f64,
            kl_weight: last_kl,
        };
        info!("epoch {} loss {:.5} nll/token {:.5}", point.epoch, point.loss, point.gen_nll_per_token);
        self.train_curve.push(point.clone());
        Ok(point)
    }

    /// Restores the best-validation parameters into `model` and builds the report.
    pub fn finish(mut self, model: &mut Adand) -> Result<TrainingReport> {
        if self.validation_curve.is_empty() {
            // too few steps for a scheduled validation; judge the final parameters
            self.validate(model)?;
            self.stopped_early = false;
        }
        model.params_mut().set_tensors(self.best_params);
        let final_train = mean_loss(model, self.train_set, 1.0)?;
        Ok(TrainingReport {
            model: model.config().clone(),
            train: self.cfg,
            parameter_counts: model.count_parameters(),
            train_curve: self.train_curve,
            validation_curve: self.validation_curve,
            best_validation_loss: self.best_loss,
            best_step: self.best_step,
            steps: self.state.step,
            stopped_early: self.stopped_early,
            final_train,
            metrics: None,
        })
    }
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
pub fn train(model: &mut Adand, cfg: &TrainConfig, train_set: &[EncodedPair], valid_set: &[EncodedPair]) -> Result<TrainingReport> {
    let mut t = Trainer::new(model, cfg, train_set, valid_set)?;
    while t.active() {
        t.run_epoch(model)?;
    }
    t.finish(model)
}

/// Worst relative error per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| !(*e < self.tolerance)).map(|(n, _)| n.clone()).collect()
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    /// `Err(Error::GradCheck(names))` when any tensor exceeds the tolerance.
    pub fn into_result(self) -> Result<Self> {
        let failures = self.failures();
        if failures.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck(failures))
        }
    }
}

/// A random pair within the model's vocabularies, for gradient checks.
pub fn random_pair(config: &ModelConfig, context_len: usize, response_len: usize, rng: &mut ChaCha8Rng) -> EncodedPair {
    let mut tok = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(4..config.vocab_size)).collect() };
    let context = tok(context_len);
    let response = tok(response_len);
    let mut bow = |n: usize| {
        let mut m = BTreeMap::new();
        for _ in 0..n {
            *m.entry(rng.random_range(0..config.topical_vocab_size)).or_insert(0) += 1;
        }
        BowVector::from_counts(m)
    };
    let bow_context = bow(context_len);
    let mut bow_dialogue = bow_context.counts().clone();
    for (k, v) in bow(response_len).counts() {
        *bow_dialogue.entry(*k).or_insert(0) += v;
    }
    EncodedPair { context, response, bow_context, bow_dialogue: BowVector::from_counts(bow_dialogue) }
}

/// Analytic gradient adjustment applied before comparison, for harness tests.
pub type Tamper<'a> = &'a dyn Fn(&str, &mut Tensor);

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter tensor of `model` on one pair.
pub fn grad_check_model(
    model: &Adand,
    pair: &EncodedPair,
    eps: &[f64],
    kl_weight: f64,
    tolerance: f64,
    tamper: Option<Tamper<'_>>,
) -> Result<GradCheckReport> {
    let (_, mut analytic) = sample_gradient(model, pair, eps, kl_weight, None)?;
    if let Some(t) = tamper {
        for (id, grad) in model.params().ids().zip(analytic.iter_mut()) {
            t(model.params().name(id), grad);
        }
    }
    let mut work = model.clone();
    let mut entries = Vec::new();
    let ids: Vec<_> = model.params().ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = work.params().get(id).data()[j];
            let numeric = derivative(orig, |x| {
                work.params_mut().get_mut(id).data_mut()[j] = x;
                Ok(work.evaluate(pair, eps, kl_weight)?.total)
            })?;
            work.params_mut().get_mut(id).data_mut()[j] = orig;
            let e = relative_error(grad.data()[j], numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        entries.push((model.params().name(id).to_string(), worst));
    }
    Ok(GradCheckReport { tolerance, entries })
}

/// Gradient check of a freshly initialized model on a fixed random pair.
pub fn grad_check(config: &ModelConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let model = Adand::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = random_pair(&config, 3, 3, &mut rng);
    let eps = draw_eps(&config, &mut rng);
    grad_check_model(&model, &pair, &eps, 0.7, tolerance, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn store(values: &[&[f64]]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.add(format!("p{i}"), "test", Tensor::vector(v.to_vec()));
        }
        s
    }

    #[test]
    fn kl_weight_schedule() {
        assert_eq!(kl_weight(0, 10).unwrap(), 0.0);
        assert_eq!(kl_weight(5, 10).unwrap(), 0.5);
        assert_eq!(kl_weight(10, 10).unwrap(), 1.0);
        assert_eq!(kl_weight(1000, 10).unwrap(), 1.0);
        assert!(matches!(kl_weight(3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[&[1.0, -2.0]]);
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &[Tensor::zeros(&[2])], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(&[&[1.0, 1.0, 1.0]]);
        let mut st = OptimizerState::new(&s);
        let g = [0.5, -3.0, 1e-9];
        adam_step(&mut s, &[Tensor::vector(g.to_vec())], &mut st, 0.01, 0.0).unwrap();
        let p = s.get(s.ids().next().unwrap()).data().to_vec();
        for (pi, gi) in p.iter().zip(g) {
            let expected = 1.0 - 0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((pi - expected).abs() < 1e-12, "{pi} vs {expected}");
        }
    }

    #[test]
    fn two_steps_match_hand_trace() {
        let mut s = store(&[&[0.5]]);
        let mut st = OptimizerState::new(&s);
        let (lr, wd) = (0.1, 0.01);
        adam_step(&mut s, &[Tensor::vector(vec![0.2])], &mut st, lr, wd).unwrap();
        adam_step(&mut s, &[Tensor::vector(vec![-0.4])], &mut st, lr, wd).unwrap();

        let mut p: f64 = 0.5;
        p -= lr * wd * p;
        let m1 = 0.1 * 0.2;
        let v1 = 0.001 * 0.04;
        p -= lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        p -= lr * wd * p;
        let m2 = 0.9 * m1 + 0.1 * -0.4;
        let v2 = 0.999 * v1 + 0.001 * 0.16;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999f64 * 0.999);
        p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((s.get(s.ids().next().unwrap()).data()[0] - p).abs() < 1e-14);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(&[&[1.0], &[2.0]]);
        let mut st = OptimizerState::new(&s);
        let err = adam_step(&mut s, &[Tensor::vector(vec![0.0]), Tensor::vector(vec![f64::NAN])], &mut st, 0.1, 0.0).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("p1")), "{err}");
        assert!(adam_step(&mut s, &[Tensor::zeros(&[2]), Tensor::zeros(&[1])], &mut st, 0.1, 0.0).is_err());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut s = store(&[&[1.0, 2.0], &[3.0]]);
        let before = s.tensors();
        let mut st = OptimizerState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &[Tensor::vector(vec![1.0, -1.0]), Tensor::vector(vec![0.3])], &mut st, 0.0, 0.5).unwrap();
        }
        assert_eq!(s.tensors(), before);
    }

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            hidden_size: 3,
            embed_size: 3,
            adapter_size: 2,
            context_size: 2,
            latent_size: 2,
            num_topics: 2,
            topical_vocab_size: 5,
            topic_embed_size: 2,
            mlp_hidden: 3,
            vocab_size: 9,
            encoder_layers: 1,
            mode,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let cfg = tiny(Mode::Both);
        let model = Adand::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<_> = (0..3).map(|_| random_pair(&cfg, 2, 2, &mut rng)).collect();
        let eps = [0.1, -0.3];
        let per: Vec<_> = pairs.iter().map(|p| sample_gradient(&model, p, &eps, 0.5, None).unwrap().1).collect();
        let mean = mean_gradients(&per).unwrap();
        for (i, t) in mean.iter().enumerate() {
            for j in 0..t.len() {
                let explicit = (per[0][i].data()[j] + per[1][i].data()[j] + per[2][i].data()[j]) / 3.0;
                assert!((t.data()[j] - explicit).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn vanilla_grad_check_passes() {
        let r = grad_check(&tiny(Mode::Vanilla), 1e-4, 1).unwrap();
        assert!(r.failures().is_empty(), "{:?}", r.entries);
    }

    #[test]
    fn corrupted_adjoint_is_reported() {
        let cfg = tiny(Mode::Topic);
        let model = Adand::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random_pair(&cfg, 2, 2, &mut rng);
        let tamper = |name: &str, t: &mut Tensor| {
            if name == "out.b" {
                t.data_mut()[0] *= 2.0;
            }
        };
        let r = grad_check_model(&model, &pair, &[0.2, 0.1], 0.5, 1e-4, Some(&tamper)).unwrap();
        assert_eq!(r.failures(), vec!["out.b".to_string()]);
        assert!(matches!(r.into_result(), Err(Error::GradCheck(names)) if names == ["out.b"]));
    }

    fn frozen_train_cfg() -> TrainConfig {
        TrainConfig { lr: 0.0, weight_decay: 0.0, batch_size: 2, patience: 1, validate_every: 0.5, max_epochs: 20, ..TrainConfig::default() }
    }

    #[test]
    fn frozen_model_stops_after_two_validations() {
        let cfg = tiny(Mode::Both);
        let mut model = Adand::new(cfg.clone()).unwrap();
        let before = model.params().tensors();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = (0..4).map(|_| random_pair(&cfg, 2, 2, &mut rng)).collect();
        let report = train(&mut model, &frozen_train_cfg(), &pairs, &pairs).unwrap();
        assert_eq!(report.validation_curve.len(), 2);
        assert!(report.stopped_early);
        assert_eq!(model.params().tensors(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig { dropout: 0.1, ..tiny(Mode::Both) };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pairs: Vec<_> = (0..5).map(|_| random_pair(&cfg, 3, 2, &mut rng)).collect();
        let tc = TrainConfig { batch_size: 2, max_epochs: 3, lr: 0.01, ..TrainConfig::default() };
        let run = || {
            let mut m = Adand::new(cfg.clone()).unwrap();
            let r = train(&mut m, &tc, &pairs, &pairs).unwrap();
            (r, m.params().tensors())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let mut m = Adand::new(tiny(Mode::Vanilla)).unwrap();
        assert!(matches!(train(&mut m, &TrainConfig::default(), &[], &[]), Err(Error::Config(_))));
    }
}
