//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use adand::adapters::{adapter_param_count, factorized_weight, AdapterDims};
use adand::app::{self, Artifacts};
use adand::config::{Config, Mode, ModelConfig};
use adand::corpus::{encode_pair, TopicalVocab, Vocab, EOS, SOS};
use adand::metrics::{self, EmbeddingTable};
use adand::model::Adand;
use adand::recurrent::{lstm_step, LstmState, PackedLstmWeights};
use adand::synth;
use adand::topic::{gaussian_kl, topic_word_nll, BowVector, GaussianParams};
use adand::trainer::{self, kl_weight, mean_loss, Trainer};
use adand::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> Config {
    Config::load(&configs_dir().join(name)).expect("shipped config")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

// ---- straight-line reference computations ----

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = w.cols();
    (0..w.rows())
        .map(|i| {
            let row = &w.data()[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ref_lstm(w: &Tensor, b: &Tensor, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let z = add(&matvec(w, &hx), b.data());
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for k in 0..n {
        let i = sigmoid(z[k]);
        let g = z[n + k].tanh();
        let f = sigmoid(z[2 * n + k]);
        let o = sigmoid(z[3 * n + k]);
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

fn ref_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let mut sum = 0.0;
    for o in &out {
        sum += o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    out
}

fn ref_log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// A plain attention seq2seq with static weights: bidirectional stacked
/// encoder, `tanh` decoder initialization, dot-product attention over the
/// top encoder layer. Returns the summed target NLL and the logits per step.
fn reference_seq2seq(model: &Adand, context: &[usize], response: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let p = |name: &str| model.params().get(model.params().find(name).unwrap_or_else(|| panic!("{name}")));
    let cfg = model.config();
    let nh = cfg.hidden_size;
    let emb = p("emb");
    let row = |t: usize| emb.row(t).to_vec();

    let mut layer_in: Vec<Vec<f64>> = context.iter().map(|&t| row(t)).collect();
    let mut summary = Vec::new();
    for l in 0..cfg.encoder_layers {
        let run = |dir: &str, xs: &mut dyn Iterator<Item = &Vec<f64>>| {
            let (w, b) = (p(&format!("enc.l{l}.{dir}.w")), p(&format!("enc.l{l}.{dir}.b")));
            let (mut h, mut c) = (vec![0.0; nh], vec![0.0; nh]);
            let mut hs = Vec::new();
            for x in xs {
                (h, c) = ref_lstm(w, b, x, &h, &c);
                hs.push(h.clone());
            }
            hs
        };
        let fwd = run("fwd", &mut layer_in.iter());
        let mut bwd = run("bwd", &mut layer_in.iter().rev());
        bwd.reverse();
        summary = fwd.last().unwrap().iter().chain(&bwd[0]).copied().collect();
        layer_in = fwd.iter().zip(&bwd).map(|(f, b)| f.iter().chain(b).copied().collect()).collect();
    }
    let memory = layer_in;

    let mut h: Vec<f64> = add(&matvec(p("dec.init.w"), &summary), p("dec.init.b").data()).iter().map(|v| v.tanh()).collect();
    let mut c = vec![0.0; nh];
    let inputs: Vec<usize> = std::iter::once(SOS).chain(response.iter().copied()).collect();
    let targets: Vec<usize> = response.iter().copied().chain(std::iter::once(EOS)).collect();
    let mut picked = Vec::new();
    let mut all_logits = Vec::new();
    for (&x, &y) in inputs.iter().zip(&targets) {
        (h, c) = ref_lstm(p("dec.w"), p("dec.b"), &row(x), &h, &c);
        let q = matvec(p("attn.w"), &h);
        let scores: Vec<f64> = memory
            .iter()
            .map(|m| {
                let mut s = 0.0;
                for j in 0..m.len() {
                    s += m[j] * q[j];
                }
                s
            })
            .collect();
        let alpha = ref_softmax(&scores);
        let mut ctx = vec![0.0; 2 * nh];
        for (a, m) in alpha.iter().zip(&memory) {
            for (o, v) in ctx.iter_mut().zip(m) {
                *o += a * v;
            }
        }
        let features: Vec<f64> = h.iter().chain(&ctx).copied().collect();
        let logits = add(&matvec(p("out.w"), &features), p("out.b").data());
        picked.push(ref_log_softmax(&logits)[y]);
        all_logits.push(logits);
    }
    (-picked.iter().sum::<f64>(), all_logits)
}

// ---- criteria ----

fn gradient_fidelity() -> Outcome {
    let cfg = load_config("tiny.cfg");
    ensure(cfg.model.mode == Mode::Both && cfg.model.attention, "tiny config must be mode=both with attention")?;
    let start = Instant::now();
    let report = app::gradcheck(&cfg.model, 1e-4, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let max = report.max_error();
    let detail = format!("{} tensors, max relative error {max:.2e}, {secs:.1} s", report.entries.len());
    ensure(report.failures().is_empty(), format!("{detail}; failing: {:?}", report.failures()))?;
    ensure(secs < 60.0, format!("{detail}; too slow"))?;
    Ok(detail)
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // factorized weight against the triple loop
    let mut worst_factor = 0.0f64;
    for _ in 0..20 {
        let (rows, cols, k) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..6));
        let (u, s, v) = (random_tensor(&mut rng, &[rows, k], 1.0), random_tensor(&mut rng, &[k], 1.0), random_tensor(&mut rng, &[cols, k], 1.0));
        let mut g = Graph::new();
        let (uv, sv, vv) = (g.constant(u.clone()), g.constant(s.clone()), g.constant(v.clone()));
        let w = factorized_weight(&mut g, uv, sv, vv).map_err(|e| e.to_string())?;
        for r in 0..rows {
            for c in 0..cols {
                let mut expect = 0.0;
                for z in 0..k {
                    expect += u.at(r, z) * s.data()[z] * v.at(c, z);
                }
                worst_factor = worst_factor.max((g.value(w).at(r, c) - expect).abs());
            }
        }
    }
    ensure(worst_factor <= 1e-12, format!("factorized weight off by {worst_factor:e}"))?;

    // topic-word likelihood against explicit enumeration of topic assignments
    let mut worst_nll = 0.0f64;
    for _ in 0..20 {
        let k: usize = rng.random_range(1..=4);
        let c = rng.random_range(1..=10);
        let theta = ref_softmax(&(0..k).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let beta: Vec<Vec<f64>> = (0..k).map(|_| ref_softmax(&(0..c).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())).collect();
        let mut counts = BTreeMap::new();
        let n_tokens: usize = rng.random_range(1..=5);
        let mut tokens = Vec::new();
        for _ in 0..n_tokens {
            let w = rng.random_range(0..c);
            *counts.entry(w).or_insert(0) += 1;
            tokens.push(w);
        }
        let mut marginal = 0.0;
        for code in 0..k.pow(n_tokens as u32) {
            let mut rest = code;
            let mut p = 1.0;
            for &w in &tokens {
                let z = rest % k;
                rest /= k;
                p *= theta[z] * beta[z][w];
            }
            marginal += p;
        }
        let expect = -marginal.ln();
        let mut g = Graph::new();
        let tv = g.constant(Tensor::vector(theta.clone()));
        let bv = g.constant(Tensor::matrix(k, c, beta.concat()).unwrap());
        let nll = topic_word_nll(&mut g, &BowVector::from_counts(counts), tv, bv).map_err(|e| e.to_string())?;
        worst_nll = worst_nll.max((g.scalar(nll) - expect).abs() / expect.abs().max(1.0));
    }
    ensure(worst_nll <= 1e-10, format!("topic-word NLL off by {worst_nll:e}"))?;

    // closed-form KL against Monte Carlo
    let q_mu = [0.3, -0.5, 1.0];
    let q_lv = [-0.4, 0.2, 0.0];
    let p_mu = [-0.2, 0.4, 0.1];
    let p_lv = [0.5, -0.3, 0.8];
    let mut g = Graph::new();
    let mut gp = |mu: &[f64], lv: &[f64]| GaussianParams { mu: g.constant(Tensor::vector(mu.to_vec())), log_var: g.constant(Tensor::vector(lv.to_vec())) };
    let (q, p) = (gp(&q_mu, &q_lv), gp(&p_mu, &p_lv));
    let kl = gaussian_kl(&mut g, q, p).map_err(|e| e.to_string())?;
    let kl = g.scalar(kl);
    let log_density = |x: f64, mu: f64, lv: f64| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - mu).powi(2) / lv.exp());
    let samples = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..samples {
        for d in 0..3 {
            let e: f64 = rng.sample(StandardNormal);
            let x = q_mu[d] + e * (q_lv[d] / 2.0).exp();
            acc += log_density(x, q_mu[d], q_lv[d]) - log_density(x, p_mu[d], p_lv[d]);
        }
    }
    let mc = acc / samples as f64;
    let kl_rel = (kl - mc).abs() / kl;
    ensure(kl_rel < 0.01, format!("KL {kl} vs Monte Carlo {mc}"))?;

    // LSTM step against the straight-line cell
    let mut worst_lstm = 0.0f64;
    for _ in 0..20 {
        let (nh, nx) = (rng.random_range(1..8), rng.random_range(1..8));
        let w = random_tensor(&mut rng, &[4 * nh, nh + nx], 1.0);
        let b = random_tensor(&mut rng, &[4 * nh], 1.0);
        let (x, h, c) = (random_tensor(&mut rng, &[nx], 1.0), random_tensor(&mut rng, &[nh], 1.0), random_tensor(&mut rng, &[nh], 1.0));
        let mut g = Graph::new();
        let weights = PackedLstmWeights { w: g.constant(w.clone()), b: g.constant(b.clone()) };
        let state = LstmState { h: g.constant(h.clone()), c: g.constant(c.clone()) };
        let xv = g.constant(x.clone());
        let out = lstm_step(&mut g, weights, xv, state).map_err(|e| e.to_string())?;
        let (eh, ec) = ref_lstm(&w, &b, x.data(), h.data(), c.data());
        worst_lstm = worst_lstm.max(g.value(out.h).max_abs_diff(&Tensor::vector(eh))).max(g.value(out.c).max_abs_diff(&Tensor::vector(ec)));
    }
    ensure(worst_lstm <= 1e-12, format!("lstm step off by {worst_lstm:e}"))?;

    Ok(format!(
        "factorized {worst_factor:.1e}, topic NLL {worst_nll:.1e}, KL {kl:.5} vs MC {mc:.5} ({:.3}%), lstm {worst_lstm:.1e}",
        100.0 * kl_rel
    ))
}

struct Overfit {
    model: Adand,
}

fn overfit(store: &mut Option<Overfit>) -> Outcome {
    let cfg = load_config("overfit.cfg");
    let pairs = synth::overfit_corpus(1);
    let stop = synth::FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let vocab = Vocab::build(&pairs, cfg.model.vocab_size);
    let topical = TopicalVocab::build(&pairs, cfg.model.topical_vocab_size, &stop, false);
    let mut mcfg = cfg.model.clone();
    mcfg.mode = Mode::Both;
    mcfg.vocab_size = vocab.len();
    mcfg.topical_vocab_size = topical.len();
    let encoded: Vec<_> = pairs.iter().map(|p| encode_pair(p, &vocab, &topical)).collect();
    let mut model = Adand::new(mcfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut trainer = Trainer::new(&model, &cfg.train, &encoded, &encoded).map_err(|e| e.to_string())?;
    let mut epochs = 0;
    let mut last = (f64::INFINITY, 0);
    while trainer.active() && epochs < 500 {
        trainer.run_epoch(&mut model).map_err(|e| e.to_string())?;
        epochs += 1;
        if epochs % 10 == 0 {
            let nll = mean_loss(&model, &encoded, 1.0).map_err(|e| e.to_string())?.gen_nll_per_token;
            let exact = encoded
                .iter()
                .filter(|p| model.greedy_decode(&p.context, &p.bow_context, 50).ok().as_ref() == Some(&p.response))
                .count();
            last = (nll, exact);
            if nll < 0.1 && exact >= 14 {
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{epochs} epochs, NLL/token {:.4}, exact {}/16, {secs:.1} s", last.0, last.1);
    *store = Some(Overfit { model });
    ensure(last.0 < 0.1 && last.1 >= 14, format!("{detail}; target not reached"))?;
    ensure(secs < 300.0, format!("{detail}; too slow"))?;
    Ok(detail)
}

fn tiny(mode: Mode, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_size: 5,
        embed_size: 4,
        adapter_size: 3,
        context_size: 4,
        latent_size: 3,
        num_topics: 3,
        topical_vocab_size: 7,
        topic_embed_size: 4,
        mlp_hidden: 5,
        vocab_size: 15,
        mode,
        dropout: 0.0,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

fn copy_by_name(from: &Adand, to: &mut Adand, skip: &str) -> Result<(), String> {
    let ids: Vec<_> = to.params().ids().collect();
    for id in ids {
        let name = to.params().name(id).to_string();
        if name.starts_with(skip) {
            continue;
        }
        let src = from.params().find(&name).ok_or_else(|| format!("{name} missing in source model"))?;
        let t = from.params().get(src).clone();
        ensure(t.shape() == to.params().get(id).shape(), format!("{name}: shape differs"))?;
        *to.params_mut().get_mut(id) = t;
    }
    Ok(())
}

fn ablation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // vanilla against the reference seq2seq
    for seed in 0..10 {
        let model = Adand::new(tiny(Mode::Vanilla, seed)).map_err(|e| e.to_string())?;
        let pair = trainer::random_pair(model.config(), rng.random_range(1..6), rng.random_range(0..5), &mut rng);
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, false);
        let out = model.forward(&mut g, &b, &pair, &[], 1.0, None).map_err(|e| e.to_string())?;
        let (nll, logits) = reference_seq2seq(&model, &pair.context, &pair.response);
        ensure(g.scalar(out.total).to_bits() == nll.to_bits(), format!("seed {seed}: loss {} vs reference {nll}", g.scalar(out.total)))?;
        let got = g.value(out.token_logits);
        for (t, l) in logits.iter().enumerate() {
            ensure(got.row(t).iter().zip(l).all(|(a, b)| a.to_bits() == b.to_bits()), format!("seed {seed}: logits differ at step {t}"))?;
        }
    }

    // topic mode: one matrix per conversation
    for seed in 0..5 {
        let model = Adand::new(tiny(Mode::Topic, seed)).map_err(|e| e.to_string())?;
        let pair = trainer::random_pair(model.config(), 4, 4, &mut rng);
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, false);
        let eps = trainer::draw_eps(model.config(), &mut rng);
        let out = model.forward(&mut g, &b, &pair, &eps, 1.0, None).map_err(|e| e.to_string())?;
        ensure(out.decoder_weights.len() == 5, "one decoder matrix per step")?;
        let first = g.value(out.decoder_weights[0]).clone();
        ensure(out.decoder_weights.iter().all(|&w| g.value(w) == &first), format!("seed {seed}: topic weights vary across steps"))?;
    }

    // gate saturation
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        for (bias, mode, skip) in [(50.0, Mode::Context, "\u{0}"), (-50.0, Mode::Topic, "bow.")] {
            let mut both = Adand::new(tiny(Mode::Both, seed)).map_err(|e| e.to_string())?;
            let gates: Vec<_> = both.params().ids().filter(|&id| both.params().name(id).ends_with(".gate.b")).collect();
            ensure(!gates.is_empty(), "no gates in mode=both")?;
            for id in gates {
                *both.params_mut().get_mut(id) = Tensor::scalar(bias);
            }
            let mut single = Adand::new(tiny(mode, seed + 100)).map_err(|e| e.to_string())?;
            copy_by_name(&both, &mut single, skip)?;
            let pair = trainer::random_pair(both.config(), 5, 4, &mut rng);
            let eps = trainer::draw_eps(both.config(), &mut rng);
            let a = both.evaluate(&pair, &eps, 1.0).map_err(|e| e.to_string())?;
            let s = single.evaluate(&pair, &eps, 1.0).map_err(|e| e.to_string())?;
            let mut diffs = vec![(a.gen_nll - s.gen_nll).abs()];
            if mode == Mode::Topic {
                diffs.push((a.topic_nll - s.topic_nll).abs());
                diffs.push((a.kl - s.kl).abs());
            }
            let d = diffs.into_iter().fold(0.0, f64::max);
            worst = worst.max(d);
            ensure(d <= 1e-6, format!("seed {seed}, gate bias {bias}: differs from {mode} by {d:e}"))?;
        }
    }
    Ok(format!("vanilla bit-identical (10 draws), topic weights constant, saturated gate max diff {worst:.1e}"))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_theta, mut worst_beta, mut min_kl) = (0.0f64, 0.0f64, f64::INFINITY);
    for seed in 0..1000 {
        let model = Adand::new(tiny(Mode::Both, seed)).map_err(|e| e.to_string())?;
        let pair = trainer::random_pair(model.config(), rng.random_range(1..5), rng.random_range(0..4), &mut rng);
        let eps: Vec<f64> = (0..3).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut g = Graph::new();
        let b = model.params().bind(&mut g, false);
        let out = model.forward(&mut g, &b, &pair, &eps, 1.0, None).map_err(|e| e.to_string())?;
        let theta = g.value(out.topic.expect("topic mode").theta);
        worst_theta = worst_theta.max((theta.data().iter().sum::<f64>() - 1.0).abs());
        ensure(theta.data().iter().all(|&x| x >= 0.0), "negative θ entry")?;
        let beta = model.topic_word_distributions().map_err(|e| e.to_string())?.expect("topic mode");
        for k in 0..beta.rows() {
            worst_beta = worst_beta.max((beta.row(k).iter().sum::<f64>() - 1.0).abs());
        }
        min_kl = min_kl.min(g.scalar(out.kl.expect("topic mode")));
    }
    ensure(worst_theta <= 1e-9, format!("θ sum off by {worst_theta:e}"))?;
    ensure(worst_beta <= 1e-9, format!("β row sum off by {worst_beta:e}"))?;
    ensure(min_kl >= 0.0, format!("negative KL {min_kl}"))?;
    for horizon in [1u64, 7, 100, 5000] {
        let w0 = kl_weight(0, horizon).map_err(|e| e.to_string())?;
        let wh = kl_weight(horizon, horizon).map_err(|e| e.to_string())?;
        ensure(w0 == 0.0 && wh == 1.0, format!("kl schedule at horizon {horizon}: {w0}, {wh}"))?;
    }
    Ok(format!("1000 draws: |Σθ−1| ≤ {worst_theta:.1e}, |Σβ−1| ≤ {worst_beta:.1e}, min KL {min_kl:.3e}; schedule 0 → 1"))
}

fn parameter_counts() -> Outcome {
    let c = adapter_param_count(AdapterDims { hidden: 300, input: 300, adapter: 64, context: 64, topics: 5 });
    let nr = 4 * 300;
    let nc = 300 + 300;
    ensure(c.context_factors == nr * 64 + nc * 64, "L formula")?;
    ensure(c.context_factors == 115_200, format!("L = {}", c.context_factors))?;
    ensure(c.naive == 46_080_000, format!("naive = {}", c.naive))?;
    ensure(c.naive == 400 * c.context_factors, "ratio")?;
    Ok(format!("L = {}, naive = {}, ratio {}x", c.context_factors, c.naive, c.naive / c.context_factors))
}

fn metric_goldens() -> Outcome {
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let corpus = vec![toks("the cat sat on the mat today"), toks("a dog ran in the park")];
    let bleu = metrics::bleu(&corpus, &corpus).map_err(|e| e.to_string())?;
    ensure((bleu - 100.0).abs() < 1e-9, format!("self BLEU {bleu}"))?;
    let d1 = metrics::distinct_n(&[toks("a a b")], 1).map_err(|e| e.to_string())?;
    ensure((d1 - 66.67).abs() <= 0.01, format!("distinct-1 {d1}"))?;

    let mut table = EmbeddingTable::new(2);
    table.insert("a", vec![1.0, 0.0]).unwrap();
    table.insert("b", vec![-3.0, 1.0]).unwrap();
    table.insert("c", vec![2.0, 1.0]).unwrap();
    let (cand, reference) = (toks("a b"), toks("c"));
    let s2 = 2f64.sqrt();
    let s5 = 5f64.sqrt();
    // mean (−1, 0.5) against (2, 1)
    let average = 100.0 * (-1.5) / (1.25f64.sqrt() * s5);
    let forward = (2.0 / s5 + (-1.0 / s2)) / 2.0;
    let backward = 2.0 / s5;
    let greedy = 100.0 * (forward + backward) / 2.0;
    // extrema (−3, 1) against (2, 1)
    let extrema = 100.0 * (-5.0) / (10f64.sqrt() * s5);
    let got = [
        metrics::emb_average(&cand, &reference, &table),
        metrics::emb_greedy(&cand, &reference, &table),
        metrics::emb_extrema(&cand, &reference, &table),
    ];
    for (name, (g, e)) in ["average", "greedy", "extrema"].iter().zip(got.iter().zip([average, greedy, extrema])) {
        ensure((g - e).abs() <= 1e-9, format!("{name}: {g} vs {e}"))?;
    }
    Ok(format!("BLEU(self) {bleu}, Distinct-1 {d1:.2}, Average {:.4}, Greedy {:.4}, Extrema {:.4}", got[0], got[1], got[2]))
}

fn topic_separation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    app::write_synthetic(&data, 600, 0).map_err(|e| e.to_string())?;
    let cfg = load_config("topics.cfg");
    ensure(cfg.model.num_topics == 3, "K must be 3")?;
    let out = dir.path().join("out");
    let start = Instant::now();
    app::train(&cfg, &data, &out, false).map_err(|e| e.to_string())?;
    let art = Artifacts::load(&out.join(app::CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let topics = app::topics(&art, 10).map_err(|e| e.to_string())?;
    let mut owners = Vec::new();
    let mut counts = Vec::new();
    for row in &topics {
        let mut per_domain = [0usize; 3];
        for (w, _) in row {
            if let Some(d) = synth::domain_of(w) {
                per_domain[d] += 1;
            }
        }
        let (best, &n) = per_domain.iter().enumerate().max_by_key(|&(i, n)| (*n, std::cmp::Reverse(i))).unwrap();
        owners.push(best);
        counts.push(n);
    }
    let detail = format!(
        "top-10 majorities {:?} from domains {:?}, {:.1} s",
        counts,
        owners.iter().map(|&d| synth::DOMAINS[d].0).collect::<Vec<_>>(),
        start.elapsed().as_secs_f64()
    );
    ensure(counts.iter().all(|&n| n >= 7), format!("{detail}; a topic is not dominated by one domain"))?;
    let mut distinct = owners.clone();
    distinct.sort();
    distinct.dedup();
    ensure(distinct.len() == 3, format!("{detail}; two topics share a domain"))?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    app::write_synthetic(&data, 120, 4).map_err(|e| e.to_string())?;
    let mut cfg = load_config("topics.cfg");
    cfg.train.max_epochs = 2;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        app::train(&cfg, &data, &out, false).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        files.push((read(app::CHECKPOINT_FILE)?, read(app::REPORT_FILE)?));
    }
    ensure(files[0].0 == files[1].0, "checkpoints differ")?;
    ensure(files[0].1 == files[1].1, "reports differ")?;
    Ok(format!("checkpoint {} bytes and report {} bytes identical across runs", files[0].0.len(), files[0].1.len()))
}

fn orthogonality_report(store: &Option<Overfit>) -> Outcome {
    let Some(o) = store else { return Err("overfit run produced no model".into()) };
    let entries = o.model.orthogonality();
    ensure(!entries.is_empty(), "no adapters reported")?;
    let mut lines = String::new();
    for e in &entries {
        lines.push_str(&format!(
            "\n      {:<18} U offdiag {:.4}  V offdiag {:.4}  U diag dev {:.4}  V diag dev {:.4}",
            e.adapter, e.u_offdiag, e.v_offdiag, e.u_diag_dev, e.v_diag_dev
        ));
    }
    Ok(format!("{} adapters (reported, not asserted):{lines}", entries.len()))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name} [{secs:.1}s]: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name} [{secs:.1}s]: {detail}");
            false
        }
    }
}

fn main() {
    let mut overfit_model = None;
    let results = [
        run("1 gradient fidelity", gradient_fidelity),
        run("2 oracle equivalences", oracle_equivalences),
        run("3 overfit run", || overfit(&mut overfit_model)),
        run("4 ablation identity", ablation_identity),
        run("5 normalization", normalization),
        run("6 parameter counts", parameter_counts),
        run("7 metric goldens", metric_goldens),
        run("8 topic separation", topic_separation),
        run("9 determinism", determinism),
        run("10 orthogonality report", || orthogonality_report(&overfit_model)),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
