//! Model and training configuration, read from flat `key=value` files.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are the field names of
//! [`ModelConfig`] and [`TrainConfig`]; unknown keys are rejected.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Static recurrent weights; no adapters, no topic inferrer.
    Vanilla,
    /// Weights generated per step from the context code.
    Context,
    /// Weights generated once per conversation from the topic distribution.
    Topic,
    /// Gated mix of the context- and topic-generated weights.
    Both,
}

impl Mode {
    pub fn uses_context(self) -> bool {
        matches!(self, Mode::Context | Mode::Both)
    }

    pub fn uses_topics(self) -> bool {
        matches!(self, Mode::Topic | Mode::Both)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "context" => Ok(Mode::Context),
            "topic" => Ok(Mode::Topic),
            "both" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Context => "context",
            Mode::Topic => "topic",
            Mode::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    /// LSTM hidden size `N_h`.
    pub hidden_size: usize,
    /// Word embedding size `N_x`.
    pub embed_size: usize,
    /// Size of the per-step context code `ξ_t` (`N_ζ`).
    pub adapter_size: usize,
    /// Size of the context summary `ζ` from the context encoder; must be even.
    pub context_size: usize,
    /// Latent size `N_ν`.
    pub latent_size: usize,
    /// Number of topics `K`.
    pub num_topics: usize,
    /// Topical vocabulary size `C`.
    pub topical_vocab_size: usize,
    /// Topical word / topic embedding size `H`.
    pub topic_embed_size: usize,
    /// Hidden width of the prior, posterior and bag-of-words MLPs.
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub encoder_layers: usize,
    pub adapt_encoder: bool,
    pub adapt_decoder: bool,
    pub mode: Mode,
    pub attention: bool,
    pub dropout: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            embed_size: 64,
            adapter_size: 32,
            context_size: 32,
            latent_size: 16,
            num_topics: 5,
            topical_vocab_size: 500,
            topic_embed_size: 32,
            mlp_hidden: 64,
            vocab_size: 2000,
            max_len: 50,
            encoder_layers: 2,
            adapt_encoder: true,
            adapt_decoder: true,
            mode: Mode::Both,
            attention: true,
            dropout: 0.1,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("embed_size", self.embed_size),
            ("adapter_size", self.adapter_size),
            ("context_size", self.context_size),
            ("latent_size", self.latent_size),
            ("num_topics", self.num_topics),
            ("topical_vocab_size", self.topical_vocab_size),
            ("topic_embed_size", self.topic_embed_size),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
            ("encoder_layers", self.encoder_layers),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.context_size.is_multiple_of(2) {
            return Err(Error::Config("context_size must be even".into()));
        }
        if self.vocab_size <= 4 {
            return Err(Error::Config("vocab_size must exceed the 4 reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Number of optimizer steps over which the KL weight ramps to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealSteps {
    /// One epoch worth of batches.
    Epoch,
    Steps(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub kl_anneal_steps: AnnealSteps,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Validation period in epochs.
    pub validate_every: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 16,
            weight_decay: 3e-5,
            kl_anneal_steps: AnnealSteps::Epoch,
            patience: 10,
            validate_every: 0.5,
            max_epochs: 50,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.validate_every > 0.0 && self.validate_every.is_finite()) {
            return Err(Error::Config("validate_every must be positive".into()));
        }
        if self.kl_anneal_steps == AnnealSteps::Steps(0) {
            return Err(Error::Config("kl_anneal_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {value:?} for {key}")))
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {n}: expected key=value")));
            };
            cfg.set(key.trim(), value.trim(), n)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden_size" => m.hidden_size = parse(key, value, line)?,
            "embed_size" => m.embed_size = parse(key, value, line)?,
            "adapter_size" => m.adapter_size = parse(key, value, line)?,
            "context_size" => m.context_size = parse(key, value, line)?,
            "latent_size" => m.latent_size = parse(key, value, line)?,
            "num_topics" => m.num_topics = parse(key, value, line)?,
            "topical_vocab_size" => m.topical_vocab_size = parse(key, value, line)?,
            "topic_embed_size" => m.topic_embed_size = parse(key, value, line)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, value, line)?,
            "vocab_size" => m.vocab_size = parse(key, value, line)?,
            "max_len" => m.max_len = parse(key, value, line)?,
            "encoder_layers" => m.encoder_layers = parse(key, value, line)?,
            "adapt_encoder" => m.adapt_encoder = parse(key, value, line)?,
            "adapt_decoder" => m.adapt_decoder = parse(key, value, line)?,
            "mode" => m.mode = value.parse()?,
            "attention" => m.attention = parse(key, value, line)?,
            "dropout" => m.dropout = parse(key, value, line)?,
            "init_seed" => m.init_seed = parse(key, value, line)?,
            "lr" => t.lr = parse(key, value, line)?,
            "batch_size" => t.batch_size = parse(key, value, line)?,
            "weight_decay" => t.weight_decay = parse(key, value, line)?,
            "kl_anneal_steps" => {
                t.kl_anneal_steps = if value == "epoch" {
                    AnnealSteps::Epoch
                } else {
                    AnnealSteps::Steps(parse(key, value, line)?)
                }
            }
            "patience" => t.patience = parse(key, value, line)?,
            "validate_every" => t.validate_every = parse(key, value, line)?,
            "max_epochs" => t.max_epochs = parse(key, value, line)?,
            "seed" => t.seed = parse(key, value, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Serializes back to the `key=value` format; `parse_str` round-trips it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("hidden_size", m.hidden_size.to_string());
        kv("embed_size", m.embed_size.to_string());
        kv("adapter_size", m.adapter_size.to_string());
        kv("context_size", m.context_size.to_string());
        kv("latent_size", m.latent_size.to_string());
        kv("num_topics", m.num_topics.to_string());
        kv("topical_vocab_size", m.topical_vocab_size.to_string());
        kv("topic_embed_size", m.topic_embed_size.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_len", m.max_len.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("adapt_encoder", m.adapt_encoder.to_string());
        kv("adapt_decoder", m.adapt_decoder.to_string());
        kv("mode", m.mode.to_string());
        kv("attention", m.attention.to_string());
        kv("dropout", m.dropout.to_string());
        kv("init_seed", m.init_seed.to_string());
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv(
            "kl_anneal_steps",
            match t.kl_anneal_steps {
                AnnealSteps::Epoch => "epoch".to_string(),
                AnnealSteps::Steps(n) => n.to_string(),
            },
        );
        kv("patience", t.patience.to_string());
        kv("validate_every", t.validate_every.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("seed", t.seed.to_string());
        s
    }
}
