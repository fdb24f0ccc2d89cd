//! Command implementations shared by the `adand` binary and the test suites.
//!
//! A trained model lives in a directory:
//!
//! ```text
//! model.adnd          checkpoint
//! config.txt          effective configuration (vocabulary sizes filled in)
//! vocab.txt           word vocabulary
//! topical_vocab.txt   topical vocabulary
//! report.json         training report
//! ```
//!
//! Commands taking `--ckpt F` read the sibling files next to `F`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{Config, ModelConfig};
use crate::corpus::{encode_context, encode_pair, ingest, load_stopwords, tokenize, write_corpus, DialoguePair, EncodedPair, TopicalVocab, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, EmbeddingTable, EvalReport};
use crate::model::{Adand, OrthogonalityEntry};
use crate::synth;
use crate::topic::BowVector;
use crate::trainer::{self, GradCheckReport, TrainingReport};

pub const CHECKPOINT_FILE: &str = "model.adnd";
pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TOPICAL_FILE: &str = "topical_vocab.txt";
pub const REPORT_FILE: &str = "report.json";

/// Corpus splits and vocabularies built from a data directory.
pub struct Prepared {
    pub config: Config,
    pub vocab: Vocab,
    pub topical: TopicalVocab,
    pub train: Vec<EncodedPair>,
    pub valid: Vec<EncodedPair>,
    pub test: Option<Vec<DialoguePair>>,
}

/// Reads `train.txt`, `valid.txt`, optional `test.txt` and `stopwords.txt`
/// from `data_dir`, builds the vocabularies from the training split, and
/// sets the vocabulary sizes in the returned configuration.
pub fn prepare(data_dir: &Path, config: &Config, stem: bool) -> Result<Prepared> {
    let max_len = config.model.max_len;
    let train_raw = ingest(&data_dir.join("train.txt"), max_len)?;
    let valid_raw = ingest(&data_dir.join("valid.txt"), max_len)?;
    for (name, r) in [("train", &train_raw), ("valid", &valid_raw)] {
        if r.skipped > 0 {
            warn!("{name}: skipped {} malformed lines", r.skipped);
        }
    }
    let test_path = data_dir.join("test.txt");
    let test = if test_path.exists() { Some(ingest(&test_path, max_len)?.pairs) } else { None };
    let stopwords = load_stopwords(&data_dir.join("stopwords.txt"))?;

    let vocab = Vocab::build(&train_raw.pairs, config.model.vocab_size);
    let topical = TopicalVocab::build(&train_raw.pairs, config.model.topical_vocab_size, &stopwords, stem);
    let mut config = config.clone();
    config.model.vocab_size = vocab.len();
    if config.model.mode.uses_topics() {
        if topical.is_empty() {
            return Err(Error::Data("topical vocabulary is empty".into()));
        }
        config.model.topical_vocab_size = topical.len();
    }
    config.model.validate()?;
    let enc = |ps: &[DialoguePair]| ps.iter().map(|p| encode_pair(p, &vocab, &topical)).collect::<Vec<_>>();
    let train = enc(&train_raw.pairs);
    let valid = enc(&valid_raw.pairs);
    info!("{} training pairs, {} validation pairs, vocab {}, topical {}", train.len(), valid.len(), vocab.len(), topical.len());
    Ok(Prepared { config, vocab, topical, train, valid, test })
}

/// A model with its vocabularies.
pub struct Artifacts {
    pub config: Config,
    pub model: Adand,
    pub vocab: Vocab,
    pub topical: TopicalVocab,
}

fn sibling(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

impl Artifacts {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&self.model, &dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_text())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        self.topical.save(&dir.join(TOPICAL_FILE))?;
        Ok(())
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let config = Config::load(&sibling(ckpt, CONFIG_FILE))?;
        let vocab = Vocab::load(&sibling(ckpt, VOCAB_FILE))?;
        let topical = TopicalVocab::load(&sibling(ckpt, TOPICAL_FILE))?;
        if vocab.len() != config.model.vocab_size {
            return Err(Error::Config(format!("vocabulary has {} entries, config says {}", vocab.len(), config.model.vocab_size)));
        }
        let model = checkpoint::load(ckpt, &config.model)?;
        Ok(Self { config, model, vocab, topical })
    }

    /// Greedy response to one tokenized context; empty contexts give empty responses.
    pub fn respond(&self, context: &[String]) -> Result<Vec<String>> {
        if context.is_empty() {
            return Ok(Vec::new());
        }
        let e = encode_context(context, &self.vocab, &self.topical);
        let ids = self.model.greedy_decode(&e.context, &e.bow_context, self.config.model.max_len)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Trains on `data_dir` and writes every artifact into `out_dir`.
pub fn train(config: &Config, data_dir: &Path, out_dir: &Path, stem: bool) -> Result<TrainingReport> {
    let prep = prepare(data_dir, config, stem)?;
    let mut model = Adand::new(prep.config.model.clone())?;
    let mut report = trainer::train(&mut model, &prep.config.train, &prep.train, &prep.valid)?;
    let art = Artifacts { config: prep.config, model, vocab: prep.vocab, topical: prep.topical };
    if let Some(test) = &prep.test {
        let (cands, refs) = decode_pairs(&art, test)?;
        let r = EvalReport {
            bleu: metrics::bleu(&cands, &refs)?,
            distinct1: metrics::distinct_n(&cands, 1)?,
            distinct2: metrics::distinct_n(&cands, 2)?,
            distinct3: metrics::distinct_n(&cands, 3)?,
            ..EvalReport::default()
        };
        report.metrics = Some(serde_json::json!({
            "test_pairs": test.len(),
            "bleu": r.bleu,
            "distinct1": r.distinct1,
            "distinct2": r.distinct2,
            "distinct3": r.distinct3,
        }));
    }
    art.save(out_dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(out_dir.join(REPORT_FILE), json + "\n")?;
    Ok(report)
}

type Sentences = Vec<Vec<String>>;

fn decode_pairs(art: &Artifacts, pairs: &[DialoguePair]) -> Result<(Sentences, Sentences)> {
    let cands = pairs.iter().map(|p| art.respond(&p.context)).collect::<Result<Vec<_>>>()?;
    let refs = pairs.iter().map(|p| p.response.clone()).collect();
    Ok((cands, refs))
}

/// One response line per input line. A line containing a tab is treated as
/// `context<TAB>response` and only the context is used.
pub fn generate(art: &Artifacts, input: &str) -> Result<Vec<String>> {
    input
        .lines()
        .map(|line| {
            let ctx = line.split('\t').next().unwrap_or("");
            let mut toks = tokenize(ctx);
            toks.truncate(art.config.model.max_len);
            Ok(art.respond(&toks)?.join(" "))
        })
        .collect()
}

/// Scores responses for the pairs in `data` against their references, either
/// decoded by the model or read from `hypotheses` (one line per pair).
pub fn eval(art: &Artifacts, data: &Path, embeddings: &EmbeddingTable, hypotheses: Option<&Path>) -> Result<EvalReport> {
    let pairs = ingest(data, art.config.model.max_len)?.pairs;
    let (cands, refs) = match hypotheses {
        Some(h) => {
            let text = fs::read_to_string(h)?;
            let cands: Vec<Vec<String>> = text.lines().map(tokenize).collect();
            if cands.len() != pairs.len() {
                return Err(Error::Data(format!("{} hypotheses for {} pairs", cands.len(), pairs.len())));
            }
            (cands, pairs.iter().map(|p| p.response.clone()).collect())
        }
        None => decode_pairs(art, &pairs)?,
    };
    let report = metrics::evaluate(&cands, &refs, embeddings)?;
    if embeddings.oov_count() > 0 {
        info!("{} out-of-vocabulary embedding lookups", embeddings.oov_count());
    }
    Ok(report)
}

/// The `n` most probable topical words of every topic, most probable first.
pub fn topics(art: &Artifacts, n: usize) -> Result<Vec<Vec<(String, f64)>>> {
    let beta = art
        .model
        .topic_word_distributions()?
        .ok_or_else(|| Error::Config(format!("mode {} has no topics", art.config.model.mode)))?;
    let words = art.topical.words();
    Ok((0..beta.rows())
        .map(|k| {
            let row = beta.row(k);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.into_iter().take(n).map(|i| (words[i].clone(), row[i])).collect()
        })
        .collect())
}

/// Writes the topical word embedding rows in embedding-file format.
pub fn export_topic_embeddings(art: &Artifacts, out: &Path) -> Result<usize> {
    let emb = art
        .model
        .topical_word_embeddings()
        .ok_or_else(|| Error::Config(format!("mode {} has no topics", art.config.model.mode)))?;
    let entries: Vec<(String, Vec<f64>)> = art
        .topical
        .words()
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), emb.row(i).to_vec()))
        .collect();
    metrics::write_embeddings(out, &entries)?;
    Ok(entries.len())
}

pub fn gradcheck(config: &ModelConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    trainer::grad_check(config, tolerance, seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub cases: usize,
    pub millis: f64,
    pub cases_per_ms: f64,
}

/// Greedy-decodes `n` random contexts with a freshly initialized model.
pub fn bench(config: &ModelConfig, n: usize, seed: u64) -> Result<BenchReport> {
    let model = Adand::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts: Vec<(Vec<usize>, BowVector)> = (0..n)
        .map(|_| {
            let p = trainer::random_pair(config, rng.random_range(5..=15), 1, &mut rng);
            (p.context, p.bow_context)
        })
        .collect();
    let start = Instant::now();
    for (c, b) in &contexts {
        model.greedy_decode(c, b, config.max_len)?;
    }
    let millis = start.elapsed().as_secs_f64() * 1e3;
    Ok(BenchReport { cases: n, millis, cases_per_ms: n as f64 / millis.max(f64::MIN_POSITIVE) })
}

pub fn orthogonality(art: &Artifacts) -> Vec<OrthogonalityEntry> {
    art.model.orthogonality()
}

/// Writes a synthetic three-domain data directory.
pub fn write_synthetic(dir: &Path, pairs: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let all: Vec<DialoguePair> = synth::synthetic_corpus(pairs, seed).into_iter().map(|(_, p)| p).collect();
    let n_valid = (pairs / 10).max(1);
    let n_test = (pairs / 10).max(1);
    if all.len() < n_valid + n_test + 1 {
        return Err(Error::Config(format!("{pairs} pairs are too few to split")));
    }
    let (train, rest) = all.split_at(all.len() - n_valid - n_test);
    let (valid, test) = rest.split_at(n_valid);
    write_corpus(train, &dir.join("train.txt"))?;
    write_corpus(valid, &dir.join("valid.txt"))?;
    write_corpus(test, &dir.join("test.txt"))?;
    fs::write(dir.join("stopwords.txt"), synth::stopwords_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn small_config() -> Config {
        let mut c = Config {
            model: ModelConfig {
                hidden_size: 6,
                embed_size: 6,
                adapter_size: 3,
                context_size: 4,
                latent_size: 3,
                num_topics: 3,
                topic_embed_size: 4,
                mlp_hidden: 6,
                mode: Mode::Both,
                ..ModelConfig::default()
            },
            ..Config::default()
        };
        c.train.max_epochs = 1;
        c
    }

    #[test]
    fn train_writes_loadable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic(&data, 40, 1).unwrap();
        let out = dir.path().join("out");
        let report = train(&small_config(), &data, &out, false).unwrap();
        assert!(report.metrics.is_some());
        for f in [CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE, TOPICAL_FILE, REPORT_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        let art = Artifacts::load(&out.join(CHECKPOINT_FILE)).unwrap();
        let t = topics(&art, 4).unwrap();
        assert_eq!(t.len(), 3);
        for row in &t {
            assert_eq!(row.len(), 4);
            assert!(row.windows(2).all(|w| w[0].1 >= w[1].1));
        }
        let lines = generate(&art, "the movie was great\n\nlinux kernel\tresponse\n").unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "");
        let emb_path = dir.path().join("topic_emb.txt");
        assert_eq!(export_topic_embeddings(&art, &emb_path).unwrap(), art.topical.len());
        assert_eq!(metrics::load_embeddings(&emb_path).unwrap().dim(), 4);
        assert_eq!(orthogonality(&art).len(), 2 * 5);
    }

    #[test]
    fn eval_with_reference_hypotheses_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_synthetic(&data, 40, 2).unwrap();
        let out = dir.path().join("out");
        train(&small_config(), &data, &out, false).unwrap();
        let art = Artifacts::load(&out.join(CHECKPOINT_FILE)).unwrap();
        let test = ingest(&data.join("test.txt"), 50).unwrap().pairs;
        let hyp = dir.path().join("hyp.txt");
        fs::write(&hyp, test.iter().map(|p| p.response.join(" ") + "\n").collect::<String>()).unwrap();
        let mut table = EmbeddingTable::new(2);
        for (i, w) in art.vocab.decode(&(4..art.vocab.len()).collect::<Vec<_>>()).into_iter().enumerate() {
            table.insert(w, vec![1.0 + i as f64, (i as f64).sin()]).unwrap();
        }
        let r = eval(&art, &data.join("test.txt"), &table, Some(&hyp)).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert!((r.average - 100.0).abs() < 1e-9);
    }

    #[test]
    fn missing_stopwords_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), 30, 1).unwrap();
        fs::remove_file(dir.path().join("stopwords.txt")).unwrap();
        assert!(matches!(prepare(dir.path(), &small_config(), false), Err(Error::Config(_))));
    }
}
