use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adand::app::{self, Artifacts};
use adand::config::Config;
use adand::metrics;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Train, decode and evaluate adaptive encoder-decoder dialogue models.
#[derive(Parser)]
#[command(name = "adand", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, vocabularies and report.json into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with train.txt, valid.txt, stopwords.txt and optionally test.txt.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the training and the initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stem topical words with the built-in suffix stripper.
        #[arg(long)]
        stem: bool,
    },
    /// Greedy-decode one response per input line.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print BLEU, embedding and distinct-n metrics on a corpus file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Score these responses (one per line) instead of decoding.
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Print the most probable topical words of each topic.
    Topics {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Write topical word embeddings in embedding-file format.
    ExportTopicEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a random pair.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure greedy decoding throughput with a freshly initialized model.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report how close each adapter's factor Gram matrices are to the identity.
    Orthogonality {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write a synthetic three-domain data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(ckpt: &Path) -> Result<Artifacts> {
    Artifacts::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, seed, stem } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.model.init_seed = s;
            }
            let report = app::train(&cfg, &data, &out, stem)?;
            println!(
                "steps {}  best validation loss {:.4} at step {}{}",
                report.steps,
                report.best_validation_loss,
                report.best_step,
                if report.stopped_early { "  (stopped early)" } else { "" }
            );
            println!("wrote {}", out.display());
        }
        Command::Generate { ckpt, input, out } => {
            let art = load(&ckpt)?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let lines = app::generate(&art, &text)?;
            let mut body = lines.join("\n");
            if !lines.is_empty() {
                body.push('\n');
            }
            fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval { ckpt, data, embeddings, hyp } => {
            let art = load(&ckpt)?;
            let table = metrics::load_embeddings(&embeddings)?;
            let report = app::eval(&art, &data, &table, hyp.as_deref())?;
            print!("{}", report.table());
        }
        Command::Topics { ckpt, top } => {
            let art = load(&ckpt)?;
            for (k, row) in app::topics(&art, top)?.iter().enumerate() {
                let words: Vec<String> = row.iter().map(|(w, p)| format!("{w}:{p:.4}")).collect();
                println!("topic {k}: {}", words.join(" "));
            }
        }
        Command::ExportTopicEmbeddings { ckpt, out } => {
            let art = load(&ckpt)?;
            let n = app::export_topic_embeddings(&art, &out)?;
            println!("wrote {n} vectors to {}", out.display());
        }
        Command::Gradcheck { config, tolerance, seed } => {
            let cfg = Config::load(&config)?;
            let report = app::gradcheck(&cfg.model, tolerance, seed)?;
            for (name, err) in &report.entries {
                println!("{name:<32} {err:.3e}");
            }
            println!("max relative error {:.3e} (tolerance {:.1e})", report.max_error(), report.tolerance);
            report.into_result()?;
        }
        Command::Bench { config, n, seed } => {
            let cfg = Config::load(&config)?;
            let r = app::bench(&cfg.model, n, seed)?;
            println!("{} cases in {:.1} ms: {:.4} cases/ms", r.cases, r.millis, r.cases_per_ms);
        }
        Command::Orthogonality { ckpt } => {
            let art = load(&ckpt)?;
            println!("{:<24} {:>10} {:>10} {:>10} {:>10}", "adapter", "U offdiag", "V offdiag", "U diag", "V diag");
            for e in app::orthogonality(&art) {
                println!(
                    "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    e.adapter, e.u_offdiag, e.v_offdiag, e.u_diag_dev, e.v_diag_dev
                );
            }
        }
        Command::Synth { out, pairs, seed } => {
            app::write_synthetic(&out, pairs, seed)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
