use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use pplx_prune::config::{Overrides, PipelineConfig};
use pplx_prune::corpus::{self, IngestOptions, Tokenizer};
use pplx_prune::error::{Error, Result};
use pplx_prune::pipeline::{self, Workdir, WorkdirLock};
use pplx_prune::scorer::{ScoreCache, ScoreOutcome};
use pplx_prune::selector::Criteria;
use pplx_prune::{evalagg, synth};

/// Perplexity-based pruning of tokenized pretraining corpora.
///
/// Log verbosity follows RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "pplx-prune", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Corpus manifest or directory.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_criteria)]
    criteria: Option<Criteria>,
    #[arg(long, global = true)]
    rate: Option<f64>,
}

fn parse_criteria(s: &str) -> std::result::Result<Criteria, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Byte,
    Passthrough,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize raw JSONL records into a sharded corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Output directory (defaults to paths.corpus from --config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "byte")]
        tokenizer: TokenizerKind,
        /// Required with the passthrough tokenizer.
        #[arg(long)]
        vocab_size: Option<u32>,
        #[arg(long, default_value = "domain")]
        domain_field: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = corpus::DEFAULT_SAMPLES_PER_SHARD)]
        samples_per_shard: usize,
    },
    /// Partition the corpus into reference and training splits.
    Split,
    /// Train the reference n-gram model on the reference split.
    TrainRef,
    /// Score every training sample.
    Score,
    /// Select a percentile band of the scored samples.
    Prune,
    /// Write the selected samples as a new corpus.
    Materialize,
    /// Domain composition and perplexity distributions.
    Analyze,
    /// Token-budget and repetition plan.
    Plan {
        #[arg(long)]
        params: Option<u64>,
        #[arg(long)]
        budget_tokens: Option<f64>,
        #[arg(long)]
        available_tokens: Option<u64>,
        #[arg(long)]
        overtrain: Option<f64>,
    },
    /// Normalize and average downstream-task accuracies.
    EvalAgg {
        /// JSONL of {task, category, accuracy, random_baseline}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score cache whose token-weighted perplexity is reported too.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run split, train-ref, score, prune, materialize and analyze.
    Pipeline,
    /// Generate a synthetic raw corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            corpus: self.corpus.clone(),
            workdir: self.workdir.clone(),
            seed: self.seed,
            workers: self.workers,
            criteria: self.criteria,
            rate: self.rate,
        }
    }

    fn load_config(&self) -> Result<PipelineConfig> {
        let path = self.config.as_deref().ok_or_else(|| Error::config("this command needs --config"))?;
        PipelineConfig::load(path, &self.overrides())
    }
}

fn ingest(
    g: &Global,
    input: &Path,
    out: Option<PathBuf>,
    tokenizer: TokenizerKind,
    vocab_size: Option<u32>,
    domain_field: String,
    name: Option<String>,
    samples_per_shard: usize,
) -> Result<()> {
    let out = match out {
        Some(o) => o,
        None => g.load_config()?.paths.corpus,
    };
    let tokenizer = match (tokenizer, vocab_size) {
        (TokenizerKind::Byte, _) => Tokenizer::ByteLevel,
        (TokenizerKind::Passthrough, Some(v)) => Tokenizer::Passthrough { vocab_size: v },
        (TokenizerKind::Passthrough, None) => {
            return Err(Error::config("--vocab-size is required with --tokenizer passthrough"))
        }
    };
    if samples_per_shard == 0 {
        return Err(Error::config("--samples-per-shard must be >= 1"));
    }
    let name = name.unwrap_or_else(|| {
        input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
    });
    let mut opts = IngestOptions::new(name, tokenizer);
    opts.domain_field = domain_field;
    opts.samples_per_shard = samples_per_shard;
    let report = corpus::ingest(input, &out, &opts)?;
    println!(
        "ingested {} samples / {} tokens into {} ({} rejected)",
        report.manifest.total_samples,
        report.manifest.total_tokens,
        out.display(),
        report.rejected
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { input, out, tokenizer, vocab_size, domain_field, name, samples_per_shard } => {
            return ingest(g, &input, out, tokenizer, vocab_size, domain_field, name, samples_per_shard)
        }
        Command::EvalAgg { input, out, scores } => {
            let mut summary = evalagg::aggregate(&evalagg::load_records(&input)?)?;
            if let Some(dir) = scores {
                let cache = ScoreCache::open(&dir)?;
                cache.require_complete()?;
                summary.corpus_perplexity = Some(evalagg::corpus_perplexity(cache.records()?)?);
            }
            summary.save(&out)?;
            print!("{}", summary.to_csv());
            return Ok(());
        }
        Command::Synth { out, samples } => {
            let spec = synth::SynthSpec::new(samples, g.seed.unwrap_or(0));
            synth::generate(&out, &spec)?;
            println!("wrote {samples} records to {}", out.display());
            return Ok(());
        }
        _ => {}
    }

    let mut cfg = g.load_config()?;
    if let Command::Plan { params, budget_tokens, available_tokens, overtrain } = &cli.command {
        let p = &mut cfg.planner;
        if params.is_some() || budget_tokens.is_some() {
            p.param_count = *params;
            p.budget_tokens = *budget_tokens;
        }
        if available_tokens.is_some() {
            p.available_tokens = *available_tokens;
        }
        if let Some(f) = overtrain {
            p.overtrain_factor = *f;
        }
        cfg.validate()?;
    }
    let wd = Workdir::new(&cfg.paths.workdir);
    let _lock = WorkdirLock::acquire(&wd)?;
    cfg.save(&wd.config_echo())?;

    match cli.command {
        Command::Split => {
            let m = pipeline::run_split(&cfg, &wd)?;
            println!("reference {} / train {} samples", m.counts.ref_samples, m.counts.train_samples);
        }
        Command::TrainRef => {
            pipeline::run_train(&cfg, &wd)?;
            println!("wrote {}", wd.model().display());
        }
        Command::Score => match pipeline::run_score(&cfg, &wd)?.1 {
            ScoreOutcome::AlreadyComplete => println!("scores already complete; nothing to do"),
            ScoreOutcome::Scored { new_records } => println!("scored {new_records} samples"),
        },
        Command::Prune => {
            let m = pipeline::run_prune(&cfg, &wd)?;
            println!(
                "selected {} of {} samples (achieved rate {:.4}), tokens {} -> {}",
                m.n_selected, m.n_scored, m.achieved_rate, m.tokens_pre, m.tokens_post
            );
        }
        Command::Materialize => {
            let m = pipeline::run_materialize(&cfg, &wd)?;
            println!("wrote {} samples to {}", m.total_samples, wd.pruned().display());
        }
        Command::Analyze => {
            pipeline::run_analyze(&cfg, &wd)?;
            println!("wrote {}", wd.analysis().display());
        }
        Command::Plan { .. } => {
            let p = pipeline::run_plan(&cfg, &wd)?;
            print!("{}", p.table());
        }
        Command::Pipeline => {
            pipeline::run_pipeline(&cfg, &wd)?;
            let m = pipeline::load_prune(&wd)?;
            println!(
                "selected {} of {} samples (achieved rate {:.4}); artifacts in {}",
                m.n_selected,
                m.n_scored,
                m.achieved_rate,
                wd.root.display()
            );
        }
        Command::Ingest { .. } | Command::EvalAgg { .. } | Command::Synth { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("exiting with status {}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
