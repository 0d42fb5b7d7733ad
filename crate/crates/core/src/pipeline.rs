//! The pruning workflow as resumable stages over a work directory.
//!
//! ```text
//! <workdir>/
//!   config.resolved.toml   effective configuration of the last command
//!   split.json             reference/train partition
//!   model.json             reference n-gram model
//!   scores/                score cache
//!   prune.json             selection manifest
//!   pruned/                materialized pruned corpus
//!   analysis/              domains.csv, pplx_dist.json
//!   plan.json              token-budget plan
//! ```
//!
//! Each stage reads the artifacts of the previous ones and writes its own
//! atomically, so any sequence of stages produces the same bytes as
//! [`run_pipeline`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::analyzer::{self, DistributionReport, DomainReport};
use crate::config::PipelineConfig;
use crate::corpus::CorpusManifest;
use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::planner::{self, BudgetPlan, PlanInput};
use crate::reflm::{self, ExternalScorer, NGramModel, SampleScorer};
use crate::scorer::{self, ScoreCache, ScoreOptions, ScoreOutcome};
use crate::selector::{self, PruneManifest};
use crate::splitter::{self, SplitManifest};

pub const CONFIG_ECHO: &str = "config.resolved.toml";

/// Paths of every artifact in a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join(CONFIG_ECHO)
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }
    pub fn prune(&self) -> PathBuf {
        selector::prune_path(&self.root)
    }
    pub fn pruned(&self) -> PathBuf {
        self.root.join("pruned")
    }
    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// Exclusive claim on a work directory, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Workdir) -> Result<Self> {
        fs::create_dir_all(&workdir.root).at(&workdir.root)?;
        let path = workdir.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "{} exists: another command is using this work directory (delete the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(e).at(&path),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::data(format!("{} not found; run `{stage}` first", path.display())))
    }
}

pub fn load_corpus(cfg: &PipelineConfig) -> Result<CorpusManifest> {
    CorpusManifest::load(&cfg.paths.corpus)
}

pub fn load_split(wd: &Workdir) -> Result<SplitManifest> {
    require(&wd.split(), "split")?;
    fsio::read_json(&wd.split())
}

pub fn run_split(cfg: &PipelineConfig, wd: &Workdir) -> Result<SplitManifest> {
    let corpus = load_corpus(cfg)?;
    let m = splitter::split(&corpus, &cfg.split_spec())?;
    info!(
        "split {}: {} reference / {} train samples",
        corpus.name, m.counts.ref_samples, m.counts.train_samples
    );
    fsio::write_json(&wd.split(), &m)?;
    Ok(m)
}

pub fn run_train(cfg: &PipelineConfig, wd: &Workdir) -> Result<NGramModel> {
    let corpus = load_corpus(cfg)?;
    let split = load_split(wd)?;
    let refs = split.ref_set();
    let model = reflm::train(corpus.stream_filtered(&refs), cfg.ngram_config(), corpus.vocab_size, corpus.eos_id)?;
    info!("trained {} on {} reference samples", model.descriptor(), refs.len());
    model.save(&wd.model())?;
    Ok(model)
}

fn scorer_for(cfg: &PipelineConfig, wd: &Workdir, split: &SplitManifest) -> Result<Box<dyn SampleScorer>> {
    match &cfg.scoring.external_scores {
        Some(path) => {
            let known = split.train_set();
            Ok(Box::new(ExternalScorer::open(path, Some(&known), cfg.scoring.strict_external)?))
        }
        None => {
            require(&wd.model(), "train-ref")?;
            Ok(Box::new(NGramModel::load(&wd.model())?))
        }
    }
}

pub fn run_score(cfg: &PipelineConfig, wd: &Workdir) -> Result<(ScoreCache, ScoreOutcome)> {
    let corpus = load_corpus(cfg)?;
    let split = load_split(wd)?;
    let scorer = scorer_for(cfg, wd, &split)?;
    let opts = ScoreOptions { workers: cfg.scoring.workers, sort_run_records: cfg.scoring.sort_run_records };
    scorer::score_corpus(&corpus, &split, scorer.as_ref(), &wd.scores(), &opts)
}

pub fn run_prune(cfg: &PipelineConfig, wd: &Workdir) -> Result<PruneManifest> {
    require(&wd.scores().join(scorer::META_FILE), "score")?;
    let cache = ScoreCache::open(&wd.scores())?;
    let m = selector::select(&cache, &cfg.selection_spec(), cfg.select_path())?;
    selector::save(&m, &wd.prune())?;
    Ok(m)
}

pub fn load_prune(wd: &Workdir) -> Result<PruneManifest> {
    require(&wd.prune(), "prune")?;
    selector::load(&wd.prune())
}

pub fn pruned_name(corpus: &CorpusManifest, prune: &PruneManifest) -> String {
    format!("{}-{}-{}", corpus.name, prune.criteria, prune.rate)
}

pub fn run_materialize(cfg: &PipelineConfig, wd: &Workdir) -> Result<CorpusManifest> {
    let corpus = load_corpus(cfg)?;
    let prune = load_prune(wd)?;
    let out = wd.pruned();
    if out.exists() {
        fs::remove_dir_all(&out).at(&out)?;
    }
    let m = selector::materialize(&prune, &corpus, &out, &pruned_name(&corpus, &prune))?;
    info!("materialized {} samples / {} tokens into {}", m.total_samples, m.total_tokens, out.display());
    Ok(m)
}

/// Log-perplexity distributions of the scored pool and of the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionPair {
    pub before: DistributionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after: Option<DistributionReport>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub domains: DomainReport,
    pub distribution: DistributionPair,
}

pub fn run_analyze(cfg: &PipelineConfig, wd: &Workdir) -> Result<Analysis> {
    let corpus = load_corpus(cfg)?;
    let prune = if wd.prune().exists() { Some(selector::load(&wd.prune())?) } else { None };
    require(&wd.scores().join(scorer::META_FILE), "score")?;
    let cache = ScoreCache::open(&wd.scores())?;
    let opts = cfg.distribution_options();
    let domains = analyzer::domain_composition(&corpus, prune.as_ref())?;
    let before = analyzer::pplx_distribution(&cache, &opts, None)?;
    let after = prune.as_ref().map(|p| analyzer::pplx_distribution(&cache, &opts, Some(p))).transpose()?;
    let distribution = DistributionPair { before, after };
    let dir = wd.analysis();
    domains.save_csv(&dir.join(analyzer::DOMAINS_FILE))?;
    fsio::write_json(&dir.join(analyzer::DISTRIBUTION_FILE), &distribution)?;
    Ok(Analysis { domains, distribution })
}

pub fn run_plan(cfg: &PipelineConfig, wd: &Workdir) -> Result<BudgetPlan> {
    let available = match cfg.planner.available_tokens {
        Some(a) => a,
        None if wd.split().exists() => load_split(wd)?.counts.train_tokens,
        None => load_corpus(cfg)?.total_tokens,
    };
    let p = planner::plan(&PlanInput {
        budget: cfg.budget()?,
        available_tokens: available,
        selection_rate: cfg.selection.rate,
        overtrain_factor: cfg.planner.overtrain_factor,
        seed: cfg.seed,
    })?;
    p.save(&wd.plan())?;
    Ok(p)
}

/// split, train-ref (unless scores are external), score, prune, materialize, analyze.
pub fn run_pipeline(cfg: &PipelineConfig, wd: &Workdir) -> Result<Analysis> {
    run_split(cfg, wd)?;
    if cfg.scoring.external_scores.is_none() {
        run_train(cfg, wd)?;
    }
    run_score(cfg, wd)?;
    run_prune(cfg, wd)?;
    run_materialize(cfg, wd)?;
    run_analyze(cfg, wd)
}
