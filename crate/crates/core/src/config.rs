//! Pipeline configuration: a TOML file plus command-line overrides.
//!
//! ```toml
//! seed = 17
//!
//! [paths]
//! corpus = "corpus"
//! workdir = "work"
//!
//! [split]
//! ref_fraction = 0.1
//!
//! [model]
//! order = 3
//! add_k = 0.01
//! weights = [0.1, 0.3, 0.6]
//!
//! [selection]
//! criteria = "high"
//! rate = 0.5
//! ```
//!
//! `[scoring]`, `[analysis]` and `[planner]` are optional. Relative paths
//! resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyzer::DistributionOptions;
use crate::error::{Error, Result};
use crate::fsio;
use crate::hash;
use crate::planner::Budget;
use crate::reflm::NGramConfig;
use crate::selector::{Criteria, SelectPath, SelectionSpec};
use crate::splitter::SplitSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub selection: SelectionConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub ref_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub order: usize,
    pub add_k: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub criteria: Criteria,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub workers: usize,
    /// Precomputed scores used instead of the built-in reference model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_scores: Option<PathBuf>,
    /// Unknown ids in the external file are fatal rather than skipped.
    pub strict_external: bool,
    pub sort_run_records: usize,
    /// Larger caches are selected with the external merge sort.
    pub max_in_memory: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            external_scores: None,
            strict_external: true,
            sort_run_records: 1_000_000,
            max_in_memory: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub subsample_rate: f64,
    pub grid_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { subsample_rate: 0.1, grid_points: 512, bandwidth: None, bin_width: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_tokens: Option<f64>,
    /// Defaults to the training split's token count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub available_tokens: Option<u64>,
    pub overtrain_factor: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { param_count: None, budget_tokens: None, available_tokens: None, overtrain_factor: 1.0 }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub criteria: Option<Criteria>,
    pub rate: Option<f64>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{}: {}", origin.display(), e.to_string().trim_end())))
    }

    /// Reads, resolves relative paths against the file's directory, applies
    /// `overrides` and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))
            .map_err(|e| Error::config(format!("cannot resolve {}: {e}", path.display())))?;
        let base = base.as_path();
        cfg.paths.corpus = fsio::resolve(base, &cfg.paths.corpus);
        cfg.paths.workdir = fsio::resolve(base, &cfg.paths.workdir);
        if let Some(p) = &cfg.scoring.external_scores {
            cfg.scoring.external_scores = Some(fsio::resolve(base, p));
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.corpus {
            self.paths.corpus = p.clone();
        }
        if let Some(p) = &o.workdir {
            self.paths.workdir = p.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.scoring.workers = w;
        }
        if let Some(c) = o.criteria {
            self.selection.criteria = c;
        }
        if let Some(r) = o.rate {
            self.selection.rate = r;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        self.ngram_config().validate()?;
        self.selection_spec()
            .validate()
            .map_err(|_| Error::config(format!("selection.rate must lie in (0, 1), got {}", self.selection.rate)))?;
        let s = &self.scoring;
        if s.workers == 0 {
            return Err(Error::config("scoring.workers must be >= 1"));
        }
        if s.sort_run_records == 0 {
            return Err(Error::config("scoring.sort_run_records must be >= 1"));
        }
        let a = &self.analysis;
        if !(a.subsample_rate > 0.0 && a.subsample_rate <= 1.0) {
            return Err(Error::config(format!("analysis.subsample_rate must lie in (0, 1], got {}", a.subsample_rate)));
        }
        if a.grid_points < 2 {
            return Err(Error::config("analysis.grid_points must be >= 2"));
        }
        for (key, v) in [("analysis.bandwidth", a.bandwidth), ("analysis.bin_width", a.bin_width)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("{key} must be positive, got {v}")));
                }
            }
        }
        let p = &self.planner;
        if p.param_count.is_some() && p.budget_tokens.is_some() {
            return Err(Error::config("set only one of planner.param_count and planner.budget_tokens"));
        }
        if !(p.overtrain_factor.is_finite() && p.overtrain_factor >= 1.0) {
            return Err(Error::config(format!("planner.overtrain_factor must be >= 1, got {}", p.overtrain_factor)));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: self.seed, ref_fraction: self.split.ref_fraction }
    }

    pub fn ngram_config(&self) -> NGramConfig {
        NGramConfig {
            order: self.model.order,
            add_k: self.model.add_k,
            interpolation_weights: self.model.weights.clone(),
        }
    }

    pub fn selection_spec(&self) -> SelectionSpec {
        SelectionSpec { criteria: self.selection.criteria, rate: self.selection.rate }
    }

    pub fn select_path(&self) -> SelectPath {
        SelectPath::Auto {
            max_in_memory: self.scoring.max_in_memory,
            run_records: self.scoring.sort_run_records,
        }
    }

    pub fn distribution_options(&self) -> DistributionOptions {
        // The split already keys on the raw seed; reusing it would subsample
        // exactly the (unscored) reference ids.
        let seed = hash::derive_seed(self.seed, "analysis", 0);
        let mut o = DistributionOptions::new(self.analysis.subsample_rate, seed);
        o.grid_points = self.analysis.grid_points;
        o.bandwidth = self.analysis.bandwidth;
        o.bin_width = self.analysis.bin_width;
        o
    }

    pub fn budget(&self) -> Result<Budget> {
        match (self.planner.param_count, self.planner.budget_tokens) {
            (Some(p), None) => Ok(Budget::Params(p)),
            (None, Some(t)) => Ok(Budget::Tokens(t)),
            _ => Err(Error::config("plan needs planner.param_count or planner.budget_tokens")),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("cannot render config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_text(path, &self.to_toml()?)
    }
}
