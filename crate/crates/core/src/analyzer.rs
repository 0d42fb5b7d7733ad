//! Corpus diagnostics: domain composition before/after pruning and the
//! distribution of log-perplexities.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::fsio;
use crate::hash;
use crate::scorer::ScoreCache;
use crate::selector::PruneManifest;

pub const DOMAINS_FILE: &str = "domains.csv";
pub const DISTRIBUTION_FILE: &str = "pplx_dist.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub pre_samples: u64,
    pub pre_tokens: u64,
    pub pre_sample_share: f64,
    pub pre_token_share: f64,
    pub post_samples: u64,
    pub post_tokens: u64,
    pub post_sample_share: f64,
    pub post_token_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub rows: Vec<DomainRow>,
}

fn share(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

/// Per-domain sample and token counts over the corpus, and over the pruned
/// subset when `prune` is given (otherwise the post columns repeat pre).
pub fn domain_composition(corpus: &CorpusManifest, prune: Option<&PruneManifest>) -> Result<DomainReport> {
    let mut counts: BTreeMap<&str, [u64; 4]> =
        corpus.domains.iter().map(|d| (d.as_str(), [0u64; 4])).collect();
    let selected: Option<HashSet<String>> = prune.map(PruneManifest::selected_set);
    let mut matched = 0usize;
    for s in corpus.stream() {
        let s = s?;
        let c = counts.get_mut(s.domain.as_str()).ok_or_else(|| {
            Error::data(format!("sample {} has domain {:?} missing from the corpus manifest", s.id, s.domain))
        })?;
        let n = s.n_tokens() as u64;
        c[0] += 1;
        c[1] += n;
        let kept = match &selected {
            Some(sel) => sel.contains(&s.id),
            None => true,
        };
        if kept {
            matched += 1;
            c[2] += 1;
            c[3] += n;
        }
    }
    if let Some(sel) = &selected {
        if matched != sel.len() {
            return Err(Error::data(format!(
                "{} selected ids are not in corpus {}",
                sel.len() - matched,
                corpus.name
            )));
        }
    }
    let tot = counts.values().fold([0u64; 4], |mut acc, c| {
        for i in 0..4 {
            acc[i] += c[i];
        }
        acc
    });
    let rows = counts
        .into_iter()
        .map(|(d, c)| DomainRow {
            domain: d.to_string(),
            pre_samples: c[0],
            pre_tokens: c[1],
            pre_sample_share: share(c[0], tot[0]),
            pre_token_share: share(c[1], tot[1]),
            post_samples: c[2],
            post_tokens: c[3],
            post_sample_share: share(c[2], tot[2]),
            post_token_share: share(c[3], tot[3]),
        })
        .collect();
    Ok(DomainReport { rows })
}

impl DomainReport {
    pub fn row(&self, domain: &str) -> Option<&DomainRow> {
        self.rows.iter().find(|r| r.domain == domain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "domain,pre_samples,pre_tokens,pre_sample_share,pre_token_share,post_samples,post_tokens,post_sample_share,post_token_share\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.domain,
                r.pre_samples,
                r.pre_tokens,
                r.pre_sample_share,
                r.pre_token_share,
                r.post_samples,
                r.post_tokens,
                r.post_sample_share,
                r.post_token_share
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fsio::write_text(path, &self.to_csv())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `densities.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub subsample_rate: f64,
    pub subsample_seed: u64,
    pub n_points: usize,
    /// log2-perplexity, i.e. nll in bits.
    pub variable: String,
    pub degenerate: bool,
    pub histogram: Histogram,
    pub kde: Option<Kde>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DistributionOptions {
    pub subsample_rate: f64,
    pub seed: u64,
    pub grid_points: usize,
    /// Overrides the Silverman bandwidth.
    pub bandwidth: Option<f64>,
    /// Overrides the Freedman-Diaconis bin width.
    pub bin_width: Option<f64>,
    pub min_kde_points: usize,
}

impl DistributionOptions {
    pub fn new(subsample_rate: f64, seed: u64) -> Self {
        Self { subsample_rate, seed, grid_points: 512, bandwidth: None, bin_width: None, min_kde_points: 30 }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Silverman's rule of thumb, `1.06 * sigma * m^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    1.06 * mean_std(xs).1 * (xs.len() as f64).powf(-0.2)
}

/// Freedman-Diaconis bin width, `2 * IQR * m^(-1/3)`, on sorted data.
pub fn freedman_diaconis_width(sorted: &[f64]) -> f64 {
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    2.0 * iqr * (sorted.len() as f64).powf(-1.0 / 3.0)
}

const MAX_BINS: usize = 10_000;

pub fn histogram(sorted: &[f64], width: Option<f64>) -> Histogram {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let m = sorted.len() as f64;
    if hi <= lo {
        return Histogram { edges: vec![lo - 0.5, lo + 0.5], counts: vec![sorted.len() as u64], densities: vec![1.0] };
    }
    let mut w = width.unwrap_or_else(|| freedman_diaconis_width(sorted));
    if !(w > 0.0) {
        // Sturges fallback when the IQR collapses.
        w = (hi - lo) / (m.log2().ceil() + 1.0);
    }
    let bins = (((hi - lo) / w).ceil() as usize).clamp(1, MAX_BINS);
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &x in sorted {
        let i = (((x - lo) / w) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * w }).collect::<Vec<_>>();
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (m * (e[1] - e[0])))
        .collect();
    Histogram { edges, counts, densities }
}

/// Gaussian KDE evaluated on an evenly spaced grid spanning the data +- 4 bandwidths.
pub fn gaussian_kde(xs: &[f64], bandwidth: f64, grid_points: usize) -> Kde {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let g = grid_points.max(2);
    let step = (hi - lo) / (g - 1) as f64;
    let grid: Vec<f64> = (0..g).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (xs.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&y| {
            xs.iter()
                .map(|&x| {
                    let z = (y - x) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Kde { bandwidth, grid, density }
}

/// Trapezoid-rule integral of a gridded density.
pub fn trapezoid(grid: &[f64], y: &[f64]) -> f64 {
    grid.windows(2).zip(y.windows(2)).map(|(x, v)| (x[1] - x[0]) * (v[0] + v[1]) / 2.0).sum()
}

/// Builds the histogram and KDE of `log2(perplexity)` over a deterministic
/// subsample of the cache (restricted to the pruned ids when given).
pub fn pplx_distribution(
    cache: &ScoreCache,
    opts: &DistributionOptions,
    prune: Option<&PruneManifest>,
) -> Result<DistributionReport> {
    cache.require_complete()?;
    if !(opts.subsample_rate > 0.0 && opts.subsample_rate <= 1.0) {
        return Err(Error::config(format!("analysis.subsample_rate must lie in (0, 1], got {}", opts.subsample_rate)));
    }
    let selected = prune.map(PruneManifest::selected_set);
    let mut xs = Vec::new();
    for r in cache.records()? {
        let r = r?;
        if let Some(sel) = &selected {
            if !sel.contains(&r.sample_id) {
                continue;
            }
        }
        if hash::id_unit(opts.seed, &r.sample_id) < opts.subsample_rate {
            xs.push(r.nll_bits);
        }
    }
    distribution_from_values(xs, opts)
}

pub fn distribution_from_values(mut xs: Vec<f64>, opts: &DistributionOptions) -> Result<DistributionReport> {
    if xs.is_empty() {
        return Err(Error::data("no perplexities left after subsampling"));
    }
    xs.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let degenerate = xs[0] == xs[xs.len() - 1];
    let hist = histogram(&xs, opts.bin_width);
    let kde = if degenerate {
        warnings.push("all log-perplexities are equal; KDE suppressed".to_string());
        None
    } else if xs.len() < opts.min_kde_points {
        warnings.push(format!("only {} points (< {}); KDE suppressed", xs.len(), opts.min_kde_points));
        None
    } else {
        let bw = opts.bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs));
        Some(gaussian_kde(&xs, bw, opts.grid_points))
    };
    for w in &warnings {
        warn!("{w}");
    }
    Ok(DistributionReport {
        subsample_rate: opts.subsample_rate,
        subsample_seed: opts.seed,
        n_points: xs.len(),
        variable: "log2_perplexity".into(),
        degenerate,
        histogram: hist,
        kde,
        warnings,
    })
}

impl DistributionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn histogram_mass(&self) -> f64 {
        self.histogram.densities.iter().zip(self.histogram.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum()
    }

    pub fn kde_mass(&self) -> Option<f64> {
        self.kde.as_ref().map(|k| trapezoid(&k.grid, &k.density))
    }

    pub fn kde_mode(&self) -> Option<f64> {
        let k = self.kde.as_ref()?;
        let i = k.density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?.0;
        Some(k.grid[i])
    }
}
