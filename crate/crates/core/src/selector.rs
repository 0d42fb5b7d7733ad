//! Percentile-window selection over the empirical perplexity distribution.
//!
//! Samples are ranked by `(perplexity, sample_id)` ascending. The sample at
//! 1-based rank `k` of `N` gets the mid-rank percentile `q_k = (k - 0.5) / N`.
//! Low and medium selection keep `min <= q_k < max`; high selection keeps
//! `min < q_k <= max`, so the most perplexing sample is always eligible.
//! Under this rule the kept count is always `floor(r*N)` or `ceil(r*N)`,
//! even when every perplexity ties.
//!
//! The window test is evaluated exactly (no floating rounding of `N * bound`),
//! which turns the selection into a contiguous slice of the ranked records.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use extsort::ExternalSorter;
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, ShardWriter, DEFAULT_SAMPLES_PER_SHARD};
use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::reflm::ScoreRecord;
use crate::scorer::ScoreCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criteria {
    Low,
    Medium,
    High,
}

impl FromStr for Criteria {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Criteria::Low),
            "medium" => Ok(Criteria::Medium),
            "high" => Ok(Criteria::High),
            other => Err(Error::config(format!("criteria must be low, medium or high, got {other:?}"))),
        }
    }
}

impl fmt::Display for Criteria {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criteria::Low => "low",
            Criteria::Medium => "medium",
            Criteria::High => "high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub criteria: Criteria,
    pub rate: f64,
}

impl SelectionSpec {
    pub fn new(criteria: Criteria, rate: f64) -> Result<Self> {
        let s = Self { criteria, rate };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::config(format!("selection rate must lie in (0, 1), got {}", self.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileWindow {
    pub min_percentile: f64,
    pub max_percentile: f64,
}

pub fn window_for(spec: &SelectionSpec) -> PercentileWindow {
    let r = spec.rate;
    let (min_percentile, max_percentile) = match spec.criteria {
        Criteria::Low => (0.0, r),
        Criteria::Medium => (0.5 - r / 2.0, 0.5 + r / 2.0),
        Criteria::High => (1.0 - r, 1.0),
    };
    PercentileWindow { min_percentile, max_percentile }
}

/// `floor(m * x)` and `ceil(m * x)` computed exactly for `x` in `[0, 1]`.
fn floor_ceil(m: u128, x: f64) -> (u128, u128) {
    debug_assert!((0.0..=1.0).contains(&x) && m <= 1 << 65);
    // x = mant * 2^-shift exactly.
    let bits = x.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, shift) = if raw_exp == 0 { (frac, 1074i64) } else { (frac | (1u64 << 52), 1075 - raw_exp) };
    let a = m * u128::from(mant);
    if shift <= 0 {
        let v = a << (-shift) as u32;
        return (v, v);
    }
    if shift >= 120 {
        // a / 2^shift < 1/4
        return (0, u128::from(a > 0));
    }
    let s = shift as u32;
    let floor = a >> s;
    let exact = a & ((1u128 << s) - 1) == 0;
    (floor, if exact { floor } else { floor + 1 })
}

/// 0-based range of sorted positions selected from `n` ranked samples.
///
/// Rank `k` sits at `q = (k - 1/2) / n`. The window bounds are evaluated on the
/// exact value of the rate, so the rounded endpoints stored in [`PercentileWindow`]
/// never admit an extra boundary rank. With `j = 2k - 1` and `x = n * rate`:
/// low keeps `j < 2x`, medium keeps `n - x <= j < n + x`, high keeps `j > 2n - 2x`.
pub fn rank_range(spec: &SelectionSpec, n: usize) -> Range<usize> {
    let n = n as u128;
    let (lo, hi) = match spec.criteria {
        Criteria::Low => {
            let (_, c) = floor_ceil(2 * n, spec.rate);
            (1, c / 2)
        }
        Criteria::Medium => {
            let (f, c) = floor_ceil(n, spec.rate);
            ((n - f + 2) / 2, (n + c) / 2)
        }
        Criteria::High => {
            let (_, c) = floor_ceil(2 * n, spec.rate);
            ((2 * n - c + 3) / 2, n)
        }
    };
    let lo = lo.max(1) as usize;
    let hi = hi.min(n) as usize;
    if lo > hi {
        0..0
    } else {
        lo - 1..hi
    }
}

/// Ranking order: perplexity ascending, then sample id.
pub fn by_perplexity(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    a.perplexity.total_cmp(&b.perplexity).then_with(|| a.sample_id.cmp(&b.sample_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneManifest {
    pub criteria: Criteria,
    pub rate: f64,
    pub window: PercentileWindow,
    pub n_scored: u64,
    pub n_selected: u64,
    pub achieved_rate: f64,
    pub tokens_pre: u64,
    pub tokens_post: u64,
    pub scorer: String,
    /// Sorted.
    pub selected_ids: Vec<String>,
}

impl PruneManifest {
    pub fn selected_set(&self) -> HashSet<String> {
        self.selected_ids.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectPath {
    InMemory,
    /// External merge sort holding at most this many records per run.
    External { run_records: usize },
    /// In-memory when the cache has at most `max_in_memory` records.
    Auto { max_in_memory: usize, run_records: usize },
}

impl Default for SelectPath {
    fn default() -> Self {
        SelectPath::Auto { max_in_memory: 5_000_000, run_records: 1_000_000 }
    }
}

fn check_record(r: &ScoreRecord) -> Result<()> {
    if r.perplexity.is_nan() {
        return Err(Error::data(format!("sample {:?} has NaN perplexity", r.sample_id)));
    }
    Ok(())
}

struct Tally {
    range: Range<usize>,
    ids: Vec<String>,
    tokens_pre: u64,
    tokens_post: u64,
}

impl Tally {
    fn new(range: Range<usize>) -> Self {
        Self { range, ids: Vec::new(), tokens_pre: 0, tokens_post: 0 }
    }

    fn visit(&mut self, pos: usize, rec: ScoreRecord) {
        self.tokens_pre += rec.n_tokens;
        if self.range.contains(&pos) {
            self.tokens_post += rec.n_tokens;
            self.ids.push(rec.sample_id);
        }
    }

    fn finish(mut self, spec: &SelectionSpec, window: PercentileWindow, n: usize, scorer: &str) -> PruneManifest {
        self.ids.sort_unstable();
        PruneManifest {
            criteria: spec.criteria,
            rate: spec.rate,
            window,
            n_scored: n as u64,
            n_selected: self.ids.len() as u64,
            achieved_rate: self.ids.len() as f64 / n as f64,
            tokens_pre: self.tokens_pre,
            tokens_post: self.tokens_post,
            scorer: scorer.to_string(),
            selected_ids: self.ids,
        }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::data(format!("selection needs at least 2 scored samples, got {n}")));
    }
    Ok(())
}

/// Selection over records held in memory.
pub fn select_records(mut records: Vec<ScoreRecord>, spec: &SelectionSpec, scorer: &str) -> Result<PruneManifest> {
    spec.validate()?;
    check_n(records.len())?;
    for r in &records {
        check_record(r)?;
    }
    records.sort_unstable_by(by_perplexity);
    if let Some(w) = records.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
        return Err(Error::data(format!("duplicate sample_id {:?}", w[0].sample_id)));
    }
    let n = records.len();
    let window = window_for(spec);
    let mut tally = Tally::new(rank_range(spec, n));
    for (pos, rec) in records.into_iter().enumerate() {
        tally.visit(pos, rec);
    }
    Ok(tally.finish(spec, window, n, scorer))
}

fn select_external(cache: &ScoreCache, spec: &SelectionSpec, run_records: usize) -> Result<PruneManifest> {
    let n = cache.meta.n_records as usize;
    check_n(n)?;
    let window = window_for(spec);
    let mut tally = Tally::new(rank_range(spec, n));
    let mut first_err = None;
    let input = cache.records()?.map_while(|r| match r.and_then(|r| check_record(&r).map(|_| r)) {
        Ok(r) => Some(r),
        Err(e) => {
            first_err = Some(e);
            None
        }
    });
    let sorted = ExternalSorter::new()
        .with_segment_size(crate::scorer::segment_size(n, run_records))
        .with_sort_dir(cache.dir().to_path_buf())
        .sort_by(input, by_perplexity)
        .at(cache.dir())?;
    let mut seen = 0usize;
    let mut prev: Option<String> = None;
    for (pos, rec) in sorted.enumerate() {
        let rec = rec.at(cache.dir())?;
        if prev.as_deref() == Some(rec.sample_id.as_str()) {
            return Err(Error::data(format!("duplicate sample_id {:?}", rec.sample_id)));
        }
        prev = Some(rec.sample_id.clone());
        tally.visit(pos, rec);
        seen += 1;
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if seen != n {
        return Err(Error::data(format!(
            "score cache meta claims {n} records but {} holds {seen}",
            cache.scores_path().display()
        )));
    }
    Ok(tally.finish(spec, window, n, &cache.meta.scorer))
}

/// Selects the configured percentile band from a complete score cache.
pub fn select(cache: &ScoreCache, spec: &SelectionSpec, path: SelectPath) -> Result<PruneManifest> {
    spec.validate()?;
    cache.require_complete()?;
    let n = cache.meta.n_records as usize;
    let manifest = match path {
        SelectPath::InMemory => select_records(cache.load_all()?, spec, &cache.meta.scorer)?,
        SelectPath::External { run_records } => select_external(cache, spec, run_records)?,
        SelectPath::Auto { max_in_memory, run_records } => {
            if n <= max_in_memory {
                select_records(cache.load_all()?, spec, &cache.meta.scorer)?
            } else {
                select_external(cache, spec, run_records)?
            }
        }
    };
    info!(
        "selected {} of {} samples ({} {}), tokens {} -> {}",
        manifest.n_selected, manifest.n_scored, spec.criteria, spec.rate, manifest.tokens_pre, manifest.tokens_post
    );
    Ok(manifest)
}

/// Writes the selected samples as a new corpus in `out_dir`, preserving the
/// source corpus order.
pub fn materialize(
    manifest: &PruneManifest,
    corpus: &CorpusManifest,
    out_dir: &Path,
    name: &str,
) -> Result<CorpusManifest> {
    if manifest.selected_ids.is_empty() {
        return Err(Error::data("refusing to materialize an empty selection"));
    }
    let wanted = manifest.selected_set();
    let mut writer = ShardWriter::new(out_dir, DEFAULT_SAMPLES_PER_SHARD)?;
    let mut found = HashSet::with_capacity(wanted.len());
    for s in corpus.stream_filtered(&wanted) {
        let s = s?;
        writer.push(&s)?;
        found.insert(s.id);
    }
    if found.len() != wanted.len() {
        let missing = manifest.selected_ids.iter().find(|id| !found.contains(*id)).expect("some id is missing");
        return Err(Error::data(format!(
            "selected id {missing:?} is not in corpus {} ({} missing)",
            corpus.name,
            wanted.len() - found.len()
        )));
    }
    writer.finish(name, corpus.vocab_size, corpus.eos_id, &corpus.domains)
}

pub fn prune_path(workdir: &Path) -> PathBuf {
    workdir.join("prune.json")
}

pub fn save(manifest: &PruneManifest, path: &Path) -> Result<()> {
    fsio::write_json(path, manifest)
}

pub fn load(path: &Path) -> Result<PruneManifest> {
    fsio::read_json(path)
}
