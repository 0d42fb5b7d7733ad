//! Reference language model: an interpolated add-k n-gram model.
//!
//! For a context `h` the model mixes one estimate per order,
//!
//! ```text
//! P(t | h) = sum_c w_c * (count(h_c, t) + k) / (count(h_c) + k * V)
//! ```
//!
//! where `h_c` is the last `c` tokens of the BOS-padded history
//! (`c = 0 .. order-1`) and `V` is the vocabulary size. Unseen contexts
//! contribute exactly `1/V`. All log-probabilities are base 2, so
//! perplexity is `2^nll_bits`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::hash::Fnv64;

pub const MODEL_FORMAT: &str = "pplx-prune/ngram";
pub const MODEL_VERSION: u32 = 1;

/// Per-sample reference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    /// Mean negative log2-likelihood per token.
    pub nll_bits: f64,
    pub perplexity: f64,
    pub n_tokens: u64,
}

impl ScoreRecord {
    pub fn from_nll(sample_id: String, nll_bits: f64, n_tokens: u64) -> Self {
        Self { sample_id, nll_bits, perplexity: nll_bits.exp2(), n_tokens }
    }
}

/// Anything that can turn a sample into a [`ScoreRecord`].
pub trait SampleScorer: Sync {
    /// Identifies the scorer in score caches (e.g. a model hash).
    fn descriptor(&self) -> &str;
    fn score(&self, sample: &Sample) -> Result<ScoreRecord>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    pub add_k: f64,
    /// One weight per context length `0..order`, summing to 1.
    pub interpolation_weights: Vec<f64>,
}

impl NGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::config(format!("model.order must be >= 1, got {}", self.order)));
        }
        if !(self.add_k.is_finite() && self.add_k > 0.0) {
            return Err(Error::config(format!("model.add_k must be > 0, got {}", self.add_k)));
        }
        if self.interpolation_weights.len() != self.order {
            return Err(Error::config(format!(
                "model.weights has {} entries for order {}",
                self.interpolation_weights.len(),
                self.order
            )));
        }
        if self.interpolation_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("model.weights must be finite and non-negative"));
        }
        let sum: f64 = self.interpolation_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("model.weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextTable {
    total: u64,
    /// Sorted by token id.
    next: Vec<(u32, u64)>,
}

impl ContextTable {
    #[inline]
    fn count(&self, token: u32) -> u64 {
        match self.next.binary_search_by_key(&token, |&(t, _)| t) {
            Ok(i) => self.next[i].1,
            Err(_) => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    config: NGramConfig,
    vocab_size: u32,
    eos_id: Option<u32>,
    /// `tables[c]` maps a packed length-`c` context to its next-token counts.
    tables: Vec<FxHashMap<u64, ContextTable>>,
    descriptor: String,
}

/// Accumulates n-gram counts; counts are additive, so builders over
/// disjoint shards can be merged.
#[derive(Debug, Clone)]
pub struct NGramBuilder {
    config: NGramConfig,
    vocab_size: u32,
    eos_id: Option<u32>,
    counts: Vec<FxHashMap<u64, FxHashMap<u32, u64>>>,
    tokens_seen: u64,
}

fn check_radix(vocab_size: u32, order: usize) -> Result<()> {
    let radix = u64::from(vocab_size) + 1;
    let fits = u32::try_from(order - 1).ok().and_then(|e| radix.checked_pow(e)).is_some();
    if !fits {
        return Err(Error::config(format!(
            "order {order} is too large for vocab_size {vocab_size} (context keys exceed 64 bits)"
        )));
    }
    Ok(())
}

impl NGramBuilder {
    pub fn new(config: NGramConfig, vocab_size: u32, eos_id: Option<u32>) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || vocab_size == u32::MAX {
            return Err(Error::config(format!("invalid vocab_size {vocab_size}")));
        }
        check_radix(vocab_size, config.order)?;
        let counts = vec![FxHashMap::default(); config.order];
        Ok(Self { config, vocab_size, eos_id, counts, tokens_seen: 0 })
    }

    pub fn add(&mut self, tokens: &[u32]) -> Result<()> {
        let order = self.config.order;
        let bos = self.vocab_size;
        let radix = u64::from(bos) + 1;
        let mut history = vec![bos; order - 1];
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::data(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
            for (c, table) in self.counts.iter_mut().enumerate() {
                let key = context_key_rev(&history, c, radix);
                *table.entry(key).or_default().entry(t).or_insert(0) += 1;
            }
            if order > 1 {
                history.rotate_left(1);
                history[order - 2] = t;
            }
        }
        self.tokens_seen += tokens.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: NGramBuilder) -> Result<()> {
        if other.config != self.config || other.vocab_size != self.vocab_size {
            return Err(Error::Internal("merging builders with different settings".into()));
        }
        for (mine, theirs) in self.counts.iter_mut().zip(other.counts) {
            for (ctx, next) in theirs {
                let slot = mine.entry(ctx).or_default();
                for (t, n) in next {
                    *slot.entry(t).or_insert(0) += n;
                }
            }
        }
        self.tokens_seen += other.tokens_seen;
        Ok(())
    }

    pub fn build(self) -> Result<NGramModel> {
        if self.tokens_seen == 0 {
            return Err(Error::data("cannot train the reference model on zero tokens"));
        }
        let tables = self
            .counts
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(ctx, next)| {
                        let mut next: Vec<(u32, u64)> = next.into_iter().collect();
                        next.sort_unstable();
                        let total = next.iter().map(|&(_, n)| n).sum();
                        (ctx, ContextTable { total, next })
                    })
                    .collect()
            })
            .collect();
        Ok(NGramModel::assemble(self.config, self.vocab_size, self.eos_id, tables))
    }
}

/// Packs the last `c` entries of `history` (oldest first) in base `radix`.
#[inline]
fn context_key_rev(history: &[u32], c: usize, radix: u64) -> u64 {
    history[history.len() - c..].iter().fold(0u64, |k, &t| k * radix + u64::from(t))
}

/// Trains on a stream of samples (typically the reference split).
pub fn train<I>(samples: I, config: NGramConfig, vocab_size: u32, eos_id: Option<u32>) -> Result<NGramModel>
where
    I: IntoIterator<Item = Result<Sample>>,
{
    let mut builder = NGramBuilder::new(config, vocab_size, eos_id)?;
    for s in samples {
        builder.add(&s?.tokens)?;
    }
    builder.build()
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<u32>,
    total: u64,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    vocab_size: u32,
    bos_id: u32,
    eos_id: Option<u32>,
    add_k: f64,
    interpolation_weights: Vec<f64>,
    tables: Vec<Vec<ContextEntry>>,
}

impl NGramModel {
    fn assemble(
        config: NGramConfig,
        vocab_size: u32,
        eos_id: Option<u32>,
        tables: Vec<FxHashMap<u64, ContextTable>>,
    ) -> Self {
        let mut model = Self { config, vocab_size, eos_id, tables, descriptor: String::new() };
        let mut h = Fnv64::default();
        h.update(&model.to_bytes());
        model.descriptor = format!("ngram:{}", h.hex());
        model
    }

    /// A model with no counts; every token has probability `1/vocab_size`.
    pub fn untrained(config: NGramConfig, vocab_size: u32) -> Result<Self> {
        let b = NGramBuilder::new(config, vocab_size, None)?;
        let tables = vec![FxHashMap::default(); b.config.order];
        Ok(Self::assemble(b.config, vocab_size, None, tables))
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn bos_id(&self) -> u32 {
        self.vocab_size
    }

    pub fn eos_id(&self) -> Option<u32> {
        self.eos_id
    }

    pub fn config(&self) -> &NGramConfig {
        &self.config
    }

    fn radix(&self) -> u64 {
        u64::from(self.vocab_size) + 1
    }

    /// Interpolated probability of `token` after a BOS-padded history of
    /// exactly `order - 1` tokens.
    #[inline]
    fn prob_padded(&self, history: &[u32], token: u32) -> f64 {
        let uniform = 1.0 / f64::from(self.vocab_size);
        let k = self.config.add_k;
        let kv = k * f64::from(self.vocab_size);
        let radix = self.radix();
        let mut p = uniform;
        for (c, &w) in self.config.interpolation_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if let Some(tab) = self.tables[c].get(&context_key_rev(history, c, radix)) {
                let est = (tab.count(token) as f64 + k) / (tab.total as f64 + kv);
                p += w * (est - uniform);
            }
        }
        p
    }

    fn padded_history(&self, context: &[u32]) -> Result<Vec<u32>> {
        let need = self.config.order - 1;
        let bos = self.bos_id();
        if let Some(&bad) = context.iter().find(|&&t| t > bos) {
            return Err(Error::data(format!("context token {bad} outside vocabulary")));
        }
        let tail = &context[context.len().saturating_sub(need)..];
        let mut h = vec![bos; need - tail.len()];
        h.extend_from_slice(tail);
        Ok(h)
    }

    pub fn prob(&self, context: &[u32], token: u32) -> Result<f64> {
        if token >= self.vocab_size {
            return Err(Error::data(format!(
                "token id {token} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(self.prob_padded(&self.padded_history(context)?, token))
    }

    /// log2 P(token | context), using only the last `order - 1` context tokens.
    pub fn token_logprob(&self, context: &[u32], token: u32) -> Result<f64> {
        self.prob(context, token).map(f64::log2)
    }

    fn sum_neg_log(&self, tokens: &[u32], log: fn(f64) -> f64) -> Result<f64> {
        let order = self.config.order;
        let mut history = vec![self.bos_id(); order - 1];
        let mut total = 0.0;
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::data(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
            total -= log(self.prob_padded(&history, t));
            if order > 1 {
                history.rotate_left(1);
                history[order - 2] = t;
            }
        }
        Ok(total)
    }

    /// Mean negative log2-likelihood over every token of `tokens`.
    pub fn mean_nll_bits(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::data("cannot score an empty sample"));
        }
        Ok(self.sum_neg_log(tokens, f64::log2)? / tokens.len() as f64)
    }

    /// Same as [`Self::mean_nll_bits`] in nats.
    pub fn mean_nll_nats(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::data("cannot score an empty sample"));
        }
        Ok(self.sum_neg_log(tokens, f64::ln)? / tokens.len() as f64)
    }

    fn to_file(&self) -> ModelFile {
        let radix = self.radix();
        let tables = self
            .tables
            .iter()
            .enumerate()
            .map(|(c, tab)| {
                let mut keys: Vec<&u64> = tab.keys().collect();
                keys.sort_unstable();
                keys.into_iter()
                    .map(|&key| {
                        let mut context = vec![0u32; c];
                        let mut k = key;
                        for slot in context.iter_mut().rev() {
                            *slot = (k % radix) as u32;
                            k /= radix;
                        }
                        let t = &tab[&key];
                        ContextEntry { context, total: t.total, next: t.next.clone() }
                    })
                    .collect()
            })
            .collect();
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            order: self.config.order,
            vocab_size: self.vocab_size,
            bos_id: self.bos_id(),
            eos_id: self.eos_id,
            add_k: self.config.add_k,
            interpolation_weights: self.config.interpolation_weights.clone(),
            tables,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.to_file()).expect("model serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fsio::write_atomic(path, |w| w.write_all(&bytes).at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).at(path)?;
        let file: ModelFile = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::from_file(file).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        if file.bos_id != file.vocab_size {
            return Err(Error::data("bos_id must equal vocab_size"));
        }
        let config = NGramConfig {
            order: file.order,
            add_k: file.add_k,
            interpolation_weights: file.interpolation_weights,
        };
        config.validate()?;
        check_radix(file.vocab_size, file.order)?;
        if file.tables.len() != file.order {
            return Err(Error::data("table count does not match order"));
        }
        let radix = u64::from(file.vocab_size) + 1;
        let mut tables = Vec::with_capacity(file.order);
        for (c, entries) in file.tables.into_iter().enumerate() {
            let mut tab = FxHashMap::default();
            for e in entries {
                if e.context.len() != c || e.context.iter().any(|&t| t > file.vocab_size) {
                    return Err(Error::data(format!("malformed context {:?} in table {c}", e.context)));
                }
                if e.next.iter().map(|&(_, n)| n).sum::<u64>() != e.total
                    || e.next.windows(2).any(|w| w[0].0 >= w[1].0)
                {
                    return Err(Error::data(format!("inconsistent counts for context {:?}", e.context)));
                }
                let key = e.context.iter().fold(0u64, |k, &t| k * radix + u64::from(t));
                tab.insert(key, ContextTable { total: e.total, next: e.next });
            }
            tables.push(tab);
        }
        Ok(Self::assemble(config, file.vocab_size, file.eos_id, tables))
    }
}

impl SampleScorer for NGramModel {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn score(&self, sample: &Sample) -> Result<ScoreRecord> {
        let nll = self.mean_nll_bits(&sample.tokens)?;
        Ok(ScoreRecord::from_nll(sample.id.clone(), nll, sample.n_tokens() as u64))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalLine {
    sample_id: String,
    nll_bits: Option<f64>,
    perplexity: Option<f64>,
    n_tokens: u64,
}

/// Reads an externally produced score file (`{sample_id, nll_bits?,
/// perplexity?, n_tokens}` per line), deriving whichever of nll/perplexity
/// is missing.
///
/// With `known_ids`, records for unknown samples are fatal under `strict`
/// and skipped otherwise.
pub fn load_external_scores(
    path: &Path,
    known_ids: Option<&HashSet<String>>,
    strict: bool,
) -> Result<Vec<ScoreRecord>> {
    let mut seen: FxHashMap<String, usize> = FxHashMap::default();
    let mut out = Vec::new();
    for item in fsio::lines(path)? {
        let (line_no, text) = item?;
        let rec: ExternalLine = serde_json::from_str(&text)
            .map_err(|e| Error::record(path, line_no, format!("bad score record: {e}")))?;
        let nll = match (rec.nll_bits, rec.perplexity) {
            (Some(nll), Some(ppl)) => {
                if (nll.exp2() - ppl).abs() > 1e-6 * ppl.abs().max(1.0) {
                    return Err(Error::record(
                        path,
                        line_no,
                        format!("nll_bits {nll} and perplexity {ppl} disagree"),
                    ));
                }
                nll
            }
            (Some(nll), None) => nll,
            (None, Some(ppl)) => ppl.log2(),
            (None, None) => {
                return Err(Error::record(path, line_no, "record has neither nll_bits nor perplexity"))
            }
        };
        if !(nll.is_finite() && nll >= 0.0) {
            return Err(Error::record(path, line_no, format!("invalid nll_bits {nll}")));
        }
        if rec.n_tokens == 0 {
            return Err(Error::record(path, line_no, "n_tokens must be >= 1"));
        }
        if let Some(&first) = seen.get(&rec.sample_id) {
            return Err(Error::record(
                path,
                line_no,
                format!("duplicate sample_id {:?} (first on line {first})", rec.sample_id),
            ));
        }
        seen.insert(rec.sample_id.clone(), line_no);
        if let Some(ids) = known_ids {
            if !ids.contains(&rec.sample_id) {
                if strict {
                    return Err(Error::record(
                        path,
                        line_no,
                        format!("unknown sample_id {:?}", rec.sample_id),
                    ));
                }
                log::warn!("{}:{line_no}: skipping unknown sample_id {:?}", path.display(), rec.sample_id);
                continue;
            }
        }
        let perplexity = rec.perplexity.unwrap_or_else(|| nll.exp2());
        out.push(ScoreRecord { sample_id: rec.sample_id, nll_bits: nll, perplexity, n_tokens: rec.n_tokens });
    }
    Ok(out)
}

/// Precomputed scores looked up by sample id.
pub struct ExternalScorer {
    records: FxHashMap<String, ScoreRecord>,
    descriptor: String,
}

impl ExternalScorer {
    pub fn open(path: &Path, known_ids: Option<&HashSet<String>>, strict: bool) -> Result<Self> {
        let records = load_external_scores(path, known_ids, strict)?;
        let mut h = Fnv64::default();
        h.update(&std::fs::read(path).at(path)?);
        Ok(Self::from_records(records, format!("external:{}", h.hex())))
    }

    pub fn from_records(records: Vec<ScoreRecord>, descriptor: String) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.sample_id.clone(), r)).collect(),
            descriptor,
        }
    }
}

impl SampleScorer for ExternalScorer {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn score(&self, sample: &Sample) -> Result<ScoreRecord> {
        self.records
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| Error::data(format!("external scores have no record for {:?}", sample.id)))
    }
}
