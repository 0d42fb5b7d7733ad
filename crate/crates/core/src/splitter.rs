//! Deterministic reference/train partition.
//!
//! A sample goes to the reference split iff
//! `unit_interval(hash64(seed, id)) < ref_fraction`, which makes the
//! assignment independent of corpus order and of how the work is sharded.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub ref_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ref_fraction > 0.0 && self.ref_fraction < 1.0) {
            return Err(Error::config(format!(
                "split.ref_fraction must lie in (0, 1), got {}",
                self.ref_fraction
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_reference(&self, id: &str) -> bool {
        hash::id_unit(self.seed, id) < self.ref_fraction
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub ref_samples: u64,
    pub ref_tokens: u64,
    pub train_samples: u64,
    pub train_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ref_fraction: f64,
    /// Sorted.
    pub ref_ids: Vec<String>,
    /// Sorted.
    pub train_ids: Vec<String>,
    pub counts: SplitCounts,
}

impl SplitManifest {
    pub fn ref_set(&self) -> HashSet<String> {
        self.ref_ids.iter().cloned().collect()
    }

    pub fn train_set(&self) -> HashSet<String> {
        self.train_ids.iter().cloned().collect()
    }
}

/// Assigns `(id, n_tokens)` pairs to the two splits.
pub fn split_ids<I>(items: I, spec: &SplitSpec) -> Result<SplitManifest>
where
    I: IntoIterator<Item = (String, u64)>,
{
    spec.validate()?;
    let mut counts = SplitCounts::default();
    let (mut ref_ids, mut train_ids) = (Vec::new(), Vec::new());
    for (id, n_tokens) in items {
        if spec.is_reference(&id) {
            counts.ref_samples += 1;
            counts.ref_tokens += n_tokens;
            ref_ids.push(id);
        } else {
            counts.train_samples += 1;
            counts.train_tokens += n_tokens;
            train_ids.push(id);
        }
    }
    if ref_ids.is_empty() && train_ids.is_empty() {
        return Err(Error::data("cannot split an empty corpus"));
    }
    ref_ids.sort_unstable();
    train_ids.sort_unstable();
    Ok(SplitManifest { seed: spec.seed, ref_fraction: spec.ref_fraction, ref_ids, train_ids, counts })
}

pub fn split(corpus: &CorpusManifest, spec: &SplitSpec) -> Result<SplitManifest> {
    spec.validate()?;
    let mut items = Vec::with_capacity(corpus.total_samples as usize);
    for s in corpus.stream() {
        let s = s?;
        items.push((s.id, s.tokens.len() as u64));
    }
    split_ids(items, spec)
}
