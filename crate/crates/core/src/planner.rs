//! Token-budget arithmetic for compute-optimal, over-trained and
//! data-constrained runs, and per-epoch sample orders for repeated data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::hash;
use crate::selector::PruneManifest;

/// Compute-optimal training tokens per model parameter.
pub const TOKENS_PER_PARAM: f64 = 20.0;

/// Post-pruning repetitions beyond which extra repeats were observed to
/// stop helping. Reported, never enforced.
pub const DIMINISHING_REPEATS: f64 = 4.0;

const MAX_EPOCHS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    /// Derive `T = 20 * params * overtrain_factor`.
    Params(u64),
    /// Use an explicit token budget.
    Tokens(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanInput {
    pub budget: Budget,
    pub available_tokens: u64,
    pub selection_rate: f64,
    pub overtrain_factor: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: u64,
    pub shuffle_seed: u64,
    /// Tokens drawn from the pruned pool in this epoch; the last epoch may be partial.
    pub tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub param_count: Option<u64>,
    pub budget_tokens: f64,
    pub available_tokens: u64,
    pub selection_rate: f64,
    pub overtrain_factor: f64,
    pub repeats_raw: f64,
    pub repeats_effective: f64,
    pub exceeds_diminishing_returns: bool,
    pub epoch_schedule: Vec<EpochEntry>,
}

pub fn plan(input: &PlanInput) -> Result<BudgetPlan> {
    let r = input.selection_rate;
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("planner selection rate must lie in (0, 1], got {r}")));
    }
    if !(input.overtrain_factor.is_finite() && input.overtrain_factor >= 1.0) {
        return Err(Error::config(format!("overtrain_factor must be >= 1, got {}", input.overtrain_factor)));
    }
    if input.available_tokens == 0 {
        return Err(Error::config("available_tokens must be positive"));
    }
    let (param_count, budget_tokens) = match input.budget {
        Budget::Params(p) if p > 0 => (Some(p), TOKENS_PER_PARAM * p as f64 * input.overtrain_factor),
        Budget::Tokens(t) if t.is_finite() && t > 0.0 => (None, t),
        _ => return Err(Error::config("token budget or parameter count must be positive")),
    };
    let a = input.available_tokens as f64;
    let repeats_raw = budget_tokens / a;
    let repeats_effective = budget_tokens / (a * r);
    let pool = a * r;
    if repeats_effective.ceil() > MAX_EPOCHS as f64 {
        return Err(Error::config(format!(
            "plan needs {repeats_effective:.0} epochs over the pruned data (limit {MAX_EPOCHS})"
        )));
    }
    let mut epoch_schedule = Vec::new();
    let mut remaining = budget_tokens;
    let mut epoch = 0u64;
    while remaining > 0.0 {
        let tokens = remaining.min(pool);
        epoch_schedule.push(EpochEntry { epoch, shuffle_seed: epoch_seed(input.seed, epoch), tokens });
        remaining -= tokens;
        epoch += 1;
    }
    Ok(BudgetPlan {
        param_count,
        budget_tokens,
        available_tokens: input.available_tokens,
        selection_rate: r,
        overtrain_factor: input.overtrain_factor,
        repeats_raw,
        repeats_effective,
        exceeds_diminishing_returns: repeats_effective > DIMINISHING_REPEATS,
        epoch_schedule,
    })
}

pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    hash::derive_seed(seed, "epoch", epoch)
}

/// Deterministic permutation of the selected ids for one epoch.
pub fn epoch_order(prune: &PruneManifest, epoch: u64, seed: u64) -> Vec<String> {
    let s = epoch_seed(seed, epoch);
    let mut keyed: Vec<(u64, &String)> =
        prune.selected_ids.iter().map(|id| (hash::hash64(s, id.as_bytes()), id)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, id)| id.clone()).collect()
}

/// Cuts an epoch order at a sample boundary: samples are taken in order while
/// the running total stays within `budget` tokens.
pub fn truncate_epoch<F>(order: &[String], budget: f64, mut n_tokens: F) -> &[String]
where
    F: FnMut(&str) -> u64,
{
    let mut used = 0.0;
    for (i, id) in order.iter().enumerate() {
        let next = used + n_tokens(id) as f64;
        if next > budget {
            return &order[..i];
        }
        used = next;
    }
    order
}

impl BudgetPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn table(&self) -> String {
        let mut rows = vec![
            ("parameters".to_string(), self.param_count.map_or("-".into(), |p| p.to_string())),
            ("token budget".into(), format!("{:.0}", self.budget_tokens)),
            ("available tokens".into(), self.available_tokens.to_string()),
            ("selection rate".into(), self.selection_rate.to_string()),
            ("over-training factor".into(), self.overtrain_factor.to_string()),
            ("repeats (raw)".into(), format!("{:.4}", self.repeats_raw)),
            ("repeats (after pruning)".into(), format!("{:.4}", self.repeats_effective)),
            ("epochs scheduled".into(), self.epoch_schedule.len().to_string()),
        ];
        if self.exceeds_diminishing_returns {
            rows.push(("note".into(), format!("more than {DIMINISHING_REPEATS} post-pruning repeats")));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}
