//! Aggregation of downstream-task accuracies and corpus-level perplexity.
//!
//! Each task's accuracy is normalized against its random-guessing baseline,
//! `a_n = (a_m - a_r) / (1 - a_r)`, averaged within its category, and the
//! overall score is the mean of the category means (not of the tasks).
//! Everything in [`EvalSummary`] is in percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::reflm::ScoreRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub task: String,
    pub category: String,
    pub accuracy: f64,
    pub random_baseline: f64,
}

pub fn normalize(accuracy: f64, random_baseline: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&random_baseline) {
        return Err(Error::data(format!("random_baseline must lie in [0, 1), got {random_baseline}")));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::data(format!("accuracy must lie in [0, 1], got {accuracy}")));
    }
    Ok((accuracy - random_baseline) / (1.0 - random_baseline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub category: String,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: Vec<TaskScore>,
    pub categories: BTreeMap<String, f64>,
    pub overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_perplexity: Option<f64>,
}

/// Order-independent mean: values are summed in sorted order.
fn mean_sorted(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.into_iter().sum::<f64>() / n
}

pub fn aggregate(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::data("no evaluation records to aggregate"));
    }
    let mut tasks = Vec::with_capacity(records.len());
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.category.is_empty() {
            return Err(Error::data(format!("task {:?} has an empty category", r.task)));
        }
        let a_n = 100.0 * normalize(r.accuracy, r.random_baseline)
            .map_err(|e| Error::data(format!("task {:?}: {e}", r.task)))?;
        by_cat.entry(r.category.clone()).or_default().push(a_n);
        tasks.push(TaskScore { task: r.task.clone(), category: r.category.clone(), normalized: a_n });
    }
    tasks.sort_by(|a, b| (&a.category, &a.task).cmp(&(&b.category, &b.task)).then(a.normalized.total_cmp(&b.normalized)));
    let categories: BTreeMap<String, f64> = by_cat.into_iter().map(|(c, v)| (c, mean_sorted(v))).collect();
    let overall = mean_sorted(categories.values().copied().collect());
    Ok(EvalSummary { tasks, categories, overall, corpus_perplexity: None })
}

/// Token-weighted corpus perplexity, `2^(sum nll*n / sum n)`.
pub fn corpus_perplexity<I>(records: I) -> Result<f64>
where
    I: IntoIterator<Item = Result<ScoreRecord>>,
{
    let mut terms = Vec::new();
    let mut tokens = 0u64;
    for r in records {
        let r = r?;
        terms.push(r.nll_bits * r.n_tokens as f64);
        tokens += r.n_tokens;
    }
    if tokens == 0 {
        return Err(Error::data("corpus perplexity over zero tokens"));
    }
    terms.sort_by(f64::total_cmp);
    Ok((terms.into_iter().sum::<f64>() / tokens as f64).exp2())
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for item in fsio::lines(path)? {
        let (line_no, text) = item?;
        out.push(
            serde_json::from_str(&text)
                .map_err(|e| Error::record(path, line_no, format!("bad eval record: {e}")))?,
        );
    }
    Ok(out)
}

impl EvalSummary {
    /// One header row and one value row: categories as columns, overall last.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let head: Vec<&str> = self.categories.keys().map(String::as_str).chain(["average"]).collect();
        out.push_str(&head.join(","));
        out.push('\n');
        let vals: Vec<String> =
            self.categories.values().chain([&self.overall]).map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(out, "{}", vals.join(","));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fsio::write_json(&dir.join("summary.json"), self)?;
        fsio::write_text(&dir.join("summary.csv"), &self.to_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(task: &str, cat: &str, a: f64, r: f64) -> EvalRecord {
        EvalRecord { task: task.into(), category: cat.into(), accuracy: a, random_baseline: r }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(0.25, 0.25).unwrap(), 0.0);
        assert_eq!(normalize(1.0, 0.3).unwrap(), 1.0);
        assert_eq!(normalize(0.4375, 0.25).unwrap(), 0.25);
        assert!(normalize(0.1, 0.25).unwrap() < 0.0);
        assert!(normalize(0.5, 1.0).is_err());
    }

    #[test]
    fn overall_is_mean_of_category_means() {
        let recs = [rec("a", "x", 1.0, 0.0), rec("b", "x", 0.0, 0.0), rec("c", "y", 0.9, 0.0)];
        let s = aggregate(&recs).unwrap();
        assert!((s.categories["x"] - 50.0).abs() < 1e-12);
        assert!((s.overall - 70.0).abs() < 1e-12);
    }

    #[test]
    fn single_task_is_identity() {
        let s = aggregate(&[rec("t", "c", 0.6, 0.2)]).unwrap();
        assert!((s.overall - 50.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_fails() {
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[rec("t", "", 0.5, 0.1)]).is_err());
    }

    #[test]
    fn corpus_perplexity_examples() {
        let r = |ppl: f64, n| Ok(ScoreRecord::from_nll("x".into(), ppl.log2(), n));
        assert_eq!(corpus_perplexity([r(2.0, 5), r(8.0, 5)]).unwrap(), 4.0);
        assert_eq!(corpus_perplexity([r(8.0, 3)]).unwrap(), 8.0);
        assert!(corpus_perplexity(std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            accs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..0.9, 0usize..4), 1..20),
            seed in any::<u64>(),
        ) {
            let recs: Vec<EvalRecord> = accs.iter().enumerate()
                .map(|(i, &(a, r, c))| rec(&format!("t{i}"), &format!("c{c}"), a, r)).collect();
            let mut shuffled = recs.clone();
            let mut rng = crate::hash::SplitMix64::new(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.below(i as u64 + 1) as usize);
            }
            prop_assert_eq!(aggregate(&recs).unwrap(), aggregate(&shuffled).unwrap());
        }

        #[test]
        fn chance_task_contributes_zero(a in 0.0f64..0.99) {
            let s = aggregate(&[rec("t", "c", a, a)]).unwrap();
            prop_assert_eq!(s.tasks[0].normalized, 0.0);
        }
    }
}
