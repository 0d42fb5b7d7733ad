//! Deterministic synthetic multi-domain corpora for tests and demos.
//!
//! Three text sources with very different entropy:
//!
//! - `wiki`: sentences over a small Zipf-weighted word list
//! - `code`: statements instantiated from a handful of templates
//! - `web`: uniformly random printable ASCII
//!
//! Every sample is generated from its own seed, so the output does not
//! depend on generation order.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::hash::{self, SplitMix64};

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on",
    "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they",
    "you", "were", "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more",
    "when", "will", "would", "who", "so", "no", "river", "city", "history", "known", "first", "during",
];

const IDENTS: &[&str] = &["x", "y", "idx", "count", "buf", "node", "value", "total"];
const CALLS: &[&str] = &["len", "push", "get", "insert", "parse", "clone"];

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub seed: u64,
    /// `(domain, weight)`; domains must be `wiki`, `code` or `web`.
    pub mix: Vec<(String, f64)>,
    pub min_len: usize,
    pub max_len: usize,
}

impl SynthSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            mix: vec![("wiki".into(), 0.45), ("code".into(), 0.3), ("web".into(), 0.25)],
            min_len: 60,
            max_len: 140,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mix.is_empty() || self.mix.iter().any(|(_, w)| !(*w > 0.0)) {
            return Err(Error::config("synthetic mix needs positive weights"));
        }
        if let Some((d, _)) = self.mix.iter().find(|(d, _)| !["wiki", "code", "web"].contains(&d.as_str())) {
            return Err(Error::config(format!("unknown synthetic domain {d:?}")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("synthetic lengths need 0 < min_len <= max_len"));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct RawRecord<'a> {
    id: String,
    domain: &'a str,
    text: String,
}

/// Cumulative Zipf weights, `P(i)` proportional to `1/(i+1)`.
fn zipf_table(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=n).map(|i| {
        acc += 1.0 / i as f64;
        acc
    }).collect()
}

fn pick(rng: &mut SplitMix64, cum: &[f64]) -> usize {
    let u = rng.next_f64() * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

fn wiki(rng: &mut SplitMix64, cum: &[f64], len: usize) -> String {
    let mut s = String::with_capacity(len + 16);
    let mut words_in_sentence = 0;
    while s.len() < len {
        let w = WORDS[pick(rng, cum)];
        if words_in_sentence == 0 {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                s.extend(f.to_uppercase());
                s.push_str(c.as_str());
            }
        } else {
            s.push(' ');
            s.push_str(w);
        }
        words_in_sentence += 1;
        if words_in_sentence > 6 && rng.below(4) == 0 {
            s.push_str(". ");
            words_in_sentence = 0;
        }
    }
    s.truncate(len);
    s
}

fn code(rng: &mut SplitMix64, len: usize) -> String {
    let mut s = String::with_capacity(len + 32);
    while s.len() < len {
        let a = IDENTS[rng.below(IDENTS.len() as u64) as usize];
        let b = IDENTS[rng.below(IDENTS.len() as u64) as usize];
        let f = CALLS[rng.below(CALLS.len() as u64) as usize];
        match rng.below(3) {
            0 => s.push_str(&format!("let {a} = {b}.{f}();\n")),
            1 => s.push_str(&format!("{a} += {};\n", rng.below(10))),
            _ => s.push_str(&format!("if {a} > {b} {{ return {a}; }}\n")),
        }
    }
    s.truncate(len);
    s
}

fn web(rng: &mut SplitMix64, len: usize) -> String {
    (0..len).map(|_| (b' ' + rng.below(95) as u8) as char).collect()
}

/// Generates one raw record per sample as line-delimited JSON.
pub fn generate(out: &Path, spec: &SynthSpec) -> Result<()> {
    spec.validate()?;
    let total: f64 = spec.mix.iter().map(|(_, w)| w).sum();
    fsio::write_atomic(out, |w| {
        let span = (spec.max_len - spec.min_len + 1) as u64;
        let cum = zipf_table(WORDS.len());
        let mut line = Vec::with_capacity(512);
        for i in 0..spec.n_samples {
            let mut rng = SplitMix64::new(hash::derive_seed(spec.seed, "synth", i as u64));
            let mut u = rng.next_f64() * total;
            let mut domain = spec.mix[spec.mix.len() - 1].0.as_str();
            for (d, wt) in &spec.mix {
                if u < *wt {
                    domain = d;
                    break;
                }
                u -= wt;
            }
            let len = spec.min_len + rng.below(span) as usize;
            let text = match domain {
                "wiki" => wiki(&mut rng, &cum, len),
                "code" => code(&mut rng, len),
                _ => web(&mut rng, len),
            };
            line.clear();
            serde_json::to_writer(&mut line, &RawRecord { id: format!("doc-{i:08}"), domain, text })
                .map_err(|e| Error::Internal(e.to_string()))?;
            line.push(b'\n');
            w.write_all(&line).at(out)?;
        }
        Ok(())
    })
}
