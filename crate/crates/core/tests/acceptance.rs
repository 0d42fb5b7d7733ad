//! Acceptance suite: one line per criterion, non-zero exit if any fails.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::panic;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_rational::BigRational;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, LogNormal};

use pplx_prune::analyzer::{self, DistributionOptions};
use pplx_prune::config::PipelineConfig;
use pplx_prune::corpus::{self, IngestOptions, Sample, Tokenizer};
use pplx_prune::evalagg::{self, EvalRecord};
use pplx_prune::pipeline::{self, Workdir};
use pplx_prune::planner::{self, Budget, PlanInput};
use pplx_prune::reflm::{self, NGramConfig, NGramModel, SampleScorer, ScoreRecord};
use pplx_prune::scorer::ScoreCache;
use pplx_prune::selector::{self, window_for, Criteria, PercentileWindow, SelectPath, SelectionSpec};
use pplx_prune::synth::{self, SynthSpec};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

const CRITERIA: [Criteria; 3] = [Criteria::Low, Criteria::Medium, Criteria::High];

fn window_arithmetic() -> Outcome {
    let expected = [
        (0.25, [(0.0, 0.25), (0.375, 0.625), (0.75, 1.0)]),
        (0.5, [(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)]),
        (0.75, [(0.0, 0.75), (0.125, 0.875), (0.25, 1.0)]),
    ];
    for (r, wins) in expected {
        for (c, (lo, hi)) in CRITERIA.into_iter().zip(wins) {
            let w = window_for(&SelectionSpec::new(c, r).unwrap());
            check!(
                w == PercentileWindow { min_percentile: lo, max_percentile: hi },
                "{c} {r}: got [{}, {}], want [{lo}, {hi}]",
                w.min_percentile,
                w.max_percentile
            );
        }
    }
    Ok("9 windows exact".into())
}

/// Sort by (perplexity, id) and test every mid-rank against the window built
/// from the exact rate in rational arithmetic.
fn oracle_select(records: &[ScoreRecord], criteria: Criteria, rate: f64) -> (Vec<String>, u64) {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.perplexity.total_cmp(&b.perplexity).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let n = sorted.len();
    let (r, half, one) = (q(rate), q(0.5), q(1.0));
    let (lo, hi) = match criteria {
        Criteria::Low => (q(0.0), r),
        Criteria::Medium => (&half - &r / q(2.0), &half + &r / q(2.0)),
        Criteria::High => (one.clone() - r, one),
    };
    let two_n = q((2 * n) as f64);
    let mut ids = Vec::new();
    let mut tokens = 0;
    for (i, r) in sorted.iter().enumerate() {
        let qk = q((2 * i + 1) as f64) / &two_n;
        let keep = match criteria {
            Criteria::High => lo < qk && qk <= hi,
            _ => lo <= qk && qk < hi,
        };
        if keep {
            ids.push(r.sample_id.clone());
            tokens += r.n_tokens;
        }
    }
    ids.sort();
    (ids, tokens)
}

fn random_scores(rng: &mut StdRng, n: usize, kind: usize) -> Vec<ScoreRecord> {
    let pool: Vec<f64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0.0..10.0)).collect();
    let tie = rng.random_range(0.0..10.0);
    (0..n)
        .map(|i| {
            let nll = match kind {
                0 => rng.random_range(0.0..10.0),
                1 => tie,
                2 => pool[rng.random_range(0..pool.len())],
                _ => f64::from(rng.random_range(0..8u8)) * 0.5,
            };
            let id = format!("{:08x}-{i}", rng.random::<u32>());
            ScoreRecord::from_nll(id, nll, rng.random_range(1..200))
        })
        .collect()
}

fn random_rate(rng: &mut StdRng, n: usize, case: usize) -> f64 {
    match case % 5 {
        0 => [0.25, 0.5, 0.75][rng.random_range(0..3)],
        1 => rng.random_range(1..n) as f64 / n as f64,
        2 => rng.random_range(0.001..0.999),
        3 => rng.random_range(0.001..0.05),
        _ => rng.random_range(0.95..0.999),
    }
}

fn selection_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xACCE_0002);
    let dir = tempfile::tempdir().unwrap();
    let cases = 1200;
    let mut via_cache = 0;
    for case in 0..cases {
        let n = if case % 3 == 0 { rng.random_range(2..=20) } else { rng.random_range(2..=1000) };
        let records = random_scores(&mut rng, n, case % 4);
        let rate = random_rate(&mut rng, n, case);
        let criteria = CRITERIA[rng.random_range(0..3)];
        let spec = SelectionSpec::new(criteria, rate).unwrap();
        let m = selector::select_records(records.clone(), &spec, "oracle").unwrap();
        let (ids, tokens) = oracle_select(&records, criteria, rate);
        check!(m.selected_ids == ids, "case {case}: {criteria} {rate} N={n}: selection differs from oracle");
        check!(m.tokens_post == tokens, "case {case}: token count differs");
        let rn = q(rate) * q(n as f64);
        let k = q(ids.len() as f64);
        check!(k == rn.floor() || k == rn.ceil(), "case {case}: {} selected for r*N = {rn}", ids.len());
        if case % 8 == 0 {
            let cache_dir = dir.path().join(format!("c{case}"));
            let cache = ScoreCache::write(&cache_dir, "oracle", "oracle", records).unwrap();
            for path in [SelectPath::InMemory, SelectPath::External { run_records: 37 }] {
                let via = selector::select(&cache, &spec, path).unwrap();
                check!(via == m, "case {case}: {path:?} differs from in-memory selection");
            }
            via_cache += 1;
        }
    }
    Ok(format!("{cases} score sets, {via_cache} also through on-disk caches"))
}

/// Random strictly increasing piecewise-linear map over [0, 2^12].
fn random_spline(rng: &mut StdRng) -> impl Fn(f64) -> f64 {
    let knots = rng.random_range(2..12);
    let mut xs = vec![0.0];
    let mut ys = vec![rng.random_range(1.0..5.0)];
    for i in 1..=knots {
        xs.push(4097.0 * i as f64 / knots as f64);
        ys.push(ys[i - 1] + rng.random_range(0.5..50.0));
    }
    move |x: f64| {
        let i = xs.partition_point(|&k| k <= x).clamp(1, xs.len() - 1);
        let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
        ys[i - 1] + t * (ys[i] - ys[i - 1])
    }
}

fn rank_invariance() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xACCE_0003);
    let dir = tempfile::tempdir().unwrap();
    for case in 0..100 {
        let n = rng.random_range(2..=500);
        let dup = case % 4 == 0;
        let records: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                // Multiples of 1/64 keep distinct scores well separated after transforms.
                let nll = f64::from(rng.random_range(0..if dup { 8 } else { 768u32 })) / 64.0;
                ScoreRecord::from_nll(format!("s{i:04}"), nll, rng.random_range(1..100))
            })
            .collect();
        let spec = SelectionSpec::new(CRITERIA[case % 3], random_rate(&mut rng, n, case)).unwrap();
        let spline = random_spline(&mut rng);
        let natural: Vec<ScoreRecord> = records
            .iter()
            .map(|r| ScoreRecord { perplexity: (r.nll_bits * std::f64::consts::LN_2).exp(), ..r.clone() })
            .collect();
        let splined: Vec<ScoreRecord> =
            records.iter().map(|r| ScoreRecord { perplexity: spline(r.perplexity), ..r.clone() }).collect();
        let mut manifests = Vec::new();
        for (tag, recs) in [("base", records), ("natural", natural), ("spline", splined)] {
            let cache = ScoreCache::write(&dir.path().join(format!("{case}-{tag}")), "c", "s", recs).unwrap();
            manifests.push(selector::select(&cache, &spec, SelectPath::InMemory).unwrap());
        }
        check!(manifests[0] == manifests[1], "cache {case}: natural-log path changes the selection");
        check!(manifests[0] == manifests[2], "cache {case}: spline transform changes the selection");
    }
    Ok("100 caches x 2 transforms identical".into())
}

fn category_rows(means: &[f64]) -> Vec<EvalRecord> {
    let cats = ["world knowledge", "common sense reasoning", "language understanding", "symbolic problem solving", "reading comprehension"];
    // Two tasks per category whose normalized scores average to the row value.
    let mut out = Vec::new();
    for (cat, &m) in cats.iter().zip(means) {
        for (i, (base, delta)) in [(0.25, 2.0), (0.5, -2.0)].into_iter().enumerate() {
            let norm = (m + delta) / 100.0;
            out.push(EvalRecord {
                task: format!("{cat}-{i}"),
                category: cat.to_string(),
                accuracy: base + (1.0 - base) * norm,
                random_baseline: base,
            });
        }
    }
    out
}

fn category_aggregation() -> Outcome {
    let base = evalagg::aggregate(&category_rows(&[15.51, 10.31, 28.11, 3.53, 11.16])).unwrap().overall;
    let high = evalagg::aggregate(&category_rows(&[18.18, 12.75, 33.2, 3.36, 10.63])).unwrap().overall;
    let gain = high - base;
    check!((base - 13.72).abs() <= 0.02 && (base - 13.73).abs() <= 0.02, "baseline average {base}");
    check!((high - 15.62).abs() <= 0.02, "high-perplexity average {high}");
    check!((gain - 1.90).abs() <= 0.02 && (gain - 1.89).abs() <= 0.02, "improvement {gain}");
    Ok(format!("baseline {base:.4}, high {high:.4}, improvement {gain:.4}"))
}

fn repeats_arithmetic() -> Outcome {
    let input = |t: f64, a: u64| PlanInput {
        budget: Budget::Tokens(t),
        available_tokens: a,
        selection_rate: 0.5,
        overtrain_factor: 1.0,
        seed: 1,
    };
    let p = planner::plan(&input(26e9, 26_000_000_000)).unwrap();
    check!(p.repeats_raw == 1.0 && p.repeats_effective == 2.0, "A = T: {} / {}", p.repeats_raw, p.repeats_effective);
    let a = 10_000_000_000u64;
    for (raw, eff) in [(0.5, 1.0), (1.0, 2.0), (2.0, 4.0), (4.0, 8.0), (8.0, 16.0)] {
        let p = planner::plan(&input(raw * a as f64, a)).unwrap();
        check!(p.repeats_raw == raw && p.repeats_effective == eff, "raw {raw}: got {} -> {}", p.repeats_raw, p.repeats_effective);
    }
    let p = planner::plan(&PlanInput { budget: Budget::Params(1_300_000_000), overtrain_factor: 5.0, ..input(1.0, a) })
        .unwrap();
    check!(p.budget_tokens == 130e9, "1.3B x 5 gives {}", p.budget_tokens);
    Ok("A=T -> 2; {0.5,1,2,4,8} -> {1,2,4,8,16}; 130e9".into())
}

fn ngram(order: usize, add_k: f64, w: &[f64], vocab: u32, corpus: &[&[u32]]) -> NGramModel {
    let samples = corpus
        .iter()
        .enumerate()
        .map(|(i, t)| Ok(Sample { id: format!("t{i}"), domain: "d".into(), tokens: t.to_vec() }));
    reflm::train(samples, NGramConfig { order, add_k, interpolation_weights: w.to_vec() }, vocab, None).unwrap()
}

/// Direct count-based interpolated add-k estimate, in exact arithmetic.
fn exact_prob(order: usize, add_k: f64, w: &[f64], vocab: u32, corpus: &[&[u32]], ctx: &[u32], t: u32) -> BigRational {
    let bos = vocab;
    let mut p = q(0.0);
    for (c, &wc) in w.iter().enumerate() {
        let want: Vec<u32> = {
            let mut h = vec![bos; order - 1];
            h.extend_from_slice(ctx);
            h[h.len() - c..].to_vec()
        };
        let (mut n_ctx, mut n_t) = (0u64, 0u64);
        for doc in corpus {
            let mut padded = vec![bos; order - 1];
            padded.extend_from_slice(doc);
            for i in order - 1..padded.len() {
                if padded[i - c..i] == want[..] {
                    n_ctx += 1;
                    n_t += u64::from(padded[i] == t);
                }
            }
        }
        let est = if n_ctx == 0 {
            q(1.0) / q(f64::from(vocab))
        } else {
            (q(n_t as f64) + q(add_k)) / (q(n_ctx as f64) + q(add_k) * q(f64::from(vocab)))
        };
        p += q(wc) * est;
    }
    p
}

fn all_contexts(vocab: u32, len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out.into_iter().flat_map(|c| (0..=vocab).map(move |t| [c.clone(), vec![t]].concat())).collect();
    }
    out
}

fn reference_lm() -> Outcome {
    // Closed-form known answers.
    let m = ngram(2, 1.0, &[0.0, 1.0], 2, &[&[0, 1]]);
    check!((m.prob(&[0], 1).unwrap() - 2.0 / 3.0).abs() < 1e-15, "add-1 bigram P(1|0)");
    let nll = m.score(&Sample { id: "x".into(), domain: "d".into(), tokens: vec![0, 1, 1] }).unwrap().nll_bits;
    let want = -(2.0 * (2.0f64 / 3.0).log2() + 0.5f64.log2()) / 3.0;
    check!((nll - want).abs() < 1e-15, "3-token sample nll {nll} vs {want}");
    let m = ngram(1, 0.5, &[1.0], 3, &[&[0, 0, 1], &[2, 0]]);
    check!((m.prob(&[], 0).unwrap() - 3.5 / 6.5).abs() < 1e-15, "add-0.5 unigram");
    let m = ngram(2, 1.0, &[0.25, 0.75], 3, &[&[0, 1, 0, 1, 2]]);
    check!((m.prob(&[0], 1).unwrap() - 87.0 / 160.0).abs() < 1e-15, "interpolated bigram P(1|0)");

    // The same three toy corpora against an exact count-based oracle over every context.
    let toys: [(usize, f64, &[f64], u32, &[&[u32]]); 3] = [
        (2, 1.0, &[0.0, 1.0], 2, &[&[0, 1]]),
        (1, 0.5, &[1.0], 3, &[&[0, 0, 1], &[2, 0]]),
        (3, 0.25, &[0.125, 0.375, 0.5], 3, &[&[0, 1, 0, 1, 2], &[2, 2, 1]]),
    ];
    let mut kats = 0;
    for (order, k, w, v, corpus) in toys {
        let m = ngram(order, k, w, v, corpus);
        for ctx in all_contexts(v, order - 1) {
            for t in 0..v {
                let exact = exact_prob(order, k, w, v, corpus, &ctx, t);
                let got = m.prob(&ctx, t).unwrap();
                let diff = q(got) - &exact;
                let tol = &exact * q(1e-14);
                check!(diff <= tol && -diff <= tol, "order {order} ctx {ctx:?} t {t}: {got} vs {exact}");
                check!(m.token_logprob(&ctx, t).unwrap() == got.log2(), "token_logprob is not log2 of prob");
                kats += 1;
            }
        }
    }

    // Normalization over random contexts of a model trained on random text.
    let mut rng = StdRng::seed_from_u64(0xACCE_0006);
    let vocab = 50u32;
    let docs: Vec<Vec<u32>> = (0..500)
        .map(|_| (0..60).map(|_| rng.random_range(0..vocab).min(rng.random_range(0..vocab))).collect())
        .collect();
    let refs: Vec<&[u32]> = docs.iter().map(Vec::as_slice).collect();
    let m = ngram(3, 0.01, &[0.1, 0.3, 0.6], vocab, &refs);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let len = rng.random_range(0..=3);
        let ctx: Vec<u32> = (0..len).map(|_| rng.random_range(0..=vocab)).collect();
        let total: f64 = (0..vocab).map(|t| m.prob(&ctx, t).unwrap()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    check!(worst <= 1e-9, "probabilities over a context sum to 1 +- {worst}");

    for v in [2u32, 256, 4096, 65536] {
        let m = NGramModel::untrained(NGramConfig { order: 3, add_k: 0.1, interpolation_weights: vec![0.2, 0.3, 0.5] }, v)
            .unwrap();
        let tokens: Vec<u32> = (0..97).map(|_| rng.random_range(0..v)).collect();
        let r = m.score(&Sample { id: "u".into(), domain: "d".into(), tokens }).unwrap();
        check!(r.perplexity == f64::from(v), "untrained vocab {v}: perplexity {}", r.perplexity);
    }
    Ok(format!("{kats} exact KATs, max |sum P - 1| = {worst:.1e}, untrained = vocab"))
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pplx-prune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

const BASE_CONFIG: &str = r#"seed = 17

[paths]
corpus = "corpus"
workdir = "work"

[split]
ref_fraction = 0.1

[model]
order = 3
add_k = 0.01
weights = [0.1, 0.3, 0.6]

[selection]
criteria = "high"
rate = 0.5
"#;

fn synth_corpus(dir: &Path, n: usize) {
    let raw = dir.join("raw.jsonl");
    synth::generate(&raw, &SynthSpec::new(n, 2024)).unwrap();
    corpus::ingest(&raw, &dir.join("corpus"), &IngestOptions::new(format!("synth-{n}"), Tokenizer::ByteLevel))
        .unwrap();
    std::fs::remove_file(raw).unwrap();
}

fn end_to_end() -> Outcome {
    let n: usize = std::env::var("PPLX_ACCEPTANCE_SAMPLES").ok().and_then(|s| s.parse().ok()).unwrap_or(1_000_000);
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path(), n);
    let manifest = corpus::CorpusManifest::load(&dir.path().join("corpus")).unwrap();
    let cfg = dir.path().join("pplx.toml");
    std::fs::write(&cfg, BASE_CONFIG).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();

    let mut timings = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let wd = dir.path().join(name).to_string_lossy().into_owned();
        let t = Instant::now();
        run_bin(&["--config", &cfg, "--workdir", &wd, "--workers", workers, "pipeline"])?;
        timings.push(t.elapsed());
    }
    let skip = [pipeline::CONFIG_ECHO];
    let a = tree(&dir.path().join("a"), &skip);
    for f in ["split.json", "model.json", "scores/scores.jsonl", "prune.json", "pruned/manifest.json", "analysis/domains.csv", "analysis/pplx_dist.json"] {
        check!(a.contains_key(Path::new(f)), "artifact {f} missing");
    }
    check!(a == tree(&dir.path().join("b"), &skip), "two runs with workers=1 differ");
    check!(a == tree(&dir.path().join("c"), &skip), "workers=1 and workers=8 differ");

    // Stage timing on a fresh work dir: scoring plus selection alone.
    let wd = dir.path().join("d").to_string_lossy().into_owned();
    run_bin(&["--config", &cfg, "--workdir", &wd, "split"])?;
    run_bin(&["--config", &cfg, "--workdir", &wd, "train-ref"])?;
    let t = Instant::now();
    run_bin(&["--config", &cfg, "--workdir", &wd, "score"])?;
    run_bin(&["--config", &cfg, "--workdir", &wd, "prune"])?;
    let score_select = t.elapsed();
    check!(score_select.as_secs() < 600, "scoring + selection took {score_select:.1?}");

    let cache = ScoreCache::open(&dir.path().join("a/scores")).unwrap();
    let spec = SelectionSpec::new(Criteria::High, 0.5).unwrap();
    let mem = selector::select(&cache, &spec, SelectPath::InMemory).unwrap();
    let ext = selector::select(&cache, &spec, SelectPath::External { run_records: 100_000 }).unwrap();
    check!(mem == ext, "external-sort selection differs from in-memory");
    check!(selector::load(&dir.path().join("a/prune.json")).unwrap() == mem, "prune.json differs from re-selection");
    Ok(format!(
        "{} samples / {} tokens; pipeline runs {:.0?}/{:.0?}/{:.0?}; score+select {score_select:.1?}",
        manifest.total_samples, manifest.total_tokens, timings[0], timings[1], timings[2]
    ))
}

fn tree(root: &Path, skip: &[&str]) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut std::collections::BTreeMap<std::path::PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if skip.iter().any(|s| p.file_name().is_some_and(|n| n == *s)) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, skip, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    walk(root, root, skip, &mut out);
    out
}

fn analytics() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(dir.path(), 20_000);
    let mut cfg = PipelineConfig::from_toml(BASE_CONFIG, Path::new("acceptance")).unwrap();
    cfg.paths.corpus = dir.path().join("corpus");
    cfg.paths.workdir = dir.path().join("work");
    cfg.validate().unwrap();
    let wd = Workdir::new(&cfg.paths.workdir);
    let analysis = pipeline::run_pipeline(&cfg, &wd).unwrap();

    // Construction check: every random-text sample outscores every other sample.
    let corpus = pipeline::load_corpus(&cfg).unwrap();
    let domain: std::collections::HashMap<String, String> =
        corpus.stream().map(|s| s.unwrap()).map(|s| (s.id, s.domain)).collect();
    let cache = ScoreCache::open(&wd.scores()).unwrap();
    let (mut web_min, mut other_max) = (f64::INFINITY, 0.0f64);
    for r in cache.records().unwrap() {
        let r = r.unwrap();
        if domain[&r.sample_id] == "web" {
            web_min = web_min.min(r.perplexity);
        } else {
            other_max = other_max.max(r.perplexity);
        }
    }
    check!(web_min > other_max, "web is not the high-perplexity domain ({web_min} <= {other_max})");

    let rows = &analysis.domains.rows;
    for (name, col) in [
        ("pre samples", rows.iter().map(|r| r.pre_sample_share).sum::<f64>()),
        ("pre tokens", rows.iter().map(|r| r.pre_token_share).sum()),
        ("post samples", rows.iter().map(|r| r.post_sample_share).sum()),
        ("post tokens", rows.iter().map(|r| r.post_token_share).sum()),
    ] {
        check!((col - 1.0).abs() <= 1e-9, "{name} shares sum to {col}");
    }
    let web = analysis.domains.row("web").unwrap();
    check!(web.post_sample_share > web.pre_sample_share, "web sample share did not grow");
    check!(web.post_token_share > web.pre_token_share, "web token share did not grow");

    let mut masses = Vec::new();
    let d = &analysis.distribution;
    for rep in std::iter::once(&d.before).chain(d.after.as_ref()) {
        let h = rep.histogram_mass();
        let k = rep.kde_mass().ok_or("KDE missing")?;
        check!((h - 1.0).abs() <= 1e-6, "histogram mass {h}");
        check!((k - 1.0).abs() <= 1e-3, "KDE mass {k}");
        masses.push(k);
    }

    // KDE mode of log2-perplexities drawn from a known lognormal.
    let mut rng = StdRng::seed_from_u64(0xACCE_0008);
    let gen = LogNormal::new(40f64.ln(), 0.5).unwrap();
    let xs: Vec<f64> = (0..10_000).map(|_| gen.sample(&mut rng).log2()).collect();
    let rep = analyzer::distribution_from_values(xs, &DistributionOptions::new(1.0, 0)).unwrap();
    let mode = rep.kde_mode().ok_or("KDE missing")?;
    let want = 40f64.log2();
    check!((mode - want).abs() <= 0.05 * want, "lognormal KDE mode {mode} vs {want}");
    Ok(format!(
        "web share {:.3} -> {:.3}; KDE masses {:.5}/{:.5}; lognormal mode {mode:.3} vs {want:.3}",
        web.pre_sample_share, web.post_sample_share, masses[0], masses[1]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("window arithmetic", window_arithmetic),
        ("selection oracle equivalence", selection_oracle),
        ("rank invariance", rank_invariance),
        ("category aggregation", category_aggregation),
        ("repeats arithmetic", repeats_arithmetic),
        ("reference LM correctness", reference_lm),
        ("end-to-end determinism and throughput", end_to_end),
        ("analytics sanity", analytics),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {}. {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {}. {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 8 acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
