//! Batch scoring of the training split with a persistent, resumable cache.
//!
//! Layout inside the cache directory:
//!
//! - `scores.jsonl`: one [`ScoreRecord`] per line, sorted by `sample_id`
//! - `scores.meta.json`: scorer descriptor, completeness flag and counts
//! - `scores.parts/`: per-worker spill files of an unfinished run
//!
//! Workers append to their own spill file; a single finalizer merges the
//! spills with any previously finalized records into the sorted cache.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::thread;

use crossbeam_channel::bounded;
use extsort::{ExternalSorter, Sortable};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, RawLine};
use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::reflm::{SampleScorer, ScoreRecord};
use crate::splitter::SplitManifest;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const META_FILE: &str = "scores.meta.json";
pub const PARTS_DIR: &str = "scores.parts";

const BATCH_LINES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub corpus: String,
    pub scorer: String,
    pub complete: bool,
    pub n_records: u64,
    pub n_expected: u64,
}

/// Handle on a score cache directory.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    dir: PathBuf,
    pub meta: ScoreMeta,
}

impl ScoreCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta = fsio::read_json(&dir.join(META_FILE))?;
        Ok(Self { dir: dir.to_path_buf(), meta })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn scores_path(&self) -> PathBuf {
        self.dir.join(SCORES_FILE)
    }

    pub fn is_complete(&self) -> bool {
        self.meta.complete
    }

    pub fn require_complete(&self) -> Result<()> {
        if !self.meta.complete {
            return Err(Error::data(format!(
                "score cache {} is incomplete ({} of {} records); rerun `score`",
                self.dir.display(),
                self.meta.n_records,
                self.meta.n_expected
            )));
        }
        Ok(())
    }

    /// Streams the finalized records in `sample_id` order.
    pub fn records(&self) -> Result<impl Iterator<Item = Result<ScoreRecord>>> {
        read_records(&self.scores_path())
    }

    pub fn load_all(&self) -> Result<Vec<ScoreRecord>> {
        self.records()?.collect()
    }

    /// Writes a finalized, complete cache from records already in hand
    /// (used for tests and for externally supplied scores).
    pub fn write(dir: &Path, corpus: &str, scorer: &str, mut records: Vec<ScoreRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(w) = records.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
            return Err(Error::data(format!("duplicate sample_id {:?}", w[0].sample_id)));
        }
        let path = dir.join(SCORES_FILE);
        fsio::write_atomic(&path, |w| {
            for r in &records {
                fsio::write_jsonl_line(w, r, &path)?;
            }
            Ok(())
        })?;
        let meta = ScoreMeta {
            corpus: corpus.to_string(),
            scorer: scorer.to_string(),
            complete: true,
            n_records: records.len() as u64,
            n_expected: records.len() as u64,
        };
        fsio::write_json(&dir.join(META_FILE), &meta)?;
        Ok(Self { dir: dir.to_path_buf(), meta })
    }
}

fn read_records(path: &Path) -> Result<impl Iterator<Item = Result<ScoreRecord>>> {
    let p = path.to_path_buf();
    Ok(fsio::lines(path)?.map(move |item| {
        let (line_no, text) = item?;
        serde_json::from_str(&text).map_err(|e| Error::record(&p, line_no, format!("bad score record: {e}")))
    }))
}

/// Reads a spill file, tolerating a torn final line from an interrupted run.
fn read_spill(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut lines = reader.lines().peekable();
    let mut line_no = 0;
    while let Some(line) = lines.next() {
        line_no += 1;
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoreRecord>(&line) {
            Ok(r) => out.push(r),
            Err(_) if lines.peek().is_none() => {
                warn!("{}:{line_no}: dropping torn record", path.display());
            }
            Err(e) => return Err(Error::record(path, line_no, format!("bad score record: {e}"))),
        }
    }
    Ok(out)
}

/// Fixed-width binary encoding for the on-disk sort runs.
impl Sortable for ScoreRecord {
    fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let id = self.sample_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&self.nll_bits.to_bits().to_le_bytes())?;
        w.write_all(&self.perplexity.to_bits().to_le_bytes())?;
        w.write_all(&self.n_tokens.to_le_bytes())
    }

    fn decode<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut id)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let nll_bits = f64::from_bits(u64::from_le_bytes(b8));
        r.read_exact(&mut b8)?;
        let perplexity = f64::from_bits(u64::from_le_bytes(b8));
        r.read_exact(&mut b8)?;
        let n_tokens = u64::from_le_bytes(b8);
        let sample_id = String::from_utf8(id)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(ScoreRecord { sample_id, nll_bits, perplexity, n_tokens })
    }
}

/// Segment size for sorting `n` items with `extsort` holding about
/// `run_records` per run.
///
/// extsort 0.5 drops every on-disk segment when `n` is an exact multiple of
/// `segment_size + 1` (the final flush leaves an empty buffer, which it then
/// mistakes for an in-memory sort), so those sizes are skipped.
pub(crate) fn segment_size(n: usize, run_records: usize) -> usize {
    let mut s = run_records.max(1);
    while n > s && n.is_multiple_of(s + 1) {
        s += 1;
    }
    s
}

pub fn by_id(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    a.sample_id.cmp(&b.sample_id)
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub workers: usize,
    /// Records held in memory per sorted run when finalizing.
    pub sort_run_records: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { workers: 1, sort_run_records: 1_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOutcome {
    /// The cache was already complete for this scorer; nothing was done.
    AlreadyComplete,
    Scored { new_records: u64 },
}

fn next_run_index(parts: &Path) -> Result<usize> {
    if !parts.exists() {
        return Ok(0);
    }
    let mut max = None;
    for entry in fs::read_dir(parts).at(parts)? {
        let name = entry.at(parts)?.file_name();
        let name = name.to_string_lossy();
        if let Some(run) = name.strip_prefix("run-").and_then(|s| s.split('-').next()) {
            if let Ok(r) = run.parse::<usize>() {
                max = Some(max.map_or(r, |m: usize| m.max(r)));
            }
        }
    }
    Ok(max.map_or(0, |m| m + 1))
}

fn spill_files(parts: &Path) -> Result<Vec<PathBuf>> {
    if !parts.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(parts)
        .at(parts)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Scores every training-split sample of `corpus` into the cache at `dir`.
///
/// Re-running against a complete cache from the same scorer is a no-op; an
/// interrupted run resumes by skipping ids already present in the cache or
/// its spill files.
pub fn score_corpus(
    corpus: &CorpusManifest,
    split: &SplitManifest,
    scorer: &dyn SampleScorer,
    dir: &Path,
    opts: &ScoreOptions,
) -> Result<(ScoreCache, ScoreOutcome)> {
    let workers = opts.workers.max(1);
    let train: HashSet<String> = split.train_set();
    let expected = train.len() as u64;
    let meta_path = dir.join(META_FILE);
    let scores_path = dir.join(SCORES_FILE);
    let parts = dir.join(PARTS_DIR);
    fs::create_dir_all(dir).at(dir)?;

    let mut previous: Vec<ScoreRecord> = Vec::new();
    if meta_path.exists() {
        let meta: ScoreMeta = fsio::read_json(&meta_path)?;
        if meta.scorer != scorer.descriptor() || meta.corpus != corpus.name {
            return Err(Error::data(format!(
                "{} holds scores from {} on corpus {:?}; remove it to rescore with {} on {:?}",
                dir.display(),
                meta.scorer,
                meta.corpus,
                scorer.descriptor(),
                corpus.name
            )));
        }
        if meta.complete && meta.n_records == expected {
            info!("score cache already complete ({} records)", meta.n_records);
            return Ok((ScoreCache { dir: dir.to_path_buf(), meta }, ScoreOutcome::AlreadyComplete));
        }
        if scores_path.exists() {
            previous = read_records(&scores_path)?.collect::<Result<_>>()?;
        }
    }
    let mut done: HashSet<String> = previous.iter().map(|r| r.sample_id.clone()).collect();
    for f in spill_files(&parts)? {
        done.extend(read_spill(&f)?.into_iter().map(|r| r.sample_id));
    }

    let mut meta = ScoreMeta {
        corpus: corpus.name.clone(),
        scorer: scorer.descriptor().to_string(),
        complete: false,
        n_records: done.len() as u64,
        n_expected: expected,
    };
    fsio::write_json(&meta_path, &meta)?;

    fs::create_dir_all(&parts).at(&parts)?;
    let run = next_run_index(&parts)?;
    let (tx, rx) = bounded::<Vec<RawLine>>(workers * 2);
    let train_ref = &train;
    let done_ref = &done;

    let (read_result, worker_results) = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let rx = rx.clone();
                let path = parts.join(format!("run-{run:04}-worker-{w:03}.jsonl"));
                s.spawn(move || -> Result<u64> {
                    let file = OpenOptions::new().create(true).append(true).open(&path).at(&path)?;
                    let mut out = BufWriter::with_capacity(1 << 20, file);
                    let mut n = 0u64;
                    let mut result = Ok(());
                    'recv: for batch in rx.iter() {
                        for line in batch {
                            let step = line.parse().and_then(|sample| {
                                if !train_ref.contains(&sample.id) || done_ref.contains(&sample.id) {
                                    return Ok(false);
                                }
                                let rec = scorer.score(&sample)?;
                                fsio::write_jsonl_line(&mut out, &rec, &path)?;
                                Ok(true)
                            });
                            match step {
                                Ok(true) => n += 1,
                                Ok(false) => {}
                                Err(e) => {
                                    result = Err(e);
                                    break 'recv;
                                }
                            }
                        }
                    }
                    drop(rx);
                    out.flush().at(&path)?;
                    result.map(|_| n)
                })
            })
            .collect();
        drop(rx);

        let mut read_result = Ok(());
        let mut batch = Vec::with_capacity(BATCH_LINES);
        for line in corpus.raw_lines() {
            match line {
                Ok(l) => batch.push(l),
                Err(e) => {
                    read_result = Err(e);
                    break;
                }
            }
            if batch.len() == BATCH_LINES {
                let full = std::mem::replace(&mut batch, Vec::with_capacity(BATCH_LINES));
                if tx.send(full).is_err() {
                    break;
                }
            }
        }
        if !batch.is_empty() {
            let _ = tx.send(batch);
        }
        drop(tx);
        let results: Vec<Result<u64>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("scoring worker panicked".into()))))
            .collect();
        (read_result, results)
    });
    read_result?;
    let mut new_records = 0;
    for r in worker_results {
        new_records += r?;
    }

    // Finalize: merge previous records and every spill into the sorted cache.
    let mut spilled = Vec::new();
    for f in spill_files(&parts)? {
        spilled.extend(read_spill(&f)?);
    }
    let total = previous.len() + spilled.len();
    let sorter = ExternalSorter::new()
        .with_segment_size(segment_size(total, opts.sort_run_records))
        .with_sort_dir(dir.to_path_buf());
    let sorted = sorter
        .sort_by(previous.into_iter().chain(spilled), by_id)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut count = 0u64;
    let mut last: Option<String> = None;
    fsio::write_atomic(&scores_path, |w| {
        for rec in sorted {
            let rec = rec.at(dir)?;
            if last.as_deref() == Some(rec.sample_id.as_str()) {
                return Err(Error::Internal(format!("sample {:?} scored twice", rec.sample_id)));
            }
            if !train.contains(&rec.sample_id) {
                return Err(Error::data(format!(
                    "score cache holds {:?}, which is not in the training split",
                    rec.sample_id
                )));
            }
            fsio::write_jsonl_line(w, &rec, &scores_path)?;
            count += 1;
            last = Some(rec.sample_id);
        }
        Ok(())
    })?;
    meta.n_records = count;
    meta.complete = count == expected;
    fsio::write_json(&meta_path, &meta)?;
    if !meta.complete {
        return Err(Error::data(format!(
            "scored {count} of {expected} training samples; the corpus is missing split ids"
        )));
    }
    fs::remove_dir_all(&parts).at(&parts)?;
    info!("scored {new_records} new samples; cache holds {count}");
    Ok((ScoreCache { dir: dir.to_path_buf(), meta }, ScoreOutcome::Scored { new_records }))
}
