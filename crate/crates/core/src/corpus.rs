//! Tokenized multi-domain corpora: ingestion, on-disk shards and streaming.
//!
//! A corpus on disk is a directory holding `manifest.json` plus one or more
//! shard files. Each shard line is one [`Sample`] as JSON:
//! `{"id": "...", "domain": "...", "tokens": [..]}`.

use std::collections::hash_map::Entry;
use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsio;
use crate::hash::Fnv64;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const DEFAULT_SAMPLES_PER_SHARD: usize = 100_000;

/// One tokenized document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    pub tokens: Vec<u32>,
}

impl Sample {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub name: String,
    pub vocab_size: u32,
    pub domains: Vec<String>,
    /// Shard files, relative to the manifest's directory.
    pub shard_paths: Vec<PathBuf>,
    /// FNV-1a 64 of each shard's bytes, parallel to `shard_paths`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_checksums: Option<Vec<String>>,
    pub total_samples: u64,
    pub total_tokens: u64,
    /// End-of-text id, when the tokenizer defines one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_id: Option<u32>,
    /// Directory the manifest was loaded from; shard paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let mut m: CorpusManifest = fsio::read_json(&path)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(sums) = &m.shard_checksums {
            if sums.len() != m.shard_paths.len() {
                return Err(Error::data(format!(
                    "{}: {} checksums for {} shards",
                    path.display(),
                    sums.len(),
                    m.shard_paths.len()
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fsio::write_json(&self.root.join(MANIFEST_FILE), self)
    }

    pub fn shard_path(&self, i: usize) -> PathBuf {
        fsio::resolve(&self.root, &self.shard_paths[i])
    }

    /// Streams every sample in shard-then-line order.
    pub fn stream(&self) -> SampleStream<'_> {
        SampleStream::new(self, None)
    }

    /// Streams only samples whose id is in `filter`, preserving corpus order.
    pub fn stream_filtered<'a>(&'a self, filter: &'a HashSet<String>) -> SampleStream<'a> {
        SampleStream::new(self, Some(filter))
    }

    /// Raw shard lines in corpus order, for callers that parse in parallel.
    pub fn raw_lines(&self) -> RawLines<'_> {
        RawLines { manifest: self, shard: 0, reader: None, line_no: 0, checksum: Fnv64::default() }
    }

    /// Reads every sample and checks the manifest totals and vocabulary.
    pub fn verify(&self) -> Result<()> {
        let domains: HashSet<&str> = self.domains.iter().map(String::as_str).collect();
        let (mut samples, mut tokens) = (0u64, 0u64);
        for s in self.stream() {
            let s = s?;
            if !domains.contains(s.domain.as_str()) {
                return Err(Error::data(format!(
                    "sample {} has domain {:?} missing from manifest",
                    s.id, s.domain
                )));
            }
            samples += 1;
            tokens += s.n_tokens() as u64;
        }
        if samples != self.total_samples || tokens != self.total_tokens {
            return Err(Error::data(format!(
                "manifest {} claims {} samples/{} tokens, shards hold {samples}/{tokens}",
                self.name, self.total_samples, self.total_tokens
            )));
        }
        Ok(())
    }
}

/// How raw text becomes token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Tokenizer {
    /// Records already carry `tokens`; ids are checked against `vocab_size`.
    Passthrough { vocab_size: u32 },
    /// UTF-8 bytes map to ids 0..=255; id 256 is end-of-text.
    ByteLevel,
}

impl Tokenizer {
    pub const BYTE_EOT: u32 = 256;
    pub const BYTE_VOCAB: u32 = 257;

    pub fn eos_id(&self) -> Option<u32> {
        match self {
            Tokenizer::Passthrough { .. } => None,
            Tokenizer::ByteLevel => Some(Self::BYTE_EOT),
        }
    }

    pub fn vocab_size(&self) -> u32 {
        match *self {
            Tokenizer::Passthrough { vocab_size } => vocab_size,
            Tokenizer::ByteLevel => Self::BYTE_VOCAB,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::ByteLevel => Ok(encode_bytes(text.as_bytes())),
            Tokenizer::Passthrough { .. } => {
                Err(Error::data("passthrough tokenizer cannot tokenize raw text"))
            }
        }
    }
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of the byte-level tokenizer; end-of-text ids are dropped.
pub fn decode_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub name: String,
    pub tokenizer: Tokenizer,
    pub domain_field: String,
    pub samples_per_shard: usize,
}

impl IngestOptions {
    pub fn new(name: impl Into<String>, tokenizer: Tokenizer) -> Self {
        Self {
            name: name.into(),
            tokenizer,
            domain_field: "domain".into(),
            samples_per_shard: DEFAULT_SAMPLES_PER_SHARD,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Reject {
    line: usize,
    reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    pub rejected: usize,
}

fn parse_record(line: &str, opts: &IngestOptions) -> std::result::Result<Sample, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("malformed JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let id = obj
        .get("id")
        .and_then(|v| v.as_str())
        .ok_or("missing string field `id`")?
        .to_string();
    if id.is_empty() {
        return Err("empty `id`".into());
    }
    let domain = obj
        .get(&opts.domain_field)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing string field `{}`", opts.domain_field))?
        .to_string();
    let vocab = opts.tokenizer.vocab_size();
    let tokens = match (obj.get("tokens"), obj.get("text")) {
        (Some(toks), _) => {
            let arr = toks.as_array().ok_or("`tokens` is not an array")?;
            let mut out = Vec::with_capacity(arr.len());
            for t in arr {
                let t = t
                    .as_u64()
                    .filter(|&t| t < u64::from(vocab))
                    .ok_or_else(|| format!("token {t} is not an id below vocab_size {vocab}"))?;
                out.push(t as u32);
            }
            out
        }
        (None, Some(text)) => {
            let text = text.as_str().ok_or("`text` is not a string")?;
            opts.tokenizer.tokenize(text).map_err(|e| e.to_string())?
        }
        (None, None) => return Err("record has neither `text` nor `tokens`".into()),
    };
    if tokens.is_empty() {
        return Err("empty sample (zero tokens)".into());
    }
    Ok(Sample { id, domain, tokens })
}

/// Writes samples into numbered shard files and tracks manifest totals.
pub struct ShardWriter {
    dir: PathBuf,
    per_shard: usize,
    current: Option<(BufWriter<File>, PathBuf, usize)>,
    checksum: Fnv64,
    shard_paths: Vec<PathBuf>,
    checksums: Vec<String>,
    domains: BTreeSet<String>,
    total_samples: u64,
    total_tokens: u64,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn new(dir: &Path, per_shard: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            per_shard: per_shard.max(1),
            current: None,
            checksum: Fnv64::default(),
            shard_paths: Vec::new(),
            checksums: Vec::new(),
            domains: BTreeSet::new(),
            total_samples: 0,
            total_tokens: 0,
            buf: Vec::new(),
        })
    }

    fn close_current(&mut self) -> Result<()> {
        if let Some((mut w, tmp, _)) = self.current.take() {
            w.flush().at(&tmp)?;
            drop(w);
            let name = self.shard_paths.last().expect("open shard has a name");
            let dest = self.dir.join(name);
            std::fs::rename(&tmp, &dest).at(&dest)?;
            self.checksums.push(self.checksum.hex());
            self.checksum = Fnv64::default();
        }
        Ok(())
    }

    pub fn push(&mut self, sample: &Sample) -> Result<()> {
        if matches!(&self.current, Some((_, _, n)) if *n >= self.per_shard) {
            self.close_current()?;
        }
        if self.current.is_none() {
            let name = PathBuf::from(format!("shard-{:05}.jsonl", self.shard_paths.len()));
            let tmp = self.dir.join(format!("{}.tmp", name.display()));
            let f = File::create(&tmp).at(&tmp)?;
            self.current = Some((BufWriter::with_capacity(1 << 20, f), tmp, 0));
            self.shard_paths.push(name);
        }
        self.buf.clear();
        serde_json::to_writer(&mut self.buf, sample)
            .map_err(|e| Error::Internal(e.to_string()))?;
        self.buf.push(b'\n');
        self.checksum.update(&self.buf);
        let (w, tmp, n) = self.current.as_mut().expect("shard opened above");
        w.write_all(&self.buf).at(tmp)?;
        *n += 1;
        self.domains.insert(sample.domain.clone());
        self.total_samples += 1;
        self.total_tokens += sample.n_tokens() as u64;
        Ok(())
    }

    /// Closes the last shard and writes `manifest.json`.
    pub fn finish(
        mut self,
        name: &str,
        vocab_size: u32,
        eos_id: Option<u32>,
        extra_domains: &[String],
    ) -> Result<CorpusManifest> {
        self.close_current()?;
        self.domains.extend(extra_domains.iter().cloned());
        let manifest = CorpusManifest {
            name: name.to_string(),
            vocab_size,
            domains: self.domains.into_iter().collect(),
            shard_paths: self.shard_paths,
            shard_checksums: Some(self.checksums),
            total_samples: self.total_samples,
            total_tokens: self.total_tokens,
            eos_id,
            root: self.dir,
        };
        manifest.save()?;
        Ok(manifest)
    }
}

/// Converts line-delimited raw records into shards plus a manifest in `out_dir`.
///
/// Malformed records are written to `rejects.jsonl` and skipped; a duplicate
/// id aborts the ingest.
pub fn ingest(raw_path: &Path, out_dir: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    let mut writer = ShardWriter::new(out_dir, opts.samples_per_shard)?;
    let mut seen: FxHashMap<String, usize> = FxHashMap::default();
    let mut rejects = Vec::new();
    for item in fsio::lines(raw_path)? {
        let (line_no, line) = item?;
        let sample = match parse_record(&line, opts) {
            Ok(s) => s,
            Err(reason) => {
                warn!("{}:{line_no}: rejected: {reason}", raw_path.display());
                rejects.push(Reject { line: line_no, reason });
                continue;
            }
        };
        match seen.entry(sample.id.clone()) {
            Entry::Occupied(first) => {
                return Err(Error::record(
                    raw_path,
                    line_no,
                    format!("duplicate id {:?} (first seen on line {})", sample.id, first.get()),
                ));
            }
            Entry::Vacant(v) => {
                v.insert(line_no);
            }
        }
        writer.push(&sample)?;
    }
    let reject_path = out_dir.join(REJECTS_FILE);
    fsio::write_atomic(&reject_path, |w| {
        for r in &rejects {
            fsio::write_jsonl_line(w, r, &reject_path)?;
        }
        Ok(())
    })?;
    let manifest = writer.finish(&opts.name, opts.tokenizer.vocab_size(), opts.tokenizer.eos_id(), &[])?;
    info!(
        "ingested {} samples ({} tokens) into {} shard(s); {} rejected",
        manifest.total_samples,
        manifest.total_tokens,
        manifest.shard_paths.len(),
        rejects.len()
    );
    Ok(IngestReport { manifest, rejected: rejects.len() })
}

/// Raw lines of all shards, verifying checksums at each shard's end.
pub struct RawLines<'a> {
    manifest: &'a CorpusManifest,
    shard: usize,
    reader: Option<(BufReader<File>, PathBuf)>,
    line_no: usize,
    checksum: Fnv64,
}

/// A line of a shard with its location, for error messages.
#[derive(Debug, Clone)]
pub struct RawLine {
    pub shard: PathBuf,
    pub line_no: usize,
    pub text: String,
}

impl RawLine {
    pub fn parse(&self) -> Result<Sample> {
        serde_json::from_str(&self.text)
            .map_err(|e| Error::record(&self.shard, self.line_no, format!("bad sample: {e}")))
    }
}

impl Iterator for RawLines<'_> {
    type Item = Result<RawLine>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.reader.is_none() {
                if self.shard >= self.manifest.shard_paths.len() {
                    return None;
                }
                let path = self.manifest.shard_path(self.shard);
                match File::open(&path) {
                    Ok(f) => self.reader = Some((BufReader::with_capacity(1 << 20, f), path)),
                    Err(e) => {
                        self.shard = usize::MAX;
                        return Some(Err(Error::data(format!(
                            "missing shard {}: {e}",
                            path.display()
                        ))));
                    }
                }
                self.line_no = 0;
                self.checksum = Fnv64::default();
            }
            let (reader, path) = self.reader.as_mut().expect("opened above");
            let mut buf = String::new();
            match reader.read_line(&mut buf) {
                Ok(0) => {
                    let path = path.clone();
                    self.reader = None;
                    let idx = self.shard;
                    self.shard += 1;
                    if let Some(sums) = &self.manifest.shard_checksums {
                        let got = self.checksum.hex();
                        if sums[idx] != got {
                            self.shard = usize::MAX;
                            return Some(Err(Error::data(format!(
                                "shard {} checksum mismatch: manifest {}, file {got}",
                                path.display(),
                                sums[idx]
                            ))));
                        }
                    }
                }
                Ok(_) => {
                    self.checksum.update(buf.as_bytes());
                    self.line_no += 1;
                    if buf.ends_with('\n') {
                        buf.pop();
                    }
                    if buf.trim().is_empty() {
                        continue;
                    }
                    return Some(Ok(RawLine { shard: path.clone(), line_no: self.line_no, text: buf }));
                }
                Err(e) => {
                    let path = path.clone();
                    self.shard = usize::MAX;
                    return Some(Err(Error::Io { path, source: e }));
                }
            }
        }
    }
}

pub struct SampleStream<'a> {
    lines: RawLines<'a>,
    filter: Option<&'a HashSet<String>>,
}

impl<'a> SampleStream<'a> {
    fn new(manifest: &'a CorpusManifest, filter: Option<&'a HashSet<String>>) -> Self {
        Self { lines: manifest.raw_lines(), filter }
    }
}

impl Iterator for SampleStream<'_> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            let sample = match line.parse() {
                Ok(s) => s,
                Err(e) => return Some(Err(e)),
            };
            match self.filter {
                Some(f) if !f.contains(&sample.id) => continue,
                _ => return Some(Ok(sample)),
            }
        }
    }
}
