#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pplx_prune::corpus::{self, CorpusManifest, IngestOptions, Tokenizer};
use pplx_prune::synth::{self, SynthSpec};

pub const BIN: &str = env!("CARGO_BIN_EXE_pplx-prune");

/// Generates and ingests a byte-level synthetic corpus under `dir/corpus`.
pub fn synth_corpus(dir: &Path, n: usize, seed: u64) -> CorpusManifest {
    let raw = dir.join("raw.jsonl");
    synth::generate(&raw, &SynthSpec::new(n, seed)).unwrap();
    let opts = IngestOptions::new(format!("synth-{n}"), Tokenizer::ByteLevel);
    let report = corpus::ingest(&raw, &dir.join("corpus"), &opts).unwrap();
    assert_eq!(report.rejected, 0);
    report.manifest
}

pub const CONFIG: &str = r#"seed = 17

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

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("pplx.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `root` (relative path -> bytes), minus `skip` names.
pub fn tree(root: &Path, skip: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, skip, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, skip, &mut out);
    out
}
