//! File helpers shared by every artifact writer.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `path` by filling a sibling temp file and renaming it into place,
/// so readers never observe a partially written artifact.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).at(parent)?;
        }
    }
    let tmp = temp_path(path);
    let file = File::create(&tmp).at(&tmp)?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    fill(&mut w)?;
    w.flush().at(&tmp)?;
    w.into_inner()
        .map_err(|e| Error::Io { path: tmp.clone(), source: e.into_error() })?
        .sync_all()
        .at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| Error::Internal(format!("serializing {}: {e}", path.display())))?;
        w.write_all(b"\n").at(path)
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).at(path)?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()).at(path))
}

/// Serializes one value as a JSON line.
pub fn write_jsonl_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value)
        .map_err(|e| Error::Internal(format!("serializing {}: {e}", path.display())))?;
    w.write_all(b"\n").at(path)
}

/// Iterates `(1-based line number, line)` over a text file, skipping blank lines.
pub fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>>> {
    let file = File::open(path).at(path)?;
    let reader = BufReader::with_capacity(1 << 20, file);
    let path = path.to_path_buf();
    Ok(reader
        .lines()
        .enumerate()
        .map(move |(i, line)| line.at(&path).map(|l| (i + 1, l)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

/// Resolves `rel` against `base` unless it is already absolute.
pub fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.join(rel)
    }
}
