//! Line-delimited JSON artifacts with content digests.
//!
//! Every artifact is written to a temporary file next to its destination
//! and renamed into place on [`JsonlWriter::finish`], so a failed write never
//! leaves a truncated file behind.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents, streamed.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Streaming writer for one-object-per-line files.
pub struct JsonlWriter {
    dest: PathBuf,
    tmp: BufWriter<NamedTempFile>,
    hasher: Sha256,
    lines: usize,
}

impl JsonlWriter {
    pub fn create(dest: impl AsRef<Path>) -> Result<Self> {
        let dest = dest.as_ref().to_path_buf();
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dest,
            tmp: BufWriter::new(tmp),
            hasher: Sha256::new(),
            lines: 0,
        })
    }

    pub fn write<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        self.hasher.update(&line);
        self.tmp
            .write_all(&line)
            .map_err(|e| Error::io(&self.dest, e))?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    /// Flushes, renames into place and returns the content digest.
    pub fn finish(self) -> Result<String> {
        let dest = self.dest;
        let tmp = self
            .tmp
            .into_inner()
            .map_err(|e| Error::io(&dest, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&dest, e))?;
        tmp.persist(&dest).map_err(|e| Error::io(&dest, e.error))?;
        Ok(hex::encode(self.hasher.finalize()))
    }
}

/// Writes a single pretty JSON document atomically and returns its digest.
pub fn write_json<T: Serialize + ?Sized>(dest: impl AsRef<Path>, value: &T) -> Result<String> {
    let dest = dest.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(dest, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_bytes(dest: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(dest, e))?;
    tmp.persist(dest).map_err(|e| Error::io(dest, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Iterates `(line_number, parsed)` over a JSONL file, skipping blank lines.
/// Line numbers are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<(usize, T)>>> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let lines = BufReader::new(file).lines();
    Ok(lines.enumerate().filter_map(move |(idx, line)| {
        let line_no = idx + 1;
        match line {
            Err(e) => Some(Err(Error::io(&path, e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(serde_json::from_str(&l).map(|v| (line_no, v)).map_err(|e| {
                Error::Record {
                    line: line_no,
                    message: e.to_string(),
                }
            })),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_digest_matches_file_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let mut w = JsonlWriter::create(&path).unwrap();
        w.write(&serde_json::json!({"a": 1})).unwrap();
        w.write(&serde_json::json!({"b": "ü"})).unwrap();
        let digest = w.finish().unwrap();
        assert_eq!(digest, file_digest(&path).unwrap());
        let rows: Vec<(usize, serde_json::Value)> =
            read_jsonl(&path).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].0, 2);
    }

    #[test]
    fn dropped_writer_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.jsonl");
        {
            let mut w = JsonlWriter::create(&path).unwrap();
            w.write(&1).unwrap();
        }
        assert!(!path.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
