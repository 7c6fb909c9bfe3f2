//! Per-stage cache records under `<output_dir>/.cache/`.
//!
//! A stage is skipped when its record's key matches the current key (stage
//! name, config digest and the digests of everything it reads) and every
//! output it recorded is still on disk with the same digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    /// Output file name (relative to the output dir) to content digest.
    pub outputs: BTreeMap<String, String>,
}

pub fn cache_key(stage: &str, config_digest: &str, inputs: &BTreeMap<String, String>) -> String {
    let mut text = format!("{stage}\n{config_digest}\n");
    for (name, digest) in inputs {
        text.push_str(&format!("{name}={digest}\n"));
    }
    io::sha256_hex(text.as_bytes())
}

fn record_path(output_dir: &Path, stage: &str) -> PathBuf {
    output_dir.join(".cache").join(format!("{stage}.json"))
}

/// Whether the stored record for `stage` is valid for `key`. Stale or
/// damaged records are reported and treated as misses.
pub fn is_fresh(output_dir: &Path, stage: &str, key: &str) -> bool {
    let path = record_path(output_dir, stage);
    if !path.exists() {
        return false;
    }
    let record: CacheRecord = match io::read_json(&path) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(stage, error = %e, "unreadable cache record; recomputing");
            return false;
        }
    };
    if record.key != key {
        tracing::warn!(stage, "inputs or config changed since the cached run; recomputing");
        return false;
    }
    for (name, digest) in &record.outputs {
        match io::file_digest(&output_dir.join(name)) {
            Ok(d) if &d == digest => {}
            _ => {
                tracing::warn!(stage, output = %name, "cached output missing or modified; recomputing");
                return false;
            }
        }
    }
    true
}

pub fn store(output_dir: &Path, stage: &str, key: &str, outputs: &BTreeMap<String, String>) -> Result<()> {
    io::write_json(
        record_path(output_dir, stage),
        &CacheRecord {
            key: key.to_string(),
            outputs: outputs.clone(),
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_only_when_key_and_outputs_match() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        std::fs::write(out.join("a.txt"), "alpha").unwrap();
        let inputs = BTreeMap::from([("corpus".to_string(), "d1".to_string())]);
        let key = cache_key("ingest", "cfg", &inputs);
        assert!(!is_fresh(out, "ingest", &key));
        let outputs = BTreeMap::from([("a.txt".to_string(), io::file_digest(&out.join("a.txt")).unwrap())]);
        store(out, "ingest", &key, &outputs).unwrap();
        assert!(is_fresh(out, "ingest", &key));
        assert!(!is_fresh(out, "ingest", &cache_key("ingest", "cfg2", &inputs)));
        std::fs::write(out.join("a.txt"), "beta").unwrap();
        assert!(!is_fresh(out, "ingest", &key));
    }
}
