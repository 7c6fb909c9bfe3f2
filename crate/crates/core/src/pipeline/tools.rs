//! File-level helpers outside the main run: skewed pool construction and
//! difficulty regression targets.

use std::collections::HashMap;
use std::path::Path;

use super::{read_artifact, Header, LabelRow};
use crate::classifier::CategoryLabel;
use crate::corpus::{self, Conversation, InputFormat};
use crate::difficulty::{build_targets, EvalMatrix, MetricBounds};
use crate::error::{Error, Result};
use crate::io::{self, JsonlWriter};
use crate::sampler::{build_skewed_pool, SkewedPool};

/// Keeps two randomly chosen categories whole and `residue_fraction` of
/// every other one. Categories come from `labels` when given, else from each
/// record's own `category`. Writes the kept records, in input order, to
/// `out` with a manifest sidecar.
pub fn skew_corpus(
    corpus_path: &Path,
    labels: Option<&Path>,
    seed: u64,
    residue_fraction: f64,
    out: &Path,
) -> Result<SkewedPool> {
    let mut convs: Vec<Conversation> = Vec::new();
    let mut reader = corpus::ingest(corpus_path, &InputFormat::Canonical, None)?;
    for item in reader.by_ref() {
        convs.push(item?);
    }
    let by_label: HashMap<String, CategoryLabel> = match labels {
        Some(p) => {
            let (_, rows): (Header, Vec<LabelRow>) = read_artifact(p)?;
            rows.into_iter().map(|r| (r.id, r.category)).collect()
        }
        None => HashMap::new(),
    };
    let items = convs
        .iter()
        .map(|c| {
            by_label
                .get(&c.id)
                .copied()
                .or(c.category)
                .map(|l| (c.id.clone(), l))
                .ok_or_else(|| Error::precondition(format!("`{}` has no category; pass a labels file", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = build_skewed_pool(&items, seed, residue_fraction)?;
    let kept: std::collections::HashSet<&str> = pool.kept.iter().map(String::as_str).collect();
    let corpus_id = io::sha256_hex(format!("skew:{}:{seed}:{residue_fraction}", io::file_digest(corpus_path)?).as_bytes());
    corpus::emit(convs.iter().filter(|c| kept.contains(c.id.as_str())), out, &corpus_id)?;
    Ok(pool)
}

/// Turns an evaluation matrix file into `{item_id, target}` lines.
/// `bounds` is a JSON object of `metric: [min, max]`; built-in bounds apply
/// when it is absent. Returns the number of targets written.
pub fn difficulty_targets_file(matrix: &Path, bounds: Option<&Path>, out: &Path) -> Result<usize> {
    let m = EvalMatrix::load(matrix)?;
    let bounds = match bounds {
        Some(p) => {
            let mut b = MetricBounds::default();
            let extra: MetricBounds = io::read_json(p)?;
            b.0.extend(extra.0);
            b
        }
        None => MetricBounds::default(),
    };
    let targets = build_targets(&m, &bounds)?;
    let dropped = m.item_count() - targets.len();
    if dropped > 0 {
        tracing::info!(dropped, "items every model scored zero were dropped");
    }
    let mut w = JsonlWriter::create(out)?;
    for t in &targets {
        w.write(t)?;
    }
    w.finish()?;
    Ok(targets.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::difficulty::DifficultyTarget;

    #[test]
    fn skew_keeps_two_categories_whole() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("pool.jsonl");
        let mut convs = Vec::new();
        for l in CategoryLabel::ALL {
            for i in 0..20 {
                let mut c = Conversation::new(
                    format!("{}-{i:02}", l.name()),
                    "d",
                    vec![Turn::user("q"), Turn::assistant("a")],
                )
                .unwrap();
                c.category = Some(l);
                convs.push(c);
            }
        }
        corpus::emit(&convs, &src, "src").unwrap();
        let out = dir.path().join("skewed.jsonl");
        let pool = skew_corpus(&src, None, 5, 0.1, &out).unwrap();
        assert_eq!(pool.chosen.len(), 2);
        assert_eq!(pool.kept.len(), 40 + 5 * 2);
        let again = skew_corpus(&src, None, 5, 0.1, &dir.path().join("again.jsonl")).unwrap();
        assert_eq!(pool, again);
        assert_eq!(
            io::file_digest(&out).unwrap(),
            io::file_digest(&dir.path().join("again.jsonl")).unwrap()
        );
    }

    #[test]
    fn targets_from_matrix_file() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = dir.path().join("m.jsonl");
        let rows = [
            ("a", "m1", 1.0),
            ("a", "m2", 0.0),
            ("b", "m1", 0.0),
            ("b", "m2", 0.0),
        ];
        let text: String = rows
            .iter()
            .map(|(i, m, v)| {
                format!(
                    "{{\"item_id\":\"{i}\",\"dataset\":\"d\",\"model\":\"{m}\",\"metric\":\"acc\",\"value\":{v}}}\n"
                )
            })
            .collect();
        std::fs::write(&matrix, text).unwrap();
        let out = dir.path().join("t.jsonl");
        assert_eq!(difficulty_targets_file(&matrix, None, &out).unwrap(), 1);
        let t: Vec<DifficultyTarget> = io::read_jsonl(&out).unwrap().map(|r| r.unwrap().1).collect();
        assert_eq!(t[0].item_id, "a");
        // single item per slice: centering leaves 0
        assert_eq!(t[0].target, 0.0);
    }
}
