//! Conversation data model and streaming corpus ingest/emit.
//!
//! The canonical record is one JSON object per line:
//!
//! ```text
//! {"id": "...", "dataset": "...", "turns": [{"role": "user", "content": "..."}, ...],
//!  "category": "Math", "embedding": [...], "scores": {...}}
//! ```
//!
//! `id`, `category`, `embedding` and `scores` are optional on input. Sources
//! with a different shape are mapped onto this one by a [`FieldMapping`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::CategoryLabel;
use crate::error::{Error, Result};
use crate::io::{self, JsonlWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Scores computed outside the pipeline and carried on the record.
///
/// Per-turn vectors are indexed by exchange (user/assistant pair), not by
/// raw turn. `None` entries mean "not available, ask the scorer".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_categories: Option<Vec<CategoryLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deita_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deita_complexity: Option<f64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub dataset: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<CategoryLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PrecomputedScores>,
}

impl Conversation {
    /// Builds a conversation from alternating turns, validating the shape.
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let conv = Self {
            id: id.into(),
            dataset: dataset.into(),
            turns,
            category: None,
            embedding: None,
            scores: None,
        };
        conv.validate()?;
        Ok(conv)
    }

    /// Single-turn convenience constructor.
    pub fn single(
        id: impl Into<String>,
        dataset: impl Into<String>,
        instruction: impl Into<String>,
        response: impl Into<String>,
    ) -> Result<Self> {
        Self::new(
            id,
            dataset,
            vec![Turn::user(instruction), Turn::assistant(response)],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::precondition("empty id"));
        }
        if self.turns.is_empty() {
            return Err(Error::precondition("conversation has no turns"));
        }
        if self.turns.len() % 2 != 0 {
            return Err(Error::precondition(
                "every user turn needs a following assistant turn",
            ));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(Error::precondition(format!(
                    "turn {i} should be {expected:?}, found {:?}",
                    turn.role
                )));
            }
            if turn.role == Role::Assistant && turn.content.trim().is_empty() {
                return Err(Error::precondition(format!("assistant turn {i} is empty")));
            }
        }
        if let Some(emb) = &self.embedding {
            if emb.iter().any(|x| !x.is_finite()) {
                return Err(Error::precondition("embedding has non-finite values"));
            }
        }
        Ok(())
    }

    /// Number of (user, assistant) exchanges.
    pub fn turn_count(&self) -> usize {
        self.turns.len() / 2
    }

    /// Iterates `(instruction, response)` pairs in order.
    pub fn exchanges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.turns
            .chunks_exact(2)
            .map(|pair| (pair[0].content.as_str(), pair[1].content.as_str()))
    }

    /// All user turns joined by blank lines.
    pub fn user_text(&self) -> String {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Total characters (Unicode scalar values) over assistant turns.
    pub fn response_chars(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .map(|t| t.content.chars().count())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub record_count: usize,
    pub per_dataset: BTreeMap<String, usize>,
    pub digest: String,
}

/// Sidecar path for a corpus file: `<file>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Field mapping from a foreign record shape onto [`Conversation`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum FieldMapping {
    /// One prompt/response pair. Non-empty prompt fields are joined with a
    /// blank line (e.g. alpaca's `instruction` + `input`).
    SingleTurn {
        #[serde(default)]
        id: Option<String>,
        prompt: Vec<String>,
        response: String,
    },
    /// A list of role-tagged messages.
    MultiTurn {
        #[serde(default)]
        id: Option<String>,
        turns: String,
        role: String,
        content: String,
        user_roles: Vec<String>,
        assistant_roles: Vec<String>,
        #[serde(default)]
        skip_roles: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Canonical,
    Mapped(FieldMapping),
}

impl InputFormat {
    pub const PRESETS: [&'static str; 4] = ["canonical", "alpaca", "sharegpt", "messages"];

    /// Built-in adapters for common public dataset shapes.
    pub fn preset(name: &str) -> Option<Self> {
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Some(match name {
            "canonical" => InputFormat::Canonical,
            "alpaca" => InputFormat::Mapped(FieldMapping::SingleTurn {
                id: None,
                prompt: strings(&["instruction", "input"]),
                response: "output".into(),
            }),
            "sharegpt" => InputFormat::Mapped(FieldMapping::MultiTurn {
                id: Some("id".into()),
                turns: "conversations".into(),
                role: "from".into(),
                content: "value".into(),
                user_roles: strings(&["human", "user"]),
                assistant_roles: strings(&["gpt", "assistant", "chatgpt", "bard", "bing"]),
                skip_roles: strings(&["system"]),
            }),
            "messages" => InputFormat::Mapped(FieldMapping::MultiTurn {
                id: Some("id".into()),
                turns: "messages".into(),
                role: "role".into(),
                content: "content".into(),
                user_roles: strings(&["user"]),
                assistant_roles: strings(&["assistant"]),
                skip_roles: strings(&["system", "tool"]),
            }),
            _ => return None,
        })
    }
}

#[derive(Deserialize)]
struct CanonicalRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    dataset: Option<String>,
    turns: Vec<Turn>,
    #[serde(default)]
    category: Option<CategoryLabel>,
    #[serde(default)]
    embedding: Option<Vec<f32>>,
    #[serde(default)]
    scores: Option<PrecomputedScores>,
}

fn field_str<'a>(obj: &'a Value, key: &str) -> std::result::Result<Option<&'a str>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(Value::Number(_)) => Err(format!("field `{key}` must be a string")),
        Some(_) => Err(format!("field `{key}` must be a string")),
    }
}

fn id_field(obj: &Value, key: &Option<String>) -> std::result::Result<Option<String>, String> {
    let Some(key) = key else { return Ok(None) };
    Ok(match obj.get(key) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        Some(_) => return Err(format!("field `{key}` must be a string or number")),
    })
}

impl FieldMapping {
    fn apply(&self, obj: &Value) -> std::result::Result<(Option<String>, Vec<Turn>), String> {
        if !obj.is_object() {
            return Err("record is not a JSON object".into());
        }
        match self {
            FieldMapping::SingleTurn {
                id,
                prompt,
                response,
            } => {
                let mut parts = Vec::new();
                for key in prompt {
                    if let Some(s) = field_str(obj, key)? {
                        if !s.trim().is_empty() {
                            parts.push(s);
                        }
                    }
                }
                if parts.is_empty() {
                    return Err("no prompt fields present".into());
                }
                let resp = field_str(obj, response)?
                    .ok_or_else(|| format!("missing field `{response}`"))?;
                Ok((
                    id_field(obj, id)?,
                    vec![Turn::user(parts.join("\n\n")), Turn::assistant(resp)],
                ))
            }
            FieldMapping::MultiTurn {
                id,
                turns,
                role,
                content,
                user_roles,
                assistant_roles,
                skip_roles,
            } => {
                let list = obj
                    .get(turns)
                    .and_then(Value::as_array)
                    .ok_or_else(|| format!("missing array `{turns}`"))?;
                let mut out = Vec::with_capacity(list.len());
                for msg in list {
                    let r = field_str(msg, role)?.ok_or_else(|| format!("message without `{role}`"))?;
                    if skip_roles.iter().any(|s| s == r) {
                        continue;
                    }
                    let text = field_str(msg, content)?
                        .ok_or_else(|| format!("message without `{content}`"))?;
                    let role = if user_roles.iter().any(|s| s == r) {
                        Role::User
                    } else if assistant_roles.iter().any(|s| s == r) {
                        Role::Assistant
                    } else {
                        return Err(format!("unknown role `{r}`"));
                    };
                    out.push(Turn {
                        role,
                        content: text.to_string(),
                    });
                }
                Ok((id_field(obj, id)?, out))
            }
        }
    }
}

/// Streaming reader over a line-delimited corpus file.
///
/// Yields one item per non-blank line. Malformed records come back as
/// [`Error::Record`] and are counted in [`CorpusReader::rejected`]; the
/// reader keeps going. An I/O error ends the stream.
pub struct CorpusReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    format: InputFormat,
    dataset: String,
    accepted: usize,
    rejected: usize,
    failed: bool,
}

impl CorpusReader {
    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn parse_line(&self, line: &str) -> std::result::Result<Conversation, String> {
        let conv = match &self.format {
            InputFormat::Canonical => {
                let rec: CanonicalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
                let dataset = rec.dataset.unwrap_or_else(|| self.dataset.clone());
                let id = rec
                    .id
                    .unwrap_or_else(|| format!("{dataset}:{}", self.line_no));
                Conversation {
                    id,
                    dataset,
                    turns: rec.turns,
                    category: rec.category,
                    embedding: rec.embedding,
                    scores: rec.scores,
                }
            }
            InputFormat::Mapped(mapping) => {
                let obj: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
                let (id, turns) = mapping.apply(&obj)?;
                let dataset = self.dataset.clone();
                let id = id.unwrap_or_else(|| format!("{dataset}:{}", self.line_no));
                Conversation {
                    id,
                    dataset,
                    turns,
                    category: None,
                    embedding: None,
                    scores: None,
                }
            }
        };
        conv.validate().map_err(|e| e.to_string())?;
        Ok(conv)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Conversation>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(match self.parse_line(&line) {
                Ok(conv) => {
                    self.accepted += 1;
                    Ok(conv)
                }
                Err(message) => {
                    self.rejected += 1;
                    tracing::warn!(path = %self.path.display(), line = self.line_no, %message, "rejected record");
                    Err(Error::Record {
                        line: self.line_no,
                        message,
                    })
                }
            });
        }
    }
}

/// Opens a corpus for streaming. `dataset` names records that don't carry
/// their own; it defaults to the file stem.
pub fn ingest(path: impl AsRef<Path>, format: &InputFormat, dataset: Option<&str>) -> Result<CorpusReader> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let dataset = dataset.map(str::to_string).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into())
    });
    Ok(CorpusReader {
        lines: BufReader::new(file).lines(),
        path,
        line_no: 0,
        format: format.clone(),
        dataset,
        accepted: 0,
        rejected: 0,
        failed: false,
    })
}

/// Writes conversations in canonical form plus the manifest sidecar.
pub fn emit<'a, I>(samples: I, path: impl AsRef<Path>, corpus_id: &str) -> Result<CorpusManifest>
where
    I: IntoIterator<Item = &'a Conversation>,
{
    let path = path.as_ref();
    let mut writer = JsonlWriter::create(path)?;
    let mut per_dataset = BTreeMap::new();
    for conv in samples {
        writer.write(conv)?;
        *per_dataset.entry(conv.dataset.clone()).or_insert(0) += 1;
    }
    let record_count = writer.lines();
    let digest = writer.finish()?;
    let manifest = CorpusManifest {
        corpus_id: corpus_id.to_string(),
        record_count,
        per_dataset,
        digest,
    };
    io::write_json(manifest_path(path), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    const GOOD: &str = r#"{"dataset":"d","turns":[{"role":"user","content":"hi"},{"role":"assistant","content":"hello"}]}"#;

    #[test]
    fn three_good_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "x.jsonl", &[GOOD, GOOD, GOOD]);
        let mut reader = ingest(&p, &InputFormat::Canonical, None).unwrap();
        let convs: Vec<_> = reader.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(convs.len(), 3);
        assert_eq!(reader.rejected(), 0);
        assert_eq!(convs[1].id, "d:2");
    }

    #[test]
    fn one_malformed_of_four() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"dataset":"d","turns":[{"role":"assistant","content":"x"}]}"#;
        let p = write_lines(dir.path(), "x.jsonl", &[GOOD, bad, GOOD, GOOD]);
        let mut reader = ingest(&p, &InputFormat::Canonical, None).unwrap();
        let items: Vec<_> = reader.by_ref().collect();
        let ok = items.iter().filter(|r| r.is_ok()).count();
        assert_eq!(ok, 3);
        assert_eq!(reader.rejected(), 1);
        match &items[1] {
            Err(Error::Record { line, .. }) => assert_eq!(*line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn not_json_is_rejected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "x.jsonl", &["{nope", GOOD]);
        let mut reader = ingest(&p, &InputFormat::Canonical, None).unwrap();
        let n = reader.by_ref().filter(|r| r.is_ok()).count();
        assert_eq!((n, reader.rejected()), (1, 1));
    }

    #[test]
    fn empty_file_and_empty_emit() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "empty.jsonl", &[]);
        assert_eq!(ingest(&p, &InputFormat::Canonical, None).unwrap().count(), 0);
        let out = dir.path().join("out.jsonl");
        let m = emit(std::iter::empty(), &out, "c").unwrap();
        assert_eq!(m.record_count, 0);
        assert!(m.per_dataset.is_empty());
        let side: CorpusManifest = io::read_json(manifest_path(&out)).unwrap();
        assert_eq!(side, m);
    }

    #[test]
    fn unreadable_file_is_fatal() {
        assert!(matches!(
            ingest("/definitely/not/here.jsonl", &InputFormat::Canonical, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ids_are_stable_across_reingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "s.jsonl", &[GOOD, "", GOOD]);
        let ids = |p: &Path| {
            ingest(p, &InputFormat::Canonical, Some("src"))
                .unwrap()
                .map(|c| c.unwrap().id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&p), ids(&p));
        // blank lines still advance the line counter
        assert_eq!(ids(&p), vec!["d:1", "d:3"]);
    }

    #[test]
    fn unicode_content_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let content = "数学の問題 🧮 — naïve café \u{1F600}\u{200D}\u{1F4BB}";
        let conv = Conversation::single("u1", "cjk", content, "答え: 42 ✅").unwrap();
        let out = dir.path().join("u.jsonl");
        emit([&conv], &out, "u").unwrap();
        let back: Vec<_> = ingest(&out, &InputFormat::Canonical, None)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back[0].turns[0].content.as_bytes(), content.as_bytes());
        assert_eq!(back[0], conv);
    }

    #[test]
    fn alpaca_and_sharegpt_presets() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "alpaca.jsonl",
            &[r#"{"instruction":"Sum","input":"1 2","output":"3"}"#, r#"{"instruction":"Hi","input":"","output":"Hey"}"#],
        );
        let convs: Vec<_> = ingest(&p, &InputFormat::preset("alpaca").unwrap(), None)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(convs[0].turns[0].content, "Sum\n\n1 2");
        assert_eq!(convs[1].turns[0].content, "Hi");
        assert_eq!(convs[0].dataset, "alpaca");

        let p = write_lines(
            dir.path(),
            "sg.jsonl",
            &[r#"{"id":"q7","conversations":[{"from":"system","value":"be nice"},{"from":"human","value":"a"},{"from":"gpt","value":"b"},{"from":"human","value":"c"},{"from":"gpt","value":"d"}]}"#],
        );
        let convs: Vec<_> = ingest(&p, &InputFormat::preset("sharegpt").unwrap(), Some("sharegpt"))
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(convs[0].id, "q7");
        assert_eq!(convs[0].turn_count(), 2);
        assert_eq!(convs[0].exchanges().nth(1), Some(("c", "d")));
    }

    #[test]
    fn response_chars_sums_assistant_turns() {
        let conv = Conversation::new(
            "a",
            "d",
            vec![
                Turn::user("xxxxxxxx"),
                Turn::assistant("abc"),
                Turn::user("y"),
                Turn::assistant("日本語!"),
            ],
        )
        .unwrap();
        assert_eq!(conv.response_chars(), 7);
    }
}
