//! Client side of the scorer wire protocol.
//!
//! Every model-backed judgment goes through one envelope:
//!
//! ```text
//! POST <base_url>/v1/score/<kind>
//! {"kind": "...", "inputs": [...], "params": {...}}
//! -> {"outputs": [...]}                       (2xx)
//! -> {"error": {"code": "...", "message": "..."}}  (non-2xx)
//! ```
//!
//! Inputs are split into batches of `batch_size`; each batch is retried up
//! to `max_retries` times on transport errors or malformed replies, and the
//! outputs are merged back by input index. Batches run on the caller's rayon
//! pool, so the worker count is whatever pool the caller installs.

pub mod http;
pub mod mock;
pub mod prompts;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error as ThisError;

use crate::corpus::Turn;
use crate::error::{Error, Result};
use crate::quality::CodeReview;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Embed,
    Prm,
    CodeReview,
    ConstraintAnnotate,
    Judge,
    DeitaQuality,
    DeitaComplexity,
    Difficulty,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 8] = [
        ScorerKind::Embed,
        ScorerKind::Prm,
        ScorerKind::CodeReview,
        ScorerKind::ConstraintAnnotate,
        ScorerKind::Judge,
        ScorerKind::DeitaQuality,
        ScorerKind::DeitaComplexity,
        ScorerKind::Difficulty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Embed => "embed",
            ScorerKind::Prm => "prm",
            ScorerKind::CodeReview => "code_review",
            ScorerKind::ConstraintAnnotate => "constraint_annotate",
            ScorerKind::Judge => "judge",
            ScorerKind::DeitaQuality => "deita_quality",
            ScorerKind::DeitaComplexity => "deita_complexity",
            ScorerKind::Difficulty => "difficulty",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerEndpoint {
    pub kind: ScorerKind,
    pub base_url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub batch_size: usize,
}

impl ScorerEndpoint {
    pub fn new(kind: ScorerKind, base_url: impl Into<String>) -> Self {
        Self {
            kind,
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            batch_size: 32,
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/score/{}", self.base_url.trim_end_matches('/'), self.kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{}: batch_size must be >= 1", self.kind)));
        }
        if self.timeout.is_zero() {
            return Err(Error::Config(format!("{}: timeout must be > 0", self.kind)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub kind: ScorerKind,
    pub inputs: Vec<Value>,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReply {
    #[serde(default)]
    pub outputs: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Debug, Clone, ThisError)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Io(String),
    #[error("service returned {status} ({code}): {message}")]
    Status { status: u16, code: String, message: String },
    #[error("undecodable reply: {0}")]
    Decode(String),
}

/// Carries one request to a scorer service and brings back its reply.
pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &ScorerEndpoint, request: &ScoreRequest) -> std::result::Result<ScoreReply, TransportError>;
}

/// Raw judge text and the object parsed out of it, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct JudgeVerdict<T> {
    pub raw_text: String,
    pub parsed: Option<T>,
}

impl<T> JudgeVerdict<T> {
    /// Finds the first JSON object embedded in `raw_text` and hands it to
    /// `shape`. `parsed` is `None` when no object is found or `shape`
    /// rejects it.
    pub fn parse(raw_text: impl Into<String>, shape: impl FnOnce(&Map<String, Value>) -> Option<T>) -> Self {
        let raw_text = raw_text.into();
        let parsed = extract_json_object(&raw_text).and_then(|obj| shape(&obj));
        Self { raw_text, parsed }
    }
}

/// First `{...}` in `text` that parses as a JSON object.
pub fn extract_json_object(text: &str) -> Option<Map<String, Value>> {
    text.char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(obj))) => Some(obj),
                _ => None,
            }
        })
}

fn reply_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(true),
            "false" | "no" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn as_finite(v: &Value) -> std::result::Result<f64, String> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite number, got {v}"))
}

#[derive(Debug, Default)]
struct Metrics {
    requests: AtomicU64,
    retries: AtomicU64,
    failed_batches: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub retries: u64,
    pub failed_batches: u64,
}

type Decoder<'a, T> = &'a (dyn Fn(usize, &Value) -> std::result::Result<T, String> + Sync);

#[derive(Default)]
struct RoutingTransport {
    mock: mock::MockScorer,
    http: http::HttpTransport,
}

impl Transport for RoutingTransport {
    fn send(&self, endpoint: &ScorerEndpoint, request: &ScoreRequest) -> std::result::Result<ScoreReply, TransportError> {
        if endpoint.base_url.starts_with("mock://") {
            self.mock.send(endpoint, request)
        } else {
            self.http.send(endpoint, request)
        }
    }
}

/// Typed, batching, retrying front-end over a [`Transport`].
pub struct Gateway {
    transport: Arc<dyn Transport>,
    endpoints: BTreeMap<ScorerKind, ScorerEndpoint>,
    params: Map<String, Value>,
    metrics: Metrics,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>, endpoints: impl IntoIterator<Item = ScorerEndpoint>) -> Result<Self> {
        let endpoints: BTreeMap<_, _> = endpoints.into_iter().map(|e| (e.kind, e)).collect();
        for e in endpoints.values() {
            e.validate()?;
        }
        Ok(Self {
            transport,
            endpoints,
            params: Map::new(),
            metrics: Metrics::default(),
        })
    }

    /// All kinds served by `transport` at one base URL with the same limits.
    pub fn uniform(transport: Arc<dyn Transport>, template: &ScorerEndpoint) -> Result<Self> {
        Self::new(
            transport,
            ScorerKind::ALL.into_iter().map(|kind| ScorerEndpoint {
                kind,
                ..template.clone()
            }),
        )
    }

    /// In-process deterministic scorer with default settings.
    pub fn mock() -> Self {
        Self::uniform(Arc::new(mock::MockScorer::default()), &ScorerEndpoint::new(ScorerKind::Embed, "mock://"))
            .expect("default endpoint is valid")
    }

    /// Endpoints whose base URL is `mock://` are served in-process by
    /// [`mock::MockScorer`]; the rest go over HTTP.
    pub fn routed(endpoints: impl IntoIterator<Item = ScorerEndpoint>) -> Result<Self> {
        Self::new(Arc::new(RoutingTransport::default()), endpoints)
    }

    /// Extra parameters forwarded with every request (e.g. decoding
    /// temperature).
    pub fn with_params(mut self, params: Map<String, Value>) -> Self {
        self.params = params;
        self
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            requests: self.metrics.requests.load(Ordering::Relaxed),
            retries: self.metrics.retries.load(Ordering::Relaxed),
            failed_batches: self.metrics.failed_batches.load(Ordering::Relaxed),
        }
    }

    pub fn endpoint(&self, kind: ScorerKind) -> Result<&ScorerEndpoint> {
        self.endpoints
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no endpoint configured for `{kind}`")))
    }

    fn params_for(&self, prompt: Option<&prompts::Prompt>) -> Map<String, Value> {
        let mut params = self.params.clone();
        if let Some(p) = prompt {
            params.insert("prompt_id".into(), Value::String(p.id()));
            params.insert("prompt".into(), Value::String(p.template.to_string()));
        }
        params
    }

    fn call<T: Send>(
        &self,
        kind: ScorerKind,
        inputs: Vec<Value>,
        params: Map<String, Value>,
        decode: Decoder<'_, T>,
    ) -> Result<Vec<Result<T>>> {
        let endpoint = self.endpoint(kind)?;
        let batches: Vec<(usize, &[Value])> = inputs
            .chunks(endpoint.batch_size)
            .enumerate()
            .map(|(i, c)| (i * endpoint.batch_size, c))
            .collect();
        let run = |&(offset, batch): &(usize, &[Value])| self.run_batch(endpoint, offset, batch, &params, decode);
        let results: Vec<Vec<Result<T>>> = if batches.len() > 1 {
            batches.par_iter().map(run).collect()
        } else {
            batches.iter().map(run).collect()
        };
        Ok(results.into_iter().flatten().collect())
    }

    fn run_batch<T>(
        &self,
        endpoint: &ScorerEndpoint,
        offset: usize,
        batch: &[Value],
        params: &Map<String, Value>,
        decode: Decoder<'_, T>,
    ) -> Vec<Result<T>> {
        let request = ScoreRequest {
            kind: endpoint.kind,
            inputs: batch.to_vec(),
            params: params.clone(),
        };
        let fail = |msg: &str| Error::Gateway {
            kind: endpoint.kind.to_string(),
            message: msg.to_string(),
        };
        let mut last_error = String::new();
        let mut partial: Option<Vec<std::result::Result<T, String>>> = None;
        for attempt in 0..=endpoint.max_retries {
            if attempt > 0 {
                self.metrics.retries.fetch_add(1, Ordering::Relaxed);
            }
            self.metrics.requests.fetch_add(1, Ordering::Relaxed);
            let reply = match self.transport.send(endpoint, &request) {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            if let Some(err) = reply.error {
                last_error = format!("{}: {}", err.code, err.message);
                continue;
            }
            if reply.outputs.len() != batch.len() {
                last_error = format!("{} outputs for {} inputs", reply.outputs.len(), batch.len());
                continue;
            }
            let decoded: Vec<_> = reply
                .outputs
                .iter()
                .enumerate()
                .map(|(i, v)| decode(offset + i, v))
                .collect();
            match decoded.iter().find_map(|d| d.as_ref().err()) {
                None => return decoded.into_iter().map(|d| d.map_err(|e| fail(&e))).collect(),
                Some(e) => {
                    last_error = format!("malformed output: {e}");
                    partial = Some(decoded);
                }
            }
        }
        self.metrics.failed_batches.fetch_add(1, Ordering::Relaxed);
        tracing::warn!(kind = %endpoint.kind, offset, size = batch.len(), error = %last_error, "batch failed after retries");
        match partial {
            Some(decoded) => decoded.into_iter().map(|d| d.map_err(|e| fail(&e))).collect(),
            None => batch.iter().map(|_| Err(fail(&last_error))).collect(),
        }
    }

    fn call_one<T: Send>(
        &self,
        kind: ScorerKind,
        input: Value,
        params: Map<String, Value>,
        decode: Decoder<'_, T>,
    ) -> Result<T> {
        self.call(kind, vec![input], params, decode)?
            .pop()
            .expect("one output per input")
    }

    /// One vector per text, in input order. Failed items carry their own
    /// error; the rest are still returned.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Result<Vec<f32>>>> {
        for (i, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                tracing::warn!(index = i, "embedding an empty text");
            }
        }
        let inputs = texts.iter().map(|t| Value::String(t.clone())).collect();
        self.call(ScorerKind::Embed, inputs, self.params_for(None), &|_, v| {
            let arr = v.as_array().ok_or("embedding is not an array")?;
            if arr.is_empty() {
                return Err("empty embedding".to_string());
            }
            arr.iter()
                .map(|x| as_finite(x).map(|f| f as f32))
                .collect::<std::result::Result<Vec<f32>, String>>()
        })
    }

    /// Like [`Gateway::embed_batch`] but fails on the first error and
    /// enforces one dimension across all vectors.
    pub fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let vectors = self.embed_batch(texts)?.into_iter().collect::<Result<Vec<_>>>()?;
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
                return Err(Error::Dimension {
                    expected: dim,
                    got: bad.len(),
                });
            }
        }
        Ok(vectors)
    }

    /// Per-step correctness probabilities from a process reward model.
    pub fn score_prm(&self, problem: &str, steps: &[String]) -> Result<Vec<f64>> {
        if steps.is_empty() {
            return Err(Error::precondition("no reasoning steps"));
        }
        if steps.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::precondition("empty reasoning step"));
        }
        let n = steps.len();
        let input = serde_json::json!({ "problem": problem, "steps": steps });
        self.call_one(ScorerKind::Prm, input, self.params_for(None), &|_, v| {
            let arr = v.as_array().ok_or("prm output is not an array")?;
            if arr.len() != n {
                return Err(format!("{} step scores for {n} steps", arr.len()));
            }
            arr.iter()
                .map(|x| {
                    let s = as_finite(x)?;
                    if (0.0..=1.0).contains(&s) {
                        Ok(s)
                    } else {
                        Err(format!("step score {s} outside [0, 1]"))
                    }
                })
                .collect()
        })
    }

    pub fn review_code_verdict(&self, instruction: &str, response: &str) -> Result<JudgeVerdict<CodeReview>> {
        let input = serde_json::json!({ "instruction": instruction, "response": response });
        self.call_one(
            ScorerKind::CodeReview,
            input,
            self.params_for(Some(&prompts::CODE_REVIEW)),
            &|_, v| {
                let verdict = JudgeVerdict::parse(reply_text(v), |obj| {
                    let field = |k: &str| obj.get(k).map(reply_text);
                    CodeReview::from_fields(
                        &field("review")?,
                        &field("final_verdict")?,
                        &field("code_original")?,
                        &field("code_revision")?,
                    )
                });
                match verdict.parsed {
                    Some(_) => Ok(verdict),
                    None => Err("reply lacks review/final_verdict/code_original/code_revision".into()),
                }
            },
        )
    }

    pub fn review_code(&self, instruction: &str, response: &str) -> Result<CodeReview> {
        Ok(self
            .review_code_verdict(instruction, response)?
            .parsed
            .expect("decoder only accepts parsed verdicts"))
    }

    /// Expressed constraints as raw `(span, type)` pairs.
    pub fn annotate_constraints(&self, instruction: &str) -> Result<Vec<(String, String)>> {
        let input = serde_json::json!({ "instruction": instruction });
        self.call_one(
            ScorerKind::ConstraintAnnotate,
            input,
            self.params_for(Some(&prompts::CONSTRAINT_ANNOTATE)),
            &|_, v| {
                JudgeVerdict::parse(reply_text(v), |obj| {
                    obj.iter()
                        .map(|(span, t)| t.as_str().map(|t| (span.clone(), t.to_string())))
                        .collect::<Option<Vec<_>>>()
                })
                .parsed
                .ok_or_else(|| "reply is not a span -> type object".to_string())
            },
        )
    }

    /// Yes/no answers to numbered questions about `response`; element `i`
    /// answers question `i + 1`.
    pub fn judge_bool(&self, questions: &[String], response: &str) -> Result<Vec<bool>> {
        if questions.is_empty() {
            return Ok(Vec::new());
        }
        let n = questions.len();
        let input = serde_json::json!({ "mode": "verify", "questions": questions, "response": response });
        self.call_one(
            ScorerKind::Judge,
            input,
            self.params_for(Some(&prompts::CONSTRAINT_VERIFY)),
            &|_, v| {
                JudgeVerdict::parse(reply_text(v), |obj| {
                    (1..=n).map(|i| obj.get(&i.to_string()).and_then(as_bool)).collect::<Option<Vec<_>>>()
                })
                .parsed
                .ok_or_else(|| format!("reply does not answer all {n} questions"))
            },
        )
    }

    /// Overall response quality on a 1..=10 scale.
    pub fn judge_overall(&self, instruction: &str, response: &str) -> Result<u8> {
        let input = serde_json::json!({ "mode": "overall", "instruction": instruction, "response": response });
        self.call_one(
            ScorerKind::Judge,
            input,
            self.params_for(Some(&prompts::RESPONSE_EVAL)),
            &|_, v| {
                JudgeVerdict::parse(reply_text(v), |obj| {
                    let score = match obj.get("score")? {
                        Value::String(s) => s.trim().parse::<f64>().ok()?,
                        other => other.as_f64()?,
                    };
                    (score.fract() == 0.0 && (1.0..=10.0).contains(&score)).then_some(score as u8)
                })
                .parsed
                .ok_or_else(|| "reply lacks an integer score in 1..=10".to_string())
            },
        )
    }

    fn deita(&self, kind: ScorerKind, turns: &[Turn]) -> Result<f64> {
        let input = serde_json::json!({ "turns": turns });
        self.call_one(kind, input, self.params_for(None), &|_, v| as_finite(v))
    }

    pub fn score_deita_quality(&self, turns: &[Turn]) -> Result<f64> {
        self.deita(ScorerKind::DeitaQuality, turns)
    }

    /// `(quality, complexity)` for a whole conversation.
    pub fn score_deita(&self, turns: &[Turn]) -> Result<(f64, f64)> {
        Ok((
            self.deita(ScorerKind::DeitaQuality, turns)?,
            self.deita(ScorerKind::DeitaComplexity, turns)?,
        ))
    }

    /// Predicted difficulty of each instruction.
    pub fn score_difficulty_batch(&self, instructions: &[String]) -> Result<Vec<Result<f64>>> {
        let inputs = instructions.iter().map(|t| Value::String(t.clone())).collect();
        self.call(ScorerKind::Difficulty, inputs, self.params_for(None), &|_, v| as_finite(v))
    }

    pub fn score_difficulty(&self, instruction: &str) -> Result<f64> {
        self.score_difficulty_batch(&[instruction.to_string()])?
            .pop()
            .expect("one output per input")
    }
}
