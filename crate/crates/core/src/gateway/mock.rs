//! Deterministic in-process scorer.
//!
//! Every output is a pure function of the request content (SHA-256 derived),
//! so runs against the mock are reproducible bit for bit. Useful for tests,
//! dry runs and benchmarking the pipeline without model servers.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{ScoreReply, ScoreRequest, ScorerEndpoint, ScorerKind, Transport, TransportError, WireError};

#[derive(Clone, Debug)]
pub struct MockScorer {
    pub embed_dim: usize,
    pub judge_overall: u8,
}

impl Default for MockScorer {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            judge_overall: 7,
        }
    }
}

fn hash(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// Uniform in [0, 1).
fn unit(parts: &[&str]) -> f64 {
    let h = hash(parts);
    let x = u64::from_le_bytes(h[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fence() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_+-]*\n(.*?)```").unwrap())
}

fn annotation_rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (
                r"(?i)\b(?:at least|at most|no more than|fewer than|less than|more than|exactly)?\s*\d+\s+(?:words?|sentences?|paragraphs?)\b",
                "length",
            ),
            (r"(?i)\bin all (?:lowercase|uppercase|capital) letters\b", "letter_case"),
            (r"(?i)\bwithout (?:using )?(?:any )?commas\b", "punctuation"),
            (r"(?i)\binclude the (?:keywords?|words?) [^.,;]+", "keyword_included"),
            (r"(?i)\bdo not (?:use|include) the (?:keywords?|words?) [^.,;]+", "keyword_avoided"),
            (r"(?i)\b(?:start|begin|end) (?:your response )?with [^.,;]+", "start_and_ending"),
            (r"(?i)\bin (?:json|markdown|bullet points|a table)\b", "output_format"),
            (r"(?i)\bin the style of [^.,;]+", "writing_style"),
            (r"(?i)\b(?:in|using) (?:french|german|spanish|chinese|japanese)\b", "language"),
        ]
        .into_iter()
        .map(|(p, t)| (Regex::new(p).unwrap(), t))
        .collect()
    })
}

fn bad_request(message: impl Into<String>) -> ScoreReply {
    ScoreReply {
        outputs: Vec::new(),
        error: Some(WireError {
            code: "bad_request".into(),
            message: message.into(),
        }),
    }
}

impl MockScorer {
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.embed_dim];
        for tok in tokens(text) {
            let h = hash(&["tok", &tok]);
            let idx = u32::from_le_bytes(h[..4].try_into().unwrap()) as usize % self.embed_dim;
            v[idx] += if h[4] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn code_review(&self, instruction: &str, response: &str) -> Value {
        let Some(code) = fence().captures(response).map(|c| c[1].to_string()) else {
            let verdict = if unit(&["nocode", instruction, response]) < 0.5 { "correct" } else { "incorrect" };
            let reply = json!({"review": "No code in the response.", "final_verdict": verdict,
                "code_original": "no code", "code_revision": "no revision"});
            return Value::String(reply.to_string());
        };
        let correct = unit(&["verdict", instruction, &code]) < 0.6;
        let lines: Vec<&str> = code.lines().collect();
        let revision = if lines.is_empty() || (correct && unit(&["keep", &code]) < 0.5) {
            "no revision".to_string()
        } else {
            let at = (unit(&["line", &code]) * lines.len() as f64) as usize;
            let mut revised: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
            revised[at].push_str(" # revised");
            revised.join("\n")
        };
        let reply = json!({
            "review": "Mock review.",
            "final_verdict": if correct { "correct" } else { "incorrect" },
            "code_original": code,
            "code_revision": revision,
        });
        Value::String(reply.to_string())
    }

    fn annotate(&self, instruction: &str) -> Value {
        let mut found = Map::new();
        for (re, ctype) in annotation_rules() {
            for m in re.find_iter(instruction) {
                found.insert(m.as_str().trim().to_string(), Value::String(ctype.to_string()));
            }
        }
        Value::String(Value::Object(found).to_string())
    }

    fn judge(&self, input: &Value) -> Result<Value, String> {
        match input["mode"].as_str() {
            Some("verify") => {
                let response = input["response"].as_str().ok_or("verify: missing response")?;
                let questions = input["questions"].as_array().ok_or("verify: missing questions")?;
                let answers: Map<String, Value> = questions
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let q = q.as_str().unwrap_or_default();
                        ((i + 1).to_string(), Value::Bool(unit(&["judge", q, response]) < 0.75))
                    })
                    .collect();
                Ok(Value::String(Value::Object(answers).to_string()))
            }
            Some("overall") => Ok(Value::String(json!({"score": self.judge_overall}).to_string())),
            _ => Err("judge: mode must be `verify` or `overall`".into()),
        }
    }

    fn one(&self, kind: ScorerKind, input: &Value) -> Result<Value, String> {
        let text = |v: &Value| v.as_str().map(str::to_string).ok_or_else(|| format!("{kind}: expected a string input"));
        match kind {
            ScorerKind::Embed => Ok(json!(self.embed(&text(input)?))),
            ScorerKind::Prm => {
                let problem = input["problem"].as_str().ok_or("prm: missing problem")?;
                let steps = input["steps"].as_array().ok_or("prm: missing steps")?;
                let scores: Vec<f64> = steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| unit(&["prm", problem, s.as_str().unwrap_or_default(), &i.to_string()]))
                    .collect();
                Ok(json!(scores))
            }
            ScorerKind::CodeReview => {
                let instruction = input["instruction"].as_str().ok_or("code_review: missing instruction")?;
                let response = input["response"].as_str().ok_or("code_review: missing response")?;
                Ok(self.code_review(instruction, response))
            }
            ScorerKind::ConstraintAnnotate => {
                let instruction = input["instruction"].as_str().ok_or("constraint_annotate: missing instruction")?;
                Ok(self.annotate(instruction))
            }
            ScorerKind::Judge => self.judge(input),
            ScorerKind::DeitaQuality | ScorerKind::DeitaComplexity => {
                let turns = input.get("turns").ok_or_else(|| format!("{kind}: missing turns"))?;
                Ok(json!(1.0 + 5.0 * unit(&[kind.as_str(), &turns.to_string()])))
            }
            ScorerKind::Difficulty => Ok(json!(unit(&["difficulty", &text(input)?]))),
        }
    }
}

impl Transport for MockScorer {
    fn send(&self, _: &ScorerEndpoint, request: &ScoreRequest) -> Result<ScoreReply, TransportError> {
        let outputs: Result<Vec<Value>, String> = request.inputs.iter().map(|i| self.one(request.kind, i)).collect();
        Ok(match outputs {
            Ok(outputs) => ScoreReply { outputs, error: None },
            Err(message) => bad_request(message),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Gateway;

    #[test]
    fn embeddings_are_unit_and_stable() {
        let m = MockScorer::default();
        let a = m.embed("Solve the equation x + 2 = 5");
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(a, m.embed("Solve the equation x + 2 = 5"));
        assert_eq!(m.embed("")[0], 1.0);
    }

    #[test]
    fn typed_calls_through_gateway() {
        let gw = Gateway::mock();
        let p = gw.score_prm("p", &["a".into(), "b".into()]).unwrap();
        assert!(p.iter().all(|x| (0.0..1.0).contains(x)));
        assert_eq!(gw.judge_overall("i", "r").unwrap(), 7);
        assert_eq!(gw.judge_bool(&["q".into()], "r").unwrap().len(), 1);
        let (q, c) = gw.score_deita(&[crate::Turn::user("u"), crate::Turn::assistant("a")]).unwrap();
        assert!((1.0..6.0).contains(&q) && (1.0..6.0).contains(&c));
        let review = gw.review_code("write f", "```python\ndef f():\n    return 1\n```").unwrap();
        assert!(review.has_code);
        assert!(!gw.review_code("write f", "no code here").unwrap().has_code);
        let spans = gw.annotate_constraints("Answer in at least 300 words and without using any commas.").unwrap();
        let types: Vec<&str> = spans.iter().map(|(_, t)| t.as_str()).collect();
        assert!(types.contains(&"length") && types.contains(&"punctuation"), "{spans:?}");
    }

    #[test]
    fn bad_input_is_rejected() {
        let req = ScoreRequest {
            kind: ScorerKind::Embed,
            inputs: vec![json!(3)],
            params: Map::new(),
        };
        let reply = MockScorer::default()
            .send(&ScorerEndpoint::new(ScorerKind::Embed, "mock://"), &req)
            .unwrap();
        assert_eq!(reply.error.unwrap().code, "bad_request");
    }
}
