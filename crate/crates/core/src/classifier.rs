//! Seven-way task taxonomy and a lightweight classifier head over frozen
//! embeddings.
//!
//! Two heads are supported: nearest centroid under cosine similarity and a
//! multinomial logistic regression. Both are immutable once trained and
//! serialize to a small text format with base64 float32 vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

/// Task category. Integer codes follow declaration order and are stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CategoryLabel {
    Math = 0,
    Coding = 1,
    Generation = 2,
    Reasoning = 3,
    Brainstorming = 4,
    FactualQA = 5,
    Extraction = 6,
}

impl CategoryLabel {
    pub const ALL: [CategoryLabel; 7] = [
        CategoryLabel::Math,
        CategoryLabel::Coding,
        CategoryLabel::Generation,
        CategoryLabel::Reasoning,
        CategoryLabel::Brainstorming,
        CategoryLabel::FactualQA,
        CategoryLabel::Extraction,
    ];
    pub const COUNT: usize = 7;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CategoryLabel::Math => "Math",
            CategoryLabel::Coding => "Coding",
            CategoryLabel::Generation => "Generation",
            CategoryLabel::Reasoning => "Reasoning",
            CategoryLabel::Brainstorming => "Brainstorming",
            CategoryLabel::FactualQA => "FactualQA",
            CategoryLabel::Extraction => "Extraction",
        }
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CategoryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "math" => CategoryLabel::Math,
            "coding" | "code" => CategoryLabel::Coding,
            "generation" => CategoryLabel::Generation,
            "reasoning" => CategoryLabel::Reasoning,
            "brainstorming" => CategoryLabel::Brainstorming,
            "factualqa" => CategoryLabel::FactualQA,
            "extraction" => CategoryLabel::Extraction,
            _ => return Err(Error::Format(format!("unknown category `{s}`"))),
        })
    }
}

impl Serialize for CategoryLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CategoryLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a conversation-level label is derived from per-turn labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversationPolicy {
    #[default]
    MostFrequent,
    First,
}

/// Most frequent label (ties go to the label that occurs first), or simply
/// the first turn's label.
pub fn conversation_category(
    labels: &[CategoryLabel],
    policy: ConversationPolicy,
) -> Result<CategoryLabel> {
    let first = *labels
        .first()
        .ok_or_else(|| Error::precondition("no turn labels"))?;
    if policy == ConversationPolicy::First {
        return Ok(first);
    }
    let mut counts = [0usize; CategoryLabel::COUNT];
    for l in labels {
        counts[l.code()] += 1;
    }
    let mut best = first;
    for &l in labels {
        // strict > keeps the earliest-occurring label among ties
        if counts[l.code()] > counts[best.code()] {
            best = l;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    NearestCentroid,
    SoftmaxLinear,
}

impl HeadKind {
    fn as_str(self) -> &'static str {
        match self {
            HeadKind::NearestCentroid => "nearest_centroid",
            HeadKind::SoftmaxLinear => "softmax_linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedExample {
    pub text: String,
    pub label: CategoryLabel,
}

/// Hand-labeled examples used to fit a head.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledSeedSet {
    pub examples: Vec<SeedExample>,
}

#[derive(Deserialize)]
struct SeedRecord {
    #[serde(flatten)]
    conversation: serde_json::Value,
    label: CategoryLabel,
}

impl LabeledSeedSet {
    pub fn new(examples: Vec<SeedExample>) -> Self {
        Self { examples }
    }

    pub fn counts(&self) -> [usize; CategoryLabel::COUNT] {
        let mut c = [0; CategoryLabel::COUNT];
        for e in &self.examples {
            c[e.label.code()] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        for e in &self.examples {
            buf.extend_from_slice(e.label.name().as_bytes());
            buf.push(0);
            buf.extend_from_slice(e.text.as_bytes());
            buf.push(0);
        }
        sha256_hex(&buf)
    }

    /// Reads a seed file: corpus records with an extra `label` field. The
    /// example text is the record's joined user turns.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut examples = Vec::new();
        for row in crate::io::read_jsonl::<SeedRecord>(path)? {
            let (line, rec) = row?;
            let mut value = rec.conversation;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("id").or_insert_with(|| format!("seed:{line}").into());
                obj.entry("dataset").or_insert_with(|| "seed".into());
            }
            let conv: Conversation = serde_json::from_value(value).map_err(|e| Error::Record {
                line,
                message: e.to_string(),
            })?;
            examples.push(SeedExample {
                text: conv.user_text(),
                label: rec.label,
            });
        }
        Ok(Self { examples })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the absolute change in mean loss drops below this.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_epochs: 500,
            tolerance: 1e-6,
            l2: 0.0,
        }
    }
}

/// A trained head: one vector (and bias) per category.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub dim: usize,
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
    pub seed_digest: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the maximum, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn train_head(
    seed: &LabeledSeedSet,
    embeddings: &[Vec<f32>],
    kind: HeadKind,
    opts: &TrainOptions,
) -> Result<ClassifierHead> {
    if embeddings.len() != seed.examples.len() {
        return Err(Error::precondition(format!(
            "{} embeddings for {} seed examples",
            embeddings.len(),
            seed.examples.len()
        )));
    }
    let dim = embeddings
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::precondition("empty seed set"))?;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(embeddings.len());
    for (ex, emb) in seed.examples.iter().zip(embeddings) {
        if emb.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: emb.len(),
            });
        }
        if emb.iter().any(|x| !x.is_finite()) {
            tracing::warn!(label = %ex.label, "dropping seed example with non-finite embedding");
            continue;
        }
        rows.push((emb.iter().map(|&x| x as f64).collect(), ex.label.code()));
    }
    let mut counts = [0usize; CategoryLabel::COUNT];
    for (_, c) in &rows {
        counts[*c] += 1;
    }
    if let Some(missing) = CategoryLabel::ALL.iter().find(|l| counts[l.code()] == 0) {
        return Err(Error::precondition(format!(
            "category {missing} has no usable seed examples"
        )));
    }

    let (weights, bias) = match kind {
        HeadKind::NearestCentroid => {
            let mut sums = vec![vec![0.0f64; dim]; CategoryLabel::COUNT];
            for (v, c) in &rows {
                for (s, x) in sums[*c].iter_mut().zip(v) {
                    *s += x;
                }
            }
            let weights = sums
                .into_iter()
                .enumerate()
                .map(|(c, s)| {
                    let mean: Vec<f64> = s.iter().map(|x| x / counts[c] as f64).collect();
                    let n = norm(&mean);
                    mean.iter()
                        .map(|x| if n > 0.0 { (x / n) as f32 } else { 0.0 })
                        .collect()
                })
                .collect();
            (weights, vec![0.0; CategoryLabel::COUNT])
        }
        HeadKind::SoftmaxLinear => fit_softmax(&rows, dim, opts),
    };
    if weights.iter().flatten().chain(&bias).any(|x: &f32| !x.is_finite()) {
        return Err(Error::precondition("training diverged (non-finite weights)"));
    }
    Ok(ClassifierHead {
        kind,
        dim,
        weights,
        bias,
        seed_digest: seed.digest(),
    })
}

fn fit_softmax(rows: &[(Vec<f64>, usize)], dim: usize, opts: &TrainOptions) -> (Vec<Vec<f32>>, Vec<f32>) {
    let k = CategoryLabel::COUNT;
    let n = rows.len() as f64;
    let mut w = vec![vec![0.0f64; dim]; k];
    let mut b = vec![0.0f64; k];
    let mut prev_loss = f64::INFINITY;
    for _epoch in 0..opts.max_epochs {
        let mut gw = vec![vec![0.0f64; dim]; k];
        let mut gb = vec![0.0f64; k];
        let mut loss = 0.0;
        for (x, y) in rows {
            let logits: Vec<f64> = (0..k)
                .map(|c| b[c] + w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let probs = softmax(&logits);
            loss -= probs[*y].max(1e-300).ln();
            for c in 0..k {
                let err = probs[c] - if c == *y { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += err * xi;
                }
            }
        }
        loss /= n;
        if opts.l2 > 0.0 {
            loss += 0.5 * opts.l2 * w.iter().flatten().map(|x| x * x).sum::<f64>();
        }
        for c in 0..k {
            b[c] -= opts.learning_rate * gb[c] / n;
            for (wi, g) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= opts.learning_rate * (g / n + opts.l2 * *wi);
            }
        }
        if (prev_loss - loss).abs() < opts.tolerance {
            break;
        }
        prev_loss = loss;
    }
    (
        w.into_iter()
            .map(|r| r.into_iter().map(|x| x as f32).collect())
            .collect(),
        b.into_iter().map(|x| x as f32).collect(),
    )
}

impl ClassifierHead {
    /// Per-class scores: cosine similarities for nearest centroid, logits
    /// for softmax. A zero vector under nearest centroid falls back to raw
    /// dot products.
    pub fn scores(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        let v: Vec<f64> = embedding.iter().map(|&x| x as f64).collect();
        let vn = norm(&v);
        if vn == 0.0 {
            tracing::warn!("classifying a zero vector");
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, &b)| {
                let dot: f64 = w.iter().zip(&v).map(|(&a, b)| a as f64 * b).sum();
                match self.kind {
                    HeadKind::SoftmaxLinear => dot + b as f64,
                    HeadKind::NearestCentroid => {
                        let wn = w.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                        if vn == 0.0 || wn == 0.0 {
                            dot
                        } else {
                            dot / (wn * vn)
                        }
                    }
                }
            })
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("curate-head v1\n");
        out.push_str(&format!("kind {}\n", self.kind.as_str()));
        out.push_str(&format!("dim {}\n", self.dim));
        out.push_str(&format!("seed_digest {}\n", self.seed_digest));
        out.push_str(&format!("bias {}\n", encode_f32(&self.bias)));
        for (label, w) in CategoryLabel::ALL.iter().zip(&self.weights) {
            out.push_str(&format!("class {} {}\n", label.name(), encode_f32(w)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("classifier head: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("curate-head v1") {
            return Err(bad("unsupported header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected `{name}`")))
        };
        let kind = match field("kind")?.as_str() {
            "nearest_centroid" => HeadKind::NearestCentroid,
            "softmax_linear" => HeadKind::SoftmaxLinear,
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        let dim: usize = field("dim")?.parse().map_err(|_| bad("dim"))?;
        let seed_digest = field("seed_digest")?;
        let bias = decode_f32(&field("bias")?).ok_or_else(|| bad("bias"))?;
        if bias.len() != CategoryLabel::COUNT {
            return Err(bad("bias length"));
        }
        let mut weights = Vec::with_capacity(CategoryLabel::COUNT);
        for label in CategoryLabel::ALL {
            let rest = field("class")?;
            let (name, data) = rest.split_once(' ').ok_or_else(|| bad("class line"))?;
            if name != label.name() {
                return Err(bad(&format!("expected class {label}, found {name}")));
            }
            let w = decode_f32(data).ok_or_else(|| bad("class vector"))?;
            if w.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: w.len(),
                });
            }
            weights.push(w);
        }
        Ok(Self {
            kind,
            dim,
            weights,
            bias,
            seed_digest,
        })
    }
}

fn encode_f32(xs: &[f32]) -> String {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(s: &str) -> Option<Vec<f32>> {
    let bytes = B64.decode(s.trim()).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

/// Predicted label and its softmax confidence (temperature 1). Ties go to
/// the lowest category code.
pub fn classify_turn(head: &ClassifierHead, embedding: &[f32]) -> Result<(CategoryLabel, f64)> {
    let scores = head.scores(embedding)?;
    let best = argmax(&scores);
    let confidence = softmax(&scores)[best];
    Ok((CategoryLabel::ALL[best], confidence))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub cohens_kappa: f64,
    /// `confusion[truth][predicted]`
    pub confusion: [[usize; CategoryLabel::COUNT]; CategoryLabel::COUNT],
}

impl Evaluation {
    pub fn from_predictions(truth: &[CategoryLabel], predicted: &[CategoryLabel]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::precondition("empty test set"));
        }
        if truth.len() != predicted.len() {
            return Err(Error::precondition("truth and predictions differ in length"));
        }
        let k = CategoryLabel::COUNT;
        let mut confusion = [[0usize; CategoryLabel::COUNT]; CategoryLabel::COUNT];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.code()][p.code()] += 1;
        }
        let n = truth.len() as f64;
        let diag: usize = (0..k).map(|i| confusion[i][i]).sum();
        let accuracy = diag as f64 / n;

        let row = |i: usize| confusion[i].iter().sum::<usize>();
        let col = |j: usize| (0..k).map(|i| confusion[i][j]).sum::<usize>();

        let mut f1_sum = 0.0;
        let mut classes = 0;
        for c in 0..k {
            let (support, predicted) = (row(c), col(c));
            if support == 0 && predicted == 0 {
                continue;
            }
            classes += 1;
            let tp = confusion[c][c] as f64;
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            if precision + recall > 0.0 {
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        let macro_f1 = f1_sum / classes as f64;

        let expected: f64 = (0..k).map(|c| (row(c) as f64 / n) * (col(c) as f64 / n)).sum();
        let cohens_kappa = if (1.0 - expected).abs() < f64::EPSILON {
            if accuracy == 1.0 { 1.0 } else { 0.0 }
        } else {
            (accuracy - expected) / (1.0 - expected)
        };
        Ok(Self {
            accuracy,
            macro_f1,
            cohens_kappa,
            confusion,
        })
    }
}

/// Classifies every test example and scores the predictions.
pub fn evaluate_classifier(
    head: &ClassifierHead,
    test: &LabeledSeedSet,
    embeddings: &[Vec<f32>],
) -> Result<Evaluation> {
    if embeddings.len() != test.len() {
        return Err(Error::precondition("embeddings not aligned with test examples"));
    }
    let predicted = embeddings
        .iter()
        .map(|e| classify_turn(head, e).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<_> = test.examples.iter().map(|e| e.label).collect();
    Evaluation::from_predictions(&truth, &predicted)
}

/// Per-class counts keyed by label name; handy for reports.
pub fn label_histogram(labels: impl IntoIterator<Item = CategoryLabel>) -> BTreeMap<CategoryLabel, usize> {
    let mut out = BTreeMap::new();
    for l in labels {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn one_per_class(dim: usize) -> (LabeledSeedSet, Vec<Vec<f32>>) {
        let examples = CategoryLabel::ALL
            .iter()
            .map(|&label| SeedExample {
                text: label.to_string(),
                label,
            })
            .collect();
        let embs = (0..7).map(|i| {
            let mut v = basis(dim, i);
            v[i] = 3.0; // not unit length on purpose
            v
        });
        (LabeledSeedSet::new(examples), embs.collect())
    }

    #[test]
    fn labels_have_stable_codes() {
        for (i, l) in CategoryLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(CategoryLabel::from_code(i), Some(*l));
            assert_eq!(l.name().parse::<CategoryLabel>().unwrap(), *l);
        }
        assert_eq!("Factual QA".parse::<CategoryLabel>().unwrap(), CategoryLabel::FactualQA);
        assert!("Poetry".parse::<CategoryLabel>().is_err());
    }

    #[test]
    fn singleton_centroids_are_normalized_examples() {
        let (seed, embs) = one_per_class(8);
        let head = train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).unwrap();
        for i in 0..7 {
            assert_eq!(head.weights[i], basis(8, i));
        }
    }

    #[test]
    fn missing_class_is_fatal() {
        let (mut seed, mut embs) = one_per_class(8);
        seed.examples.pop();
        embs.pop();
        assert!(train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).is_err());
    }

    #[test]
    fn non_finite_example_is_dropped() {
        let (mut seed, mut embs) = one_per_class(8);
        seed.examples.push(SeedExample {
            text: "bad".into(),
            label: CategoryLabel::Math,
        });
        embs.push(vec![f32::NAN; 8]);
        let head = train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).unwrap();
        assert_eq!(head.weights[0], basis(8, 0));
    }

    #[test]
    fn duplicate_example_in_two_classes_trains() {
        let (mut seed, mut embs) = one_per_class(8);
        seed.examples.push(SeedExample {
            text: "Math".into(),
            label: CategoryLabel::Coding,
        });
        embs.push(embs[0].clone());
        assert!(train_head(&seed, &embs, HeadKind::SoftmaxLinear, &TrainOptions::default()).is_ok());
    }

    #[test]
    fn centroid_input_gets_max_confidence() {
        let (seed, embs) = one_per_class(8);
        let head = train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).unwrap();
        let (label, conf) = classify_turn(&head, &head.weights[0].clone()).unwrap();
        assert_eq!(label, CategoryLabel::Math);
        let other = classify_turn(&head, &head.weights[3].clone()).unwrap();
        assert_eq!(other.0, CategoryLabel::Reasoning);
        let scores = head.scores(&head.weights[0]).unwrap();
        let probs = softmax(&scores);
        assert!(probs.iter().all(|&p| p <= conf));
    }

    #[test]
    fn ties_go_to_lowest_code() {
        let (seed, embs) = one_per_class(8);
        let head = train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).unwrap();
        let mut v = vec![0.0f32; 8];
        v[0] = 1.0;
        v[1] = 1.0;
        assert_eq!(classify_turn(&head, &v).unwrap().0, CategoryLabel::Math);
        // zero vector: all dot products are 0, lowest code wins
        assert_eq!(classify_turn(&head, &[0.0; 8]).unwrap().0, CategoryLabel::Math);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (seed, embs) = one_per_class(8);
        let head = train_head(&seed, &embs, HeadKind::NearestCentroid, &TrainOptions::default()).unwrap();
        assert!(matches!(classify_turn(&head, &[1.0; 5]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conversation_policies() {
        use CategoryLabel::*;
        let mf = ConversationPolicy::MostFrequent;
        assert_eq!(conversation_category(&[Coding, Coding, Math], mf).unwrap(), Coding);
        assert_eq!(conversation_category(&[Math, Coding], mf).unwrap(), Math);
        assert_eq!(conversation_category(&[Coding, Math], mf).unwrap(), Coding);
        assert_eq!(conversation_category(&[Reasoning, Math, Math, Reasoning], mf).unwrap(), Reasoning);
        assert_eq!(
            conversation_category(&[Generation, Math, Math], ConversationPolicy::First).unwrap(),
            Generation
        );
        assert!(conversation_category(&[], mf).is_err());
        for l in CategoryLabel::ALL {
            for p in [mf, ConversationPolicy::First] {
                assert_eq!(conversation_category(&[l], p).unwrap(), l);
            }
        }
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let truth: Vec<_> = CategoryLabel::ALL.iter().flat_map(|&l| [l; 10]).collect();
        let perfect = Evaluation::from_predictions(&truth, &truth).unwrap();
        assert_eq!((perfect.accuracy, perfect.macro_f1, perfect.cohens_kappa), (1.0, 1.0, 1.0));

        let constant = vec![CategoryLabel::Math; truth.len()];
        let e = Evaluation::from_predictions(&truth, &constant).unwrap();
        assert!((e.accuracy - 1.0 / 7.0).abs() < 1e-12);
        assert!(e.cohens_kappa.abs() < 1e-12);
        // only Math has any F1: precision 1/7, recall 1 -> 2/8 = 0.25; averaged over 7 classes
        assert!((e.macro_f1 - 0.25 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn head_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (seed, _) = one_per_class(7);
        let embs: Vec<Vec<f32>> = (0..7).map(|_| (0..5).map(|_| rng.random::<f32>() - 0.5).collect()).collect();
        for kind in [HeadKind::NearestCentroid, HeadKind::SoftmaxLinear] {
            let head = train_head(&seed, &embs, kind, &TrainOptions::default()).unwrap();
            let back = ClassifierHead::from_text(&head.to_text()).unwrap();
            assert_eq!(back, head);
        }
        assert!(ClassifierHead::from_text("curate-head v2\n").is_err());
    }

    #[test]
    fn seed_file_loads_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seed.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"turns":[{"role":"user","content":"2+2?"},{"role":"assistant","content":"4"}],"label":"Math"}"#,
                "\n",
                r#"{"id":"x","dataset":"s","turns":[{"role":"user","content":"write a poem"},{"role":"assistant","content":"..."}],"label":"Generation"}"#,
                "\n"
            ),
        )
        .unwrap();
        let seed = LabeledSeedSet::load(&p).unwrap();
        assert_eq!(seed.len(), 2);
        assert_eq!(seed.examples[0].text, "2+2?");
        assert_eq!(seed.counts()[CategoryLabel::Generation.code()], 1);
    }
}
