//! Pipeline configuration: a TOML document, command-line overrides and
//! endpoint environment variables, validated into a [`PipelineConfig`].
//!
//! ```toml
//! output_dir = "out"
//!
//! [[inputs]]
//! path = "data/train.jsonl"
//! format = "sharegpt"
//!
//! [scorer]
//! base_url = "http://localhost:8700"
//!
//! [selection]
//! strategy = "combination_pp"
//! m = 10000
//! seed = 17
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classifier::{CategoryLabel, ConversationPolicy, HeadKind};
use crate::cluster::KMeansOptions;
use crate::corpus::InputFormat;
use crate::error::{Error, Result};
use crate::gateway::{ScorerEndpoint, ScorerKind};
use crate::io;
use crate::sampler::{QuotaPlan, Strategy, ThresholdOn};

pub const SCORER_URL_ENV: &str = "CURATE_SCORER_URL";
pub const MOCK_URL: &str = "mock://";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub path: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
    #[serde(default)]
    pub dataset: Option<String>,
}

fn canonical() -> String {
    "canonical".into()
}

/// Text a conversation is embedded by for clustering and deduplication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedText {
    /// All user turns joined.
    #[default]
    User,
    /// Every turn joined.
    All,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScorer {
    base_url: Option<String>,
    timeout_secs: Option<f64>,
    max_retries: Option<u32>,
    batch_size: Option<usize>,
    #[serde(default)]
    endpoints: BTreeMap<String, String>,
    #[serde(default)]
    params: Map<String, Value>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassifier {
    head: Option<PathBuf>,
    seed_set: Option<PathBuf>,
    kind: Option<String>,
    policy: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEmbedding {
    text: Option<String>,
    unit_normalize: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKMeans {
    max_iter: Option<usize>,
    tol: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSelection {
    strategy: Option<String>,
    m: Option<usize>,
    seed: Option<u64>,
    gamma: Option<f64>,
    threshold_on: Option<String>,
    deita_threshold: Option<f64>,
    quotas: Option<BTreeMap<String, usize>>,
    #[serde(default)]
    kmeans: RawKMeans,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    reject_tolerance: Option<f64>,
    #[serde(default)]
    inputs: Vec<InputSpec>,
    #[serde(default)]
    scorer: RawScorer,
    #[serde(default)]
    classifier: RawClassifier,
    #[serde(default)]
    embedding: RawEmbedding,
    #[serde(default)]
    selection: RawSelection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// `mock://` selects the in-process deterministic scorer.
    pub base_url: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub batch_size: usize,
    /// Per-kind base URL overrides.
    pub endpoints: BTreeMap<ScorerKind, String>,
    pub params: Map<String, Value>,
}

impl ScorerConfig {
    /// Endpoint for `kind`, or `None` when no URL is configured.
    pub fn endpoint(&self, kind: ScorerKind) -> Option<ScorerEndpoint> {
        let url = self.endpoints.get(&kind).or(self.base_url.as_ref())?;
        Some(ScorerEndpoint {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
            batch_size: self.batch_size,
            ..ScorerEndpoint::new(kind, url.clone())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub head: Option<PathBuf>,
    pub seed_set: Option<PathBuf>,
    pub kind: HeadKind,
    pub policy: ConversationPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub text: EmbedText,
    pub unit_normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub m: usize,
    pub seed: u64,
    pub gamma: f64,
    pub threshold_on: ThresholdOn,
    pub deita_threshold: f64,
    pub quotas: QuotaPlan,
    pub kmeans: KMeansOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub inputs: Vec<InputSpec>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core. Never affects outputs.
    pub workers: usize,
    /// Largest tolerated fraction of rejected input records.
    pub reject_tolerance: f64,
    pub scorer: ScorerConfig,
    pub classifier: ClassifierConfig,
    pub embedding: EmbeddingConfig,
    pub selection: SelectionConfig,
}

/// Command-line values that win over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub strategy: Option<String>,
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
}

/// One or more problems found while validating a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl From<ConfigErrors> for Error {
    fn from(e: ConfigErrors) -> Self {
        Error::Config(e.to_string())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_url(field: &str, url: &str, errors: &mut Vec<String>) {
    if url == MOCK_URL || url.starts_with("http://") {
        return;
    }
    if url.starts_with("https://") {
        errors.push(format!("{field}: https is not supported by the built-in transport; use http:// or a local proxy"));
    } else {
        errors.push(format!("{field}: `{url}` must start with http:// or be {MOCK_URL}"));
    }
}

/// Reads, overrides and validates a config file. Relative paths are
/// resolved against the file's directory. `env` looks up environment
/// variables (endpoint URLs only).
pub fn load_config(
    path: &Path,
    overrides: &Overrides,
    env: &dyn Fn(&str) -> Option<String>,
) -> std::result::Result<PipelineConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base, overrides, env)
}

/// Environment lookup backed by the process environment.
pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

pub fn parse_config(
    text: &str,
    base: &Path,
    overrides: &Overrides,
    env: &dyn Fn(&str) -> Option<String>,
) -> std::result::Result<PipelineConfig, ConfigErrors> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.to_string().trim().to_string()]))?;
    let mut errors = Vec::new();

    if raw.inputs.is_empty() {
        errors.push("inputs: at least one input corpus is required".to_string());
    }
    let inputs: Vec<InputSpec> = raw
        .inputs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let path = resolve(base, &spec.path);
            if !path.is_file() {
                errors.push(format!("inputs[{i}].path: {} does not exist", path.display()));
            }
            if InputFormat::preset(&spec.format).is_none() {
                errors.push(format!(
                    "inputs[{i}].format: unknown format `{}` (valid: {})",
                    spec.format,
                    InputFormat::PRESETS.join(", ")
                ));
            }
            InputSpec {
                path,
                ..spec.clone()
            }
        })
        .collect();

    let output_dir = resolve(
        base,
        &overrides.output_dir.clone().or(raw.output_dir).unwrap_or_else(|| PathBuf::from("curate-out")),
    );
    let workers = overrides.workers.or(raw.workers).unwrap_or(0);
    let reject_tolerance = raw.reject_tolerance.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&reject_tolerance) {
        errors.push(format!("reject_tolerance: {reject_tolerance} outside [0, 1]"));
    }

    // scorer
    let rs = raw.scorer;
    let base_url = env(SCORER_URL_ENV).or(rs.base_url);
    if let Some(u) = &base_url {
        check_url("scorer.base_url", u, &mut errors);
    }
    let mut endpoints = BTreeMap::new();
    for (k, url) in &rs.endpoints {
        match k.parse::<ScorerKind>() {
            Ok(kind) => {
                check_url(&format!("scorer.endpoints.{k}"), url, &mut errors);
                endpoints.insert(kind, url.clone());
            }
            Err(_) => errors.push(format!(
                "scorer.endpoints.{k}: unknown kind (valid: {})",
                ScorerKind::ALL.map(ScorerKind::as_str).join(", ")
            )),
        }
    }
    for kind in ScorerKind::ALL {
        let var = format!("{SCORER_URL_ENV}_{}", kind.as_str().to_ascii_uppercase());
        if let Some(url) = env(&var) {
            check_url(&var, &url, &mut errors);
            endpoints.insert(kind, url);
        }
    }
    let timeout_secs = rs.timeout_secs.unwrap_or(60.0);
    if !(timeout_secs.is_finite() && timeout_secs > 0.0) {
        errors.push(format!("scorer.timeout_secs: must be > 0, got {timeout_secs}"));
    }
    let batch_size = rs.batch_size.unwrap_or(32);
    if batch_size == 0 {
        errors.push("scorer.batch_size: must be >= 1".into());
    }
    let scorer = ScorerConfig {
        base_url,
        timeout_secs,
        max_retries: rs.max_retries.unwrap_or(2),
        batch_size,
        endpoints,
        params: rs.params,
    };

    // classifier
    let rc = raw.classifier;
    let mut file_field = |field: &str, p: Option<PathBuf>| {
        p.map(|p| {
            let p = resolve(base, &p);
            if !p.is_file() {
                errors.push(format!("{field}: {} does not exist", p.display()));
            }
            p
        })
    };
    let head = file_field("classifier.head", rc.head);
    let seed_set = file_field("classifier.seed_set", rc.seed_set);
    let kind = match rc.kind.as_deref() {
        None | Some("nearest_centroid") => HeadKind::NearestCentroid,
        Some("softmax_linear") => HeadKind::SoftmaxLinear,
        Some(other) => {
            errors.push(format!("classifier.kind: unknown `{other}` (valid: nearest_centroid, softmax_linear)"));
            HeadKind::default()
        }
    };
    let policy = match rc.policy.as_deref() {
        None | Some("most_frequent") => ConversationPolicy::MostFrequent,
        Some("first") => ConversationPolicy::First,
        Some(other) => {
            errors.push(format!("classifier.policy: unknown `{other}` (valid: most_frequent, first)"));
            ConversationPolicy::default()
        }
    };

    let text_kind = match raw.embedding.text.as_deref() {
        None | Some("user") => EmbedText::User,
        Some("all") => EmbedText::All,
        Some(other) => {
            errors.push(format!("embedding.text: unknown `{other}` (valid: user, all)"));
            EmbedText::User
        }
    };

    // selection
    let sel = raw.selection;
    let strategy = match overrides.strategy.clone().or(sel.strategy) {
        None => {
            errors.push(format!(
                "selection.strategy: required (valid: {})",
                Strategy::ALL.map(Strategy::as_str).join(", ")
            ));
            Strategy::Random
        }
        Some(s) => s.parse().unwrap_or_else(|e: Error| {
            errors.push(format!("selection.strategy: {}", e.to_string().trim_start_matches("configuration error: ")));
            Strategy::Random
        }),
    };
    let m = overrides.m.or(sel.m).unwrap_or_else(|| {
        errors.push("selection.m: required".into());
        0
    });
    let seed = overrides.seed.or(sel.seed).unwrap_or_else(|| {
        errors.push("selection.seed: required; seeds are never defaulted".into());
        0
    });
    let gamma = overrides.gamma.or(sel.gamma).unwrap_or(75.0);
    if !(gamma > 0.0 && gamma < 100.0) {
        errors.push(format!("selection.gamma: must lie in (0, 100), got {gamma}"));
    }
    let threshold_on = match sel.threshold_on.as_deref() {
        None | Some("p") => ThresholdOn::P,
        Some("q") => ThresholdOn::Q,
        Some(other) => {
            errors.push(format!("selection.threshold_on: unknown `{other}` (valid: p, q)"));
            ThresholdOn::P
        }
    };
    let deita_threshold = sel.deita_threshold.unwrap_or(0.9);
    if !(deita_threshold.is_finite() && deita_threshold > 0.0) {
        errors.push(format!("selection.deita_threshold: must be > 0, got {deita_threshold}"));
    }
    let quotas = match sel.quotas {
        None => QuotaPlan::uniform(m),
        Some(raw_quotas) => {
            let mut q = BTreeMap::new();
            for (name, n) in raw_quotas {
                match name.parse::<CategoryLabel>() {
                    Ok(l) => {
                        q.insert(l, n);
                    }
                    Err(_) => errors.push(format!(
                        "selection.quotas.{name}: unknown category (valid: {})",
                        CategoryLabel::ALL.map(CategoryLabel::name).join(", ")
                    )),
                }
            }
            let sum: usize = q.values().sum();
            if sum != m {
                errors.push(format!("selection.quotas: quotas sum to {sum} but selection.m = {m}"));
            }
            QuotaPlan { m, quotas: q }
        }
    };
    let kmeans = KMeansOptions {
        max_iter: sel.kmeans.max_iter.unwrap_or(100),
        tol: sel.kmeans.tol.unwrap_or(1e-4),
    };
    if kmeans.max_iter == 0 {
        errors.push("selection.kmeans.max_iter: must be >= 1".into());
    }
    if !(kmeans.tol.is_finite() && kmeans.tol >= 0.0) {
        errors.push("selection.kmeans.tol: must be >= 0".into());
    }

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(PipelineConfig {
        inputs,
        output_dir,
        workers,
        reject_tolerance,
        scorer,
        classifier: ClassifierConfig {
            head,
            seed_set,
            kind,
            policy,
        },
        embedding: EmbeddingConfig {
            text: text_kind,
            unit_normalize: raw.embedding.unit_normalize.unwrap_or(false),
        },
        selection: SelectionConfig {
            strategy,
            m,
            seed,
            gamma,
            threshold_on,
            deita_threshold,
            quotas,
            kmeans,
        },
    })
}

impl PipelineConfig {
    /// Digest of everything that can change an output: file paths are
    /// replaced by content digests, and the output directory and worker
    /// count are left out.
    pub fn digest(&self) -> Result<String> {
        Ok(io::sha256_hex(&serde_json::to_vec(&self.digest_view()?)?))
    }

    /// The normalized, path-free view the digests are computed over.
    pub fn digest_view(&self) -> Result<Value> {
        let file = |p: &Path| io::file_digest(p);
        let inputs = self
            .inputs
            .iter()
            .map(|i| {
                Ok(serde_json::json!({
                    "content": file(&i.path)?,
                    "format": i.format,
                    "dataset": i.dataset.clone().unwrap_or_else(|| default_dataset(&i.path)),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_file = |p: &Option<PathBuf>| p.as_deref().map(file).transpose();
        Ok(serde_json::json!({
            "inputs": inputs,
            "reject_tolerance": self.reject_tolerance,
            "scorer": self.scorer,
            "classifier": {
                "head": opt_file(&self.classifier.head)?,
                "seed_set": opt_file(&self.classifier.seed_set)?,
                "kind": self.classifier.kind,
                "policy": self.classifier.policy,
            },
            "embedding": self.embedding,
            "selection": self.selection,
        }))
    }
}

pub(crate) fn default_dataset(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn setup(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.jsonl"), "").unwrap();
        let p = dir.path().join("curate.toml");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    const MINIMAL: &str = r#"
[[inputs]]
path = "a.jsonl"

[selection]
strategy = "combination_pp"
m = 14
seed = 3
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let (dir, p) = setup(MINIMAL);
        let c = load_config(&p, &Overrides::default(), &no_env).unwrap();
        assert_eq!(c.selection.gamma, 75.0);
        assert_eq!(c.classifier.policy, ConversationPolicy::MostFrequent);
        assert_eq!(c.selection.threshold_on, ThresholdOn::P);
        assert_eq!(c.selection.quotas.quota(CategoryLabel::Math), 2);
        assert_eq!(c.inputs[0].path, dir.path().join("a.jsonl"));
        assert_eq!(c.output_dir, dir.path().join("curate-out"));
        assert!(c.scorer.base_url.is_none());
    }

    #[test]
    fn errors_are_collected_and_named() {
        let (_dir, p) = setup(
            r#"
[[inputs]]
path = "missing.jsonl"
format = "xml"

[selection]
strategy = "best"
m = 10
gamma = 100
quotas = { Math = 3, Coding = 3 }
"#,
        );
        let errs = load_config(&p, &Overrides::default(), &no_env).unwrap_err().0;
        let joined = errs.join("\n");
        for needle in [
            "inputs[0].path",
            "inputs[0].format",
            "selection.strategy",
            "combination_pp",
            "selection.seed",
            "selection.gamma",
            "selection.quotas",
        ] {
            assert!(joined.contains(needle), "missing {needle} in\n{joined}");
        }
    }

    #[test]
    fn flags_and_env_override() {
        let (_dir, p) = setup(MINIMAL);
        let o = Overrides {
            strategy: Some("random".into()),
            m: Some(7),
            seed: Some(99),
            workers: Some(4),
            ..Default::default()
        };
        let env = |k: &str| match k {
            "CURATE_SCORER_URL" => Some("http://base:1".to_string()),
            "CURATE_SCORER_URL_EMBED" => Some("http://embed:2".to_string()),
            _ => None,
        };
        let c = load_config(&p, &o, &env).unwrap();
        assert_eq!((c.selection.strategy, c.selection.m, c.selection.seed, c.workers), (Strategy::Random, 7, 99, 4));
        assert_eq!(c.selection.quotas.m, 7);
        assert_eq!(c.scorer.endpoint(ScorerKind::Embed).unwrap().base_url, "http://embed:2");
        assert_eq!(c.scorer.endpoint(ScorerKind::Prm).unwrap().base_url, "http://base:1");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let (_dir, p) = setup(&format!("{MINIMAL}\n[extra]\nx = 1\n"));
        assert!(load_config(&p, &Overrides::default(), &no_env).is_err());
    }

    #[test]
    fn digest_ignores_workers_and_output_dir() {
        let (_dir, p) = setup(MINIMAL);
        let a = load_config(&p, &Overrides::default(), &no_env).unwrap();
        let b = load_config(
            &p,
            &Overrides {
                workers: Some(8),
                output_dir: Some("elsewhere".into()),
                ..Default::default()
            },
            &no_env,
        )
        .unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = load_config(
            &p,
            &Overrides {
                seed: Some(4),
                ..Default::default()
            },
            &no_env,
        )
        .unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}
