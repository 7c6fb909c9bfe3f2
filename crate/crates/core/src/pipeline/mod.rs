//! Staged, resumable orchestration of the whole selection run.
//!
//! | stage     | reads                               | writes                                   |
//! |-----------|-------------------------------------|------------------------------------------|
//! | ingest    | configured inputs                   | corpus.jsonl (+manifest), rejects.jsonl, ingest.json |
//! | classify  | corpus                              | labels.jsonl, head.txt (when trained)    |
//! | score     | corpus, labels                      | scores.jsonl, embeddings.jsonl, deita.jsonl |
//! | normalize | labels, scores                      | stats.json, preferences.jsonl            |
//! | sample    | corpus, labels, preferences, ...    | selection.jsonl, selected.jsonl (+manifest) |
//! | report    | corpus, labels, selection, ...      | report.json                              |
//!
//! Each stage checks its cache record first and recomputes only when the
//! config or an upstream artifact changed. Outputs are identical for any
//! worker count.

pub mod cache;
pub mod config;
pub mod tools;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::{
    load_config, parse_config, process_env, ClassifierConfig, ConfigErrors, EmbedText, EmbeddingConfig, InputSpec,
    Overrides, PipelineConfig, ScorerConfig, SelectionConfig,
};

use crate::classifier::{
    classify_turn, conversation_category, train_head, CategoryLabel, ClassifierHead, LabeledSeedSet, TrainOptions,
};
use crate::cluster::KMeansOptions;
use crate::corpus::{self, manifest_path, Conversation, InputFormat};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ScorerKind};
use crate::io::{self, JsonlWriter};
use crate::preference::{fit_all, score_preferences, NormalizationStats, PreferenceRecord, RawConversation, RawTurn};
use crate::quality::{score_turn_quality, QualityDetail, QualityScorer};
use crate::sampler::{
    composition_report, sample_combination_pp, sample_deita, sample_longest, sample_random, sample_top, Candidate,
    CategorySummary, CombinationOptions, Composition, QuotaPlan, Selected, SelectionResult, Strategy, ThresholdOn,
    TopKey,
};

pub const CORPUS: &str = "corpus.jsonl";
pub const REJECTS: &str = "rejects.jsonl";
pub const INGEST: &str = "ingest.json";
pub const LABELS: &str = "labels.jsonl";
pub const HEAD: &str = "head.txt";
pub const SCORES: &str = "scores.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const DEITA: &str = "deita.jsonl";
pub const STATS: &str = "stats.json";
pub const PREFERENCES: &str = "preferences.jsonl";
pub const SELECTION: &str = "selection.jsonl";
pub const SELECTED: &str = "selected.jsonl";
pub const REPORT: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Classify,
    Score,
    Normalize,
    Sample,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Classify,
        Stage::Score,
        Stage::Normalize,
        Stage::Sample,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Classify => "classify",
            Stage::Score => "score",
            Stage::Normalize => "normalize",
            Stage::Sample => "sample",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// First line of a JSONL artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub artifact: String,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub dataset: String,
    /// 1-based source line; absent for records rejected after parsing.
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub per_input: Vec<InputCounts>,
}

impl IngestSummary {
    pub fn reject_fraction(&self) -> f64 {
        let total = self.accepted + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputCounts {
    pub dataset: String,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Per-turn categories shipped with the record.
    Precomputed,
    /// One record-level category applied to every turn.
    Record,
    /// Predicted by the classifier head.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub dataset: String,
    pub turn_labels: Vec<CategoryLabel>,
    pub category: CategoryLabel,
    pub source: LabelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnScoreRow {
    pub id: String,
    pub turn: usize,
    pub category: CategoryLabel,
    pub f: Option<f64>,
    pub q: Option<f64>,
    pub scorer: QualityScorer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<QualityDetail>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeitaRow {
    pub id: String,
    pub quality: f64,
    pub complexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeSummary {
    pub stats: NormalizationStats,
    pub scored: usize,
    pub unscored: Vec<String>,
}

/// First line of `selection.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionHeader {
    pub artifact: String,
    pub config_digest: String,
    pub strategy: Strategy,
    pub m: usize,
    pub seed: u64,
    pub gamma: f64,
    pub threshold_on: ThresholdOn,
    pub kmeans: KMeansOptions,
    pub quotas: QuotaPlan,
    pub pool_size: usize,
    pub selected: usize,
    pub backfill_count: usize,
    pub shortfall: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<CategoryLabel, CategorySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub strategy: Strategy,
    pub m: usize,
    pub ingest: IngestSummary,
    pub unscored: usize,
    pub pool: Composition,
    pub selection: Composition,
    pub backfill_count: usize,
    pub shortfall: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    /// Output file name to content digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
    pub ingest: IngestSummary,
    /// True when rejects exceeded the tolerance; the run stops after ingest.
    pub reject_limit_exceeded: bool,
}

fn strategy_needs_embeddings(s: Strategy) -> bool {
    matches!(s, Strategy::CombinationPP | Strategy::Deita)
}

/// Writes a JSONL artifact with a header line and returns its digest.
fn write_artifact<H: Serialize, T: Serialize>(path: &Path, header: &H, rows: &[T]) -> Result<String> {
    let mut w = JsonlWriter::create(path)?;
    w.write(header)?;
    for r in rows {
        w.write(r)?;
    }
    w.finish()
}

/// Reads a JSONL artifact written by [`write_artifact`].
pub fn read_artifact<H: DeserializeOwned, T: DeserializeOwned>(path: &Path) -> Result<(H, Vec<T>)> {
    let mut it = io::read_jsonl::<Value>(path)?;
    let (_, first) = it
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty artifact", path.display())))??;
    let header = serde_json::from_value(first).map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    let rows = it
        .map(|r| {
            let (line, v) = r?;
            serde_json::from_value(v).map_err(|e| Error::Format(format!("{}:{line}: {e}", path.display())))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((header, rows))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    io::read_jsonl::<T>(path)?
        .map(|r| r.map(|(_, v)| v).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn embed_text(conv: &Conversation, which: EmbedText) -> String {
    match which {
        EmbedText::User => conv.user_text(),
        EmbedText::All => conv.turns.iter().map(|t| t.content.as_str()).collect::<Vec<_>>().join("\n\n"),
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    digest: String,
    stage_digests: BTreeMap<Stage, String>,
    gateway: OnceLock<Gateway>,
}

/// Config sections each stage depends on. Upstream effects arrive through
/// the artifact digests, so a stage never needs its producers' sections.
fn stage_sections(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Ingest => &["inputs", "reject_tolerance"],
        Stage::Classify => &["classifier", "scorer"],
        Stage::Score => &["scorer", "embedding", "strategy"],
        Stage::Normalize => &["classifier"],
        Stage::Sample => &["selection", "embedding"],
        Stage::Report => &[],
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let view = config.digest_view()?;
        let digest = io::sha256_hex(&serde_json::to_vec(&view)?);
        let mut stage_digests = BTreeMap::new();
        for stage in Stage::ALL {
            let mut part = serde_json::Map::new();
            part.insert("stage".into(), stage.as_str().into());
            for &key in stage_sections(stage) {
                let v = match key {
                    "strategy" => view["selection"]["strategy"].clone(),
                    k => view[k].clone(),
                };
                part.insert(key.into(), v);
            }
            stage_digests.insert(stage, io::sha256_hex(&serde_json::to_vec(&part)?));
        }
        Ok(Self {
            config,
            digest,
            stage_digests,
            gateway: OnceLock::new(),
        })
    }

    /// Uses `gateway` instead of building one from the scorer config.
    pub fn with_gateway(self, gateway: Gateway) -> Self {
        let _ = self.gateway.set(gateway);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// Digest of the config sections `stage` depends on.
    pub fn stage_digest(&self, stage: Stage) -> &str {
        &self.stage_digests[&stage]
    }

    fn header(&self, stage: Stage, artifact: &str) -> Header {
        Header {
            artifact: artifact.to_string(),
            config_digest: self.stage_digest(stage).to_string(),
        }
    }

    fn gateway(&self) -> Result<&Gateway> {
        if let Some(g) = self.gateway.get() {
            return Ok(g);
        }
        let endpoints: Vec<_> = ScorerKind::ALL
            .into_iter()
            .filter_map(|k| self.config.scorer.endpoint(k))
            .collect();
        if endpoints.is_empty() {
            return Err(Error::Config(format!(
                "this stage needs model scores but no scorer is configured; set scorer.base_url \
                 (or {}), or use {} for the built-in deterministic scorer",
                config::SCORER_URL_ENV,
                config::MOCK_URL
            )));
        }
        let g = Gateway::routed(endpoints)?.with_params(self.config.scorer.params.clone());
        let _ = self.gateway.set(g);
        Ok(self.gateway.get().expect("just set"))
    }

    /// Runs `f` on a rayon pool sized by `workers`.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }

    /// Every stage in order. Stops after ingest when rejects exceed the
    /// tolerance.
    pub fn run_all(&self) -> Result<RunSummary> {
        self.install(|| {
            let mut stages = Vec::new();
            for stage in Stage::ALL {
                stages.push(self.execute(stage)?);
                if stage == Stage::Ingest {
                    let ingest: IngestSummary = io::read_json(self.artifact(INGEST))?;
                    if ingest.reject_fraction() > self.config.reject_tolerance {
                        tracing::error!(
                            rejected = ingest.rejected,
                            accepted = ingest.accepted,
                            tolerance = self.config.reject_tolerance,
                            "too many rejected records; see {REJECTS}"
                        );
                        return Ok(RunSummary {
                            stages,
                            ingest,
                            reject_limit_exceeded: true,
                        });
                    }
                }
            }
            let ingest = io::read_json(self.artifact(INGEST))?;
            Ok(RunSummary {
                stages,
                ingest,
                reject_limit_exceeded: false,
            })
        })?
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        self.install(|| self.execute(stage))?
    }

    fn upstream(&self, stage: Stage) -> Vec<(&'static str, Stage)> {
        let needs_emb = strategy_needs_embeddings(self.config.selection.strategy);
        let mut v = match stage {
            Stage::Ingest => vec![],
            Stage::Classify => vec![(CORPUS, Stage::Ingest)],
            Stage::Score => vec![(CORPUS, Stage::Ingest), (LABELS, Stage::Classify)],
            Stage::Normalize => vec![(LABELS, Stage::Classify), (SCORES, Stage::Score)],
            Stage::Sample => vec![
                (CORPUS, Stage::Ingest),
                (LABELS, Stage::Classify),
                (PREFERENCES, Stage::Normalize),
            ],
            Stage::Report => vec![
                (CORPUS, Stage::Ingest),
                (INGEST, Stage::Ingest),
                (LABELS, Stage::Classify),
                (STATS, Stage::Normalize),
                (SELECTION, Stage::Sample),
            ],
        };
        if stage == Stage::Sample && needs_emb {
            v.push((EMBEDDINGS, Stage::Score));
            if self.config.selection.strategy == Strategy::Deita {
                v.push((DEITA, Stage::Score));
            }
        }
        v
    }

    fn execute(&self, stage: Stage) -> Result<StageOutcome> {
        let out = &self.config.output_dir;
        let mut inputs = BTreeMap::new();
        for (name, producer) in self.upstream(stage) {
            let path = self.artifact(name);
            if !path.is_file() {
                return Err(Error::precondition(format!(
                    "stage `{stage}` needs {} which does not exist; run `curate {producer}` (or `curate run`) first",
                    path.display()
                )));
            }
            inputs.insert(name.to_string(), io::file_digest(&path)?);
        }
        let key = cache::cache_key(stage.as_str(), self.stage_digest(stage), &inputs);
        if cache::is_fresh(out, stage.as_str(), &key) {
            tracing::info!(%stage, "up to date, skipping");
            let record: cache::CacheRecord = io::read_json(out.join(".cache").join(format!("{stage}.json")))?;
            return Ok(StageOutcome {
                stage,
                cached: true,
                outputs: record.outputs,
            });
        }
        tracing::info!(%stage, "running");
        let outputs = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Classify => self.classify()?,
            Stage::Score => self.score()?,
            Stage::Normalize => self.normalize()?,
            Stage::Sample => self.sample()?,
            Stage::Report => self.report()?,
        };
        cache::store(out, stage.as_str(), &key, &outputs)?;
        Ok(StageOutcome {
            stage,
            cached: false,
            outputs,
        })
    }

    fn load_corpus(&self) -> Result<Vec<Conversation>> {
        read_rows(&self.artifact(CORPUS))
    }

    fn load_labels(&self) -> Result<Vec<LabelRow>> {
        Ok(read_artifact::<Header, LabelRow>(&self.artifact(LABELS))?.1)
    }

    fn ingest(&self) -> Result<BTreeMap<String, String>> {
        let mut convs = Vec::new();
        let mut rejects = Vec::new();
        let mut summary = IngestSummary::default();
        let mut seen = HashSet::new();
        for spec in &self.config.inputs {
            let format = InputFormat::preset(&spec.format)
                .ok_or_else(|| Error::Config(format!("unknown input format `{}`", spec.format)))?;
            let dataset = spec.dataset.clone().unwrap_or_else(|| config::default_dataset(&spec.path));
            let mut reader = corpus::ingest(&spec.path, &format, Some(&dataset))?;
            let mut counts = InputCounts {
                dataset: dataset.clone(),
                ..Default::default()
            };
            for item in reader.by_ref() {
                match item {
                    Ok(conv) => {
                        if seen.insert(conv.id.clone()) {
                            counts.accepted += 1;
                            convs.push(conv);
                        } else {
                            tracing::warn!(id = %conv.id, "duplicate id; keeping the first occurrence");
                            counts.rejected += 1;
                            rejects.push(Reject {
                                dataset: dataset.clone(),
                                line: None,
                                message: format!("duplicate id `{}`", conv.id),
                            });
                        }
                    }
                    Err(Error::Record { line, message }) => {
                        counts.rejected += 1;
                        rejects.push(Reject {
                            dataset: dataset.clone(),
                            line: Some(line),
                            message,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            summary.accepted += counts.accepted;
            summary.rejected += counts.rejected;
            summary.per_input.push(counts);
        }
        let mut outputs = BTreeMap::new();
        let corpus_path = self.artifact(CORPUS);
        let manifest = corpus::emit(&convs, &corpus_path, self.stage_digest(Stage::Ingest))?;
        outputs.insert(CORPUS.to_string(), manifest.digest.clone());
        let mpath = manifest_path(&corpus_path);
        outputs.insert(file_name(&mpath), io::file_digest(&mpath)?);
        let mut w = JsonlWriter::create(self.artifact(REJECTS))?;
        for r in &rejects {
            w.write(r)?;
        }
        outputs.insert(REJECTS.to_string(), w.finish()?);
        outputs.insert(INGEST.to_string(), io::write_json(self.artifact(INGEST), &summary)?);
        tracing::info!(accepted = summary.accepted, rejected = summary.rejected, "ingested");
        Ok(outputs)
    }

    fn load_or_train_head(&self, outputs: &mut BTreeMap<String, String>) -> Result<ClassifierHead> {
        let cc = &self.config.classifier;
        if let Some(path) = &cc.head {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return ClassifierHead::from_text(&text);
        }
        let Some(seed_path) = &cc.seed_set else {
            return Err(Error::precondition(
                "some conversations carry no category and no classifier is configured; \
                 set classifier.head or classifier.seed_set",
            ));
        };
        let seed = LabeledSeedSet::load(seed_path)?;
        let texts: Vec<String> = seed.examples.iter().map(|e| e.text.clone()).collect();
        let embeddings = self.gateway()?.embed_all(&texts)?;
        let head = train_head(&seed, &embeddings, cc.kind, &TrainOptions::default())?;
        let text = head.to_text();
        io::write_bytes(&self.artifact(HEAD), text.as_bytes())?;
        outputs.insert(HEAD.to_string(), io::sha256_hex(text.as_bytes()));
        Ok(head)
    }

    fn classify(&self) -> Result<BTreeMap<String, String>> {
        let convs = self.load_corpus()?;
        let policy = self.config.classifier.policy;
        let mut outputs = BTreeMap::new();
        let mut rows: Vec<Option<(Vec<CategoryLabel>, LabelSource)>> = convs
            .iter()
            .map(|c| {
                let n = c.turn_count();
                if let Some(tc) = c.scores.as_ref().and_then(|s| s.turn_categories.as_ref()) {
                    if tc.len() == n {
                        return Some((tc.clone(), LabelSource::Precomputed));
                    }
                    tracing::warn!(id = %c.id, "turn_categories length does not match the turn count; ignoring");
                }
                c.category.map(|l| (vec![l; n], LabelSource::Record))
            })
            .collect();
        let missing: Vec<usize> = (0..convs.len()).filter(|&i| rows[i].is_none()).collect();
        if !missing.is_empty() {
            let head = self.load_or_train_head(&mut outputs)?;
            let mut texts = Vec::new();
            for &i in &missing {
                texts.extend(convs[i].exchanges().map(|(u, _)| u.to_string()));
            }
            let embeddings = self.gateway()?.embed_all(&texts)?;
            let mut at = 0;
            for &i in &missing {
                let n = convs[i].turn_count();
                let labels = embeddings[at..at + n]
                    .iter()
                    .map(|e| classify_turn(&head, e).map(|(l, _)| l))
                    .collect::<Result<Vec<_>>>()?;
                at += n;
                rows[i] = Some((labels, LabelSource::Head));
            }
        }
        let rows = convs
            .iter()
            .zip(rows)
            .map(|(c, r)| {
                let (turn_labels, source) = r.expect("every row labeled");
                Ok(LabelRow {
                    id: c.id.clone(),
                    dataset: c.dataset.clone(),
                    category: conversation_category(&turn_labels, policy)?,
                    turn_labels,
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        outputs.insert(
            LABELS.to_string(),
            write_artifact(&self.artifact(LABELS), &self.header(Stage::Classify, "labels"), &rows)?,
        );
        Ok(outputs)
    }

    fn score(&self) -> Result<BTreeMap<String, String>> {
        let convs = self.load_corpus()?;
        let labels = self.load_labels()?;
        if labels.len() != convs.len() || labels.iter().zip(&convs).any(|(l, c)| l.id != c.id) {
            return Err(Error::precondition(format!(
                "{LABELS} does not match {CORPUS}; rerun `curate classify`"
            )));
        }
        let strategy = self.config.selection.strategy;
        let mut outputs = BTreeMap::new();

        // Difficulty: precomputed where given, the rest in one batched call.
        let mut f: Vec<Vec<Option<f64>>> = Vec::with_capacity(convs.len());
        let mut f_err: HashMap<(usize, usize), String> = HashMap::new();
        let mut wanted: Vec<(usize, usize)> = Vec::new();
        let mut wanted_text: Vec<String> = Vec::new();
        for (ci, c) in convs.iter().enumerate() {
            let pre = c.scores.as_ref().and_then(|s| s.difficulty.as_ref());
            let mut row = Vec::with_capacity(c.turn_count());
            for (t, (u, _)) in c.exchanges().enumerate() {
                let v = pre.and_then(|p| p.get(t).copied().flatten());
                if v.is_none() {
                    wanted.push((ci, t));
                    wanted_text.push(u.to_string());
                }
                row.push(v);
            }
            f.push(row);
        }
        if !wanted.is_empty() {
            let results = self.gateway()?.score_difficulty_batch(&wanted_text)?;
            for ((ci, t), r) in wanted.into_iter().zip(results) {
                match r {
                    Ok(v) => f[ci][t] = Some(v),
                    Err(e) => {
                        f_err.insert((ci, t), format!("difficulty: {e}"));
                    }
                }
            }
        }

        let needs_quality = convs.iter().any(|c| {
            let pre = c.scores.as_ref().and_then(|s| s.quality.as_ref());
            (0..c.turn_count()).any(|t| pre.and_then(|p| p.get(t).copied().flatten()).is_none())
        });
        let gw = if needs_quality { Some(self.gateway()?) } else { None };

        let rows: Vec<Result<Vec<TurnScoreRow>>> = convs
            .par_iter()
            .zip(&labels)
            .enumerate()
            .map(|(ci, (c, lab))| {
                let pre = c.scores.as_ref().and_then(|s| s.quality.as_ref());
                c.exchanges()
                    .enumerate()
                    .map(|(t, (u, r))| {
                        let category = lab.turn_labels[t];
                        let mut row = TurnScoreRow {
                            id: c.id.clone(),
                            turn: t,
                            category,
                            f: f[ci][t],
                            q: None,
                            scorer: QualityScorer::for_category(category),
                            detail: None,
                            errors: f_err.get(&(ci, t)).cloned().into_iter().collect(),
                        };
                        if let Some(q) = pre.and_then(|p| p.get(t).copied().flatten()) {
                            row.q = Some(q);
                            return Ok(row);
                        }
                        match score_turn_quality(gw.expect("gateway present"), category, u, r) {
                            Ok(s) => {
                                row.q = Some(s.value);
                                row.detail = Some(s.detail);
                            }
                            Err(e @ Error::Config(_)) => return Err(e),
                            Err(e) => row.errors.push(format!("quality: {e}")),
                        }
                        Ok(row)
                    })
                    .collect()
            })
            .collect();
        let rows: Vec<TurnScoreRow> = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        let failed = rows.iter().filter(|r| !r.errors.is_empty()).count();
        if failed > 0 {
            tracing::warn!(turns = failed, "turns with scorer failures; they stay unscored");
        }
        outputs.insert(
            SCORES.to_string(),
            write_artifact(&self.artifact(SCORES), &self.header(Stage::Score, "scores"), &rows)?,
        );

        if strategy_needs_embeddings(strategy) {
            let which = self.config.embedding.text;
            let need: Vec<usize> = (0..convs.len()).filter(|&i| convs[i].embedding.is_none()).collect();
            let mut embs: Vec<Option<Vec<f32>>> = convs.iter().map(|c| c.embedding.clone()).collect();
            if !need.is_empty() {
                let texts: Vec<String> = need.iter().map(|&i| embed_text(&convs[i], which)).collect();
                for (i, r) in need.into_iter().zip(self.gateway()?.embed_batch(&texts)?) {
                    match r {
                        Ok(e) => embs[i] = Some(e),
                        Err(e) => tracing::warn!(id = %convs[i].id, error = %e, "embedding failed"),
                    }
                }
            }
            let rows: Vec<EmbeddingRow> = convs
                .iter()
                .zip(embs)
                .filter_map(|(c, e)| {
                    e.map(|embedding| EmbeddingRow {
                        id: c.id.clone(),
                        embedding,
                    })
                })
                .collect();
            outputs.insert(
                EMBEDDINGS.to_string(),
                write_artifact(&self.artifact(EMBEDDINGS), &self.header(Stage::Score, "embeddings"), &rows)?,
            );
        }

        if strategy == Strategy::Deita {
            let rows: Vec<Result<Option<DeitaRow>>> = convs
                .par_iter()
                .map(|c| {
                    let pre = c.scores.as_ref().and_then(|s| s.deita_quality.zip(s.deita_complexity));
                    let pair = match pre {
                        Some(p) => p,
                        None => match self.gateway()?.score_deita(&c.turns) {
                            Ok(p) => p,
                            Err(e @ Error::Config(_)) => return Err(e),
                            Err(e) => {
                                tracing::warn!(id = %c.id, error = %e, "deita scoring failed");
                                return Ok(None);
                            }
                        },
                    };
                    Ok(Some(DeitaRow {
                        id: c.id.clone(),
                        quality: pair.0,
                        complexity: pair.1,
                    }))
                })
                .collect();
            let rows: Vec<DeitaRow> = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            outputs.insert(
                DEITA.to_string(),
                write_artifact(&self.artifact(DEITA), &self.header(Stage::Score, "deita"), &rows)?,
            );
        }
        Ok(outputs)
    }

    fn normalize(&self) -> Result<BTreeMap<String, String>> {
        let labels = self.load_labels()?;
        let (_, scores): (Header, Vec<TurnScoreRow>) = read_artifact(&self.artifact(SCORES))?;
        let mut by_id: HashMap<&str, Vec<&TurnScoreRow>> = HashMap::new();
        for s in &scores {
            by_id.entry(s.id.as_str()).or_default().push(s);
        }
        let raw: Vec<RawConversation> = labels
            .iter()
            .map(|l| {
                let mut turns = by_id.remove(l.id.as_str()).unwrap_or_default();
                turns.sort_by_key(|t| t.turn);
                RawConversation {
                    id: l.id.clone(),
                    turns: turns
                        .into_iter()
                        .map(|t| RawTurn {
                            category: t.category,
                            f: t.f,
                            q: t.q,
                        })
                        .collect(),
                }
            })
            .collect();
        let stats = fit_all(&raw)?;
        let prefs = score_preferences(&raw, &stats, self.config.classifier.policy)?;
        let summary = NormalizeSummary {
            stats,
            scored: prefs.records.len(),
            unscored: prefs.unscored,
        };
        let mut outputs = BTreeMap::new();
        outputs.insert(STATS.to_string(), io::write_json(self.artifact(STATS), &summary)?);
        outputs.insert(
            PREFERENCES.to_string(),
            write_artifact(&self.artifact(PREFERENCES), &self.header(Stage::Normalize, "preferences"), &prefs.records)?,
        );
        Ok(outputs)
    }

    fn candidates(&self, convs: &[Conversation], labels: &[LabelRow]) -> Result<Vec<Candidate>> {
        let (_, prefs): (Header, Vec<PreferenceRecord>) = read_artifact(&self.artifact(PREFERENCES))?;
        let prefs: HashMap<String, PreferenceRecord> = prefs.into_iter().map(|p| (p.id.clone(), p)).collect();
        let mut embs: HashMap<String, Vec<f32>> = HashMap::new();
        if self.artifact(EMBEDDINGS).is_file() && strategy_needs_embeddings(self.config.selection.strategy) {
            let (_, rows): (Header, Vec<EmbeddingRow>) = read_artifact(&self.artifact(EMBEDDINGS))?;
            embs = rows.into_iter().map(|r| (r.id, r.embedding)).collect();
        }
        let mut deita: HashMap<String, (f64, f64)> = HashMap::new();
        if self.config.selection.strategy == Strategy::Deita {
            let (_, rows): (Header, Vec<DeitaRow>) = read_artifact(&self.artifact(DEITA))?;
            deita = rows.into_iter().map(|r| (r.id, (r.quality, r.complexity))).collect();
        }
        Ok(convs
            .iter()
            .zip(labels)
            .map(|(c, l)| {
                let pref = prefs.get(&c.id);
                Candidate {
                    id: c.id.clone(),
                    category: pref.map_or(l.category, |p| p.category),
                    dataset: c.dataset.clone(),
                    f: pref.map(|p| p.f),
                    q: pref.map(|p| p.q),
                    p: pref.map(|p| p.p),
                    response_chars: c.response_chars(),
                    embedding: embs.remove(&c.id),
                    deita: deita.get(&c.id).copied(),
                }
            })
            .collect())
    }

    fn sample(&self) -> Result<BTreeMap<String, String>> {
        let convs = self.load_corpus()?;
        let labels = self.load_labels()?;
        if labels.len() != convs.len() {
            return Err(Error::precondition(format!("{LABELS} does not match {CORPUS}; rerun `curate classify`")));
        }
        let all = self.candidates(&convs, &labels)?;
        let sel = &self.config.selection;
        let pool: Vec<Candidate> = match sel.strategy {
            Strategy::Random | Strategy::Longest => all,
            Strategy::Quality | Strategy::Difficulty | Strategy::Combination => {
                all.into_iter().filter(|c| c.p.is_some()).collect()
            }
            Strategy::CombinationPP => all.into_iter().filter(|c| c.p.is_some() && c.embedding.is_some()).collect(),
            Strategy::Deita => all
                .into_iter()
                .filter(|c| c.deita.is_some() && (sel.deita_threshold >= 1.0 || c.embedding.is_some()))
                .collect(),
        };
        let result: SelectionResult = match sel.strategy {
            Strategy::Random => sample_random(&pool, sel.m, sel.seed)?,
            Strategy::Longest => sample_longest(&pool, sel.m)?,
            Strategy::Quality => sample_top(&pool, sel.m, TopKey::Quality)?,
            Strategy::Difficulty => sample_top(&pool, sel.m, TopKey::Difficulty)?,
            Strategy::Combination => sample_top(&pool, sel.m, TopKey::Preference)?,
            Strategy::Deita => sample_deita(&pool, sel.m, sel.deita_threshold)?,
            Strategy::CombinationPP => sample_combination_pp(
                &pool,
                &sel.quotas,
                &CombinationOptions {
                    gamma: sel.gamma,
                    threshold_on: sel.threshold_on,
                    seed: sel.seed,
                    kmeans: sel.kmeans,
                    unit_normalize: self.config.embedding.unit_normalize,
                },
            )?,
        };
        let header = SelectionHeader {
            artifact: "selection".into(),
            config_digest: self.stage_digest(Stage::Sample).to_string(),
            strategy: sel.strategy,
            m: sel.m,
            seed: sel.seed,
            gamma: sel.gamma,
            threshold_on: sel.threshold_on,
            kmeans: sel.kmeans,
            quotas: sel.quotas.clone(),
            pool_size: pool.len(),
            selected: result.selected.len(),
            backfill_count: result.backfill_count,
            shortfall: result.shortfall,
            per_category: result.per_category.clone(),
        };
        let mut outputs = BTreeMap::new();
        outputs.insert(
            SELECTION.to_string(),
            write_artifact(&self.artifact(SELECTION), &header, &result.selected)?,
        );
        let by_id: HashMap<&str, &Conversation> = convs.iter().map(|c| (c.id.as_str(), c)).collect();
        let chosen: Vec<&Conversation> = result.selected.iter().map(|s| by_id[s.id.as_str()]).collect();
        let selected_path = self.artifact(SELECTED);
        let manifest = corpus::emit(chosen, &selected_path, self.stage_digest(Stage::Sample))?;
        outputs.insert(SELECTED.to_string(), manifest.digest);
        let mpath = manifest_path(&selected_path);
        outputs.insert(file_name(&mpath), io::file_digest(&mpath)?);
        Ok(outputs)
    }

    fn report(&self) -> Result<BTreeMap<String, String>> {
        let labels = self.load_labels()?;
        let ingest: IngestSummary = io::read_json(self.artifact(INGEST))?;
        let stats: NormalizeSummary = io::read_json(self.artifact(STATS))?;
        let (header, selected): (SelectionHeader, Vec<Selected>) = read_artifact(&self.artifact(SELECTION))?;
        let dataset: HashMap<&str, &str> = labels.iter().map(|l| (l.id.as_str(), l.dataset.as_str())).collect();
        let report = Report {
            config_digest: self.digest.clone(),
            strategy: header.strategy,
            m: header.m,
            ingest,
            unscored: stats.unscored.len(),
            pool: composition_report(labels.iter().map(|l| (l.category, l.dataset.as_str()))),
            selection: composition_report(
                selected
                    .iter()
                    .map(|s| (s.category, dataset.get(s.id.as_str()).copied().unwrap_or(""))),
            ),
            backfill_count: header.backfill_count,
            shortfall: header.shortfall,
        };
        let mut outputs = BTreeMap::new();
        outputs.insert(REPORT.to_string(), io::write_json(self.artifact(REPORT), &report)?);
        Ok(outputs)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
