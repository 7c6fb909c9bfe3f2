//! Normalization and aggregation of turn scores into one preference score
//! per conversation.
//!
//! Each stream (difficulty, and each quality scorer) is min-max scaled with
//! its 1st and 99th percentiles standing in for min and max. Percentiles
//! are fit on turn-level values before any averaging. A conversation's
//! difficulty is the mean over its turns; its quality is the mean over the
//! turns whose category matches the conversation's main category.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{conversation_category, CategoryLabel, ConversationPolicy};
use crate::error::{Error, Result};
use crate::quality::QualityScorer;

pub const DIFFICULTY_STREAM: &str = "difficulty";

/// Stream name for a quality scorer.
pub fn quality_stream(scorer: QualityScorer) -> &'static str {
    scorer.as_str()
}

/// Value at percentile `pct` of an ascending sample, nearest-rank method:
/// the element at 1-based rank `ceil(pct / 100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    // pct * n first: 0.99 * 100 is not exactly 99 in floating point
    let rank = (pct * n as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub p1: f64,
    pub p99: f64,
    pub count: usize,
}

/// Fits 1st/99th percentiles over the finite values of a stream.
pub fn fit_stats(values: &[f64]) -> Result<StreamStats> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::precondition(format!("non-finite score {bad}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p1 = nearest_rank(&sorted, 1.0).ok_or_else(|| Error::precondition("empty score stream"))?;
    let p99 = nearest_rank(&sorted, 99.0).expect("non-empty");
    Ok(StreamStats {
        p1,
        p99,
        count: sorted.len(),
    })
}

/// `clamp((v - p1) / (p99 - p1), 0, 1)`, or 0.5 for a degenerate stream.
pub fn normalize(value: f64, stats: &StreamStats) -> f64 {
    if stats.p1 == stats.p99 {
        return 0.5;
    }
    ((value - stats.p1) / (stats.p99 - stats.p1)).clamp(0.0, 1.0)
}

pub fn combine(f: f64, q: f64) -> f64 {
    f * q
}

/// Fitted stats per stream name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub streams: BTreeMap<String, StreamStats>,
}

impl NormalizationStats {
    pub fn get(&self, stream: &str) -> Option<&StreamStats> {
        self.streams.get(stream)
    }
}

/// Raw scores of one exchange. `None` means the scorer failed or was not
/// run; such values are skipped, never zero-filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub category: CategoryLabel,
    pub f: Option<f64>,
    pub q: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawConversation {
    pub id: String,
    pub turns: Vec<RawTurn>,
}

/// Fits every stream that has at least one value. Streams with no values
/// are absent; turns that need them stay unscored.
pub fn fit_all(conversations: &[RawConversation]) -> Result<NormalizationStats> {
    let mut pools: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for t in conversations.iter().flat_map(|c| &c.turns) {
        if let Some(f) = t.f {
            pools.entry(DIFFICULTY_STREAM).or_default().push(f);
        }
        if let Some(q) = t.q {
            let s = quality_stream(QualityScorer::for_category(t.category));
            pools.entry(s).or_default().push(q);
        }
    }
    let mut stats = NormalizationStats::default();
    for (name, values) in pools {
        stats.streams.insert(name.to_string(), fit_stats(&values)?);
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnDetail {
    pub l: CategoryLabel,
    pub f: Option<f64>,
    pub q: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub category: CategoryLabel,
    pub f: f64,
    pub q: f64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<TurnDetail>,
}

/// Conversation-level scores from already-normalized turn scores. Returns
/// `None` when no turn has a difficulty or no turn of the main category has
/// a quality score.
pub fn aggregate_conversation(
    id: &str,
    turns: &[TurnDetail],
    policy: ConversationPolicy,
) -> Result<Option<PreferenceRecord>> {
    let labels: Vec<CategoryLabel> = turns.iter().map(|t| t.l).collect();
    let category = conversation_category(&labels, policy)?;
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    let f = mean(&mut turns.iter().filter_map(|t| t.f));
    let q = mean(&mut turns.iter().filter(|t| t.l == category).filter_map(|t| t.q));
    Ok(match (f, q) {
        (Some(f), Some(q)) => Some(PreferenceRecord {
            id: id.to_string(),
            category,
            f,
            q,
            p: combine(f, q),
            turns: turns.to_vec(),
        }),
        _ => None,
    })
}

/// Normalizes one conversation's turns with fitted stats.
pub fn normalize_turns(turns: &[RawTurn], stats: &NormalizationStats) -> Vec<TurnDetail> {
    let diff = stats.get(DIFFICULTY_STREAM);
    turns
        .iter()
        .map(|t| {
            let qs = stats.get(quality_stream(QualityScorer::for_category(t.category)));
            TurnDetail {
                l: t.category,
                f: t.f.zip(diff).map(|(v, s)| normalize(v, s)),
                q: t.q.zip(qs).map(|(v, s)| normalize(v, s)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preferences {
    pub records: Vec<PreferenceRecord>,
    /// Ids of conversations that could not be scored.
    pub unscored: Vec<String>,
}

/// Normalizes and aggregates every conversation, preserving input order.
pub fn score_preferences(
    conversations: &[RawConversation],
    stats: &NormalizationStats,
    policy: ConversationPolicy,
) -> Result<Preferences> {
    let results: Vec<Result<(String, Option<PreferenceRecord>)>> = conversations
        .par_iter()
        .map(|c| {
            let turns = normalize_turns(&c.turns, stats);
            aggregate_conversation(&c.id, &turns, policy).map(|r| (c.id.clone(), r))
        })
        .collect();
    let mut out = Preferences::default();
    for r in results {
        match r? {
            (_, Some(rec)) => out.records.push(rec),
            (id, None) => out.unscored.push(id),
        }
    }
    if !out.unscored.is_empty() {
        tracing::warn!(count = out.unscored.len(), "conversations left unscored");
    }
    Ok(out)
}
