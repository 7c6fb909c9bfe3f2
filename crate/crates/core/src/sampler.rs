//! Subset selection strategies, the skewed-pool builder and composition
//! reports.
//!
//! Every ranking breaks ties by ascending id after the descending key, so
//! each strategy is a total order and selections are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::CategoryLabel;
use crate::cluster::{kmeans, EmbeddingSet, KMeansOptions};
use crate::error::{Error, Result};
use crate::preference::nearest_rank;

/// What the sampler knows about one conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub category: CategoryLabel,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub f: Option<f64>,
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub response_chars: usize,
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
    /// `(quality, complexity)`.
    #[serde(default)]
    pub deita: Option<(f64, f64)>,
}

impl Candidate {
    pub fn new(id: impl Into<String>, category: CategoryLabel) -> Self {
        Self {
            id: id.into(),
            category,
            dataset: String::new(),
            f: None,
            q: None,
            p: None,
            response_chars: 0,
            embedding: None,
            deita: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Longest,
    Quality,
    Difficulty,
    Combination,
    #[serde(rename = "combination_pp", alias = "combination++")]
    CombinationPP,
    Deita,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Random,
        Strategy::Longest,
        Strategy::Quality,
        Strategy::Difficulty,
        Strategy::Combination,
        Strategy::CombinationPP,
        Strategy::Deita,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Longest => "longest",
            Strategy::Quality => "quality",
            Strategy::Difficulty => "difficulty",
            Strategy::Combination => "combination",
            Strategy::CombinationPP => "combination_pp",
            Strategy::Deita => "deita",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "combination++" {
            return Ok(Strategy::CombinationPP);
        }
        Strategy::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Strategy::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown strategy `{s}` (valid: {})", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKey {
    Quality,
    Difficulty,
    Preference,
}

/// Which score distribution the per-category threshold is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdOn {
    #[default]
    P,
    Q,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Via {
    /// Best member of a cluster that cleared the threshold.
    Cluster,
    /// Top-up after cluster representatives.
    Backfill,
    /// Plain ranked or random pick.
    Rank,
}

/// One line of the selection manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: String,
    pub category: CategoryLabel,
    pub cluster: Option<usize>,
    pub p: Option<f64>,
    /// 1-based position in the selection.
    pub rank: usize,
    pub via: Via,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub m: usize,
    pub quotas: BTreeMap<CategoryLabel, usize>,
}

impl QuotaPlan {
    /// `m / 7` per category; the remainder goes one each to the lowest
    /// category codes (Math, Coding, Generation, ...).
    pub fn uniform(m: usize) -> Self {
        let n = CategoryLabel::COUNT;
        let quotas = CategoryLabel::ALL
            .iter()
            .map(|&l| (l, m / n + usize::from(l.code() < m % n)))
            .collect();
        Self { m, quotas }
    }

    pub fn new(quotas: BTreeMap<CategoryLabel, usize>) -> Self {
        Self {
            m: quotas.values().sum(),
            quotas,
        }
    }

    pub fn quota(&self, l: CategoryLabel) -> usize {
        self.quotas.get(&l).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.quotas.values().sum();
        if sum != self.m {
            return Err(Error::Config(format!("quotas sum to {sum} but m = {}", self.m)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub quota: usize,
    /// Quota after shortfall redistribution.
    pub effective_quota: usize,
    pub available: usize,
    pub tau: Option<f64>,
    pub discarded_clusters: Vec<usize>,
    pub from_clusters: usize,
    pub backfilled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub m: usize,
    pub selected: Vec<Selected>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<CategoryLabel, CategorySummary>,
    pub backfill_count: usize,
    pub shortfall: usize,
}

impl SelectionResult {
    fn ranked(strategy: Strategy, m: usize, picks: Vec<(&Candidate, Option<usize>, Via)>) -> Self {
        let backfill_count = picks.iter().filter(|p| p.2 == Via::Backfill).count();
        let shortfall = m.saturating_sub(picks.len());
        let selected = picks
            .into_iter()
            .enumerate()
            .map(|(i, (c, cluster, via))| Selected {
                id: c.id.clone(),
                category: c.category,
                cluster,
                p: c.p,
                rank: i + 1,
                via,
            })
            .collect();
        Self {
            strategy,
            m,
            selected,
            per_category: BTreeMap::new(),
            backfill_count,
            shortfall,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.selected.iter().map(|s| s.id.as_str()).collect()
    }
}

fn desc_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn check_pool(pool: &[Candidate]) -> Result<()> {
    let mut seen = HashSet::with_capacity(pool.len());
    for c in pool {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::precondition(format!("duplicate id `{}` in pool", c.id)));
        }
        for v in [c.f, c.q, c.p].into_iter().flatten() {
            if !v.is_finite() {
                return Err(Error::precondition(format!("`{}` has a non-finite score", c.id)));
            }
        }
    }
    Ok(())
}

fn warn_short(strategy: Strategy, m: usize, available: usize) {
    if m > available {
        tracing::warn!(%strategy, m, available, "pool smaller than requested subset");
    }
}

/// Ranks by `key` (descending, ties by id) over candidates that have one.
fn top_by<'a>(pool: &'a [Candidate], m: usize, key: impl Fn(&Candidate) -> Option<f64>) -> Vec<&'a Candidate> {
    let mut keyed: Vec<(f64, &Candidate)> = pool.iter().filter_map(|c| key(c).map(|k| (k, c))).collect();
    keyed.sort_by(|a, b| desc_then_id((a.0, &a.1.id), (b.0, &b.1.id)));
    keyed.into_iter().take(m).map(|(_, c)| c).collect()
}

pub fn sample_random(pool: &[Candidate], m: usize, seed: u64) -> Result<SelectionResult> {
    check_pool(pool)?;
    warn_short(Strategy::Random, m, pool.len());
    let mut sorted: Vec<&Candidate> = pool.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, sorted.len(), m.min(sorted.len()))
        .into_iter()
        .map(|i| (sorted[i], None, Via::Rank))
        .collect();
    Ok(SelectionResult::ranked(Strategy::Random, m, picks))
}

pub fn sample_longest(pool: &[Candidate], m: usize) -> Result<SelectionResult> {
    check_pool(pool)?;
    warn_short(Strategy::Longest, m, pool.len());
    let picks = top_by(pool, m, |c| Some(c.response_chars as f64))
        .into_iter()
        .map(|c| (c, None, Via::Rank))
        .collect();
    Ok(SelectionResult::ranked(Strategy::Longest, m, picks))
}

pub fn sample_top(pool: &[Candidate], m: usize, key: TopKey) -> Result<SelectionResult> {
    check_pool(pool)?;
    let (strategy, get): (Strategy, fn(&Candidate) -> Option<f64>) = match key {
        TopKey::Quality => (Strategy::Quality, |c| c.q),
        TopKey::Difficulty => (Strategy::Difficulty, |c| c.f),
        TopKey::Preference => (Strategy::Combination, |c| c.p),
    };
    warn_short(strategy, m, pool.iter().filter(|c| get(c).is_some()).count());
    let picks = top_by(pool, m, get).into_iter().map(|c| (c, None, Via::Rank)).collect();
    Ok(SelectionResult::ranked(strategy, m, picks))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Greedy dissimilarity filter over complexity × quality order, then
/// backfill in the same order. A threshold of 1.0 or more disables the
/// filter.
pub fn sample_deita(pool: &[Candidate], m: usize, dissim_threshold: f64) -> Result<SelectionResult> {
    check_pool(pool)?;
    if dissim_threshold.is_nan() {
        return Err(Error::Config("deita threshold is NaN".into()));
    }
    let ranked = top_by(pool, usize::MAX, |c| c.deita.map(|(q, cx)| q * cx));
    warn_short(Strategy::Deita, m, ranked.len());
    let filter = dissim_threshold < 1.0;
    if filter {
        if let Some(c) = ranked.iter().find(|c| c.embedding.is_none()) {
            return Err(Error::precondition(format!("`{}` has no embedding", c.id)));
        }
    }
    let mut taken = vec![false; ranked.len()];
    let mut picks: Vec<(&Candidate, Option<usize>, Via)> = Vec::new();
    let mut kept: Vec<&[f32]> = Vec::new();
    for (i, c) in ranked.iter().enumerate() {
        if picks.len() == m {
            break;
        }
        if filter {
            let e = c.embedding.as_deref().expect("checked above");
            if kept.iter().any(|k| cosine(k, e) >= dissim_threshold) {
                continue;
            }
            kept.push(e);
        }
        taken[i] = true;
        picks.push((c, None, Via::Rank));
    }
    for (i, c) in ranked.iter().enumerate() {
        if picks.len() >= m {
            break;
        }
        if !taken[i] {
            picks.push((c, None, Via::Backfill));
        }
    }
    Ok(SelectionResult::ranked(Strategy::Deita, m, picks))
}

/// Caps each quota at what the category holds and hands the shortfall out
/// one item at a time to categories with spare members, largest quota
/// first (ties by category code), cycling until it is gone or nobody has
/// spare members.
pub fn effective_quotas(
    plan: &QuotaPlan,
    available: &BTreeMap<CategoryLabel, usize>,
) -> (BTreeMap<CategoryLabel, usize>, usize) {
    let avail = |l: CategoryLabel| available.get(&l).copied().unwrap_or(0);
    let mut eff: BTreeMap<CategoryLabel, usize> = CategoryLabel::ALL
        .iter()
        .map(|&l| (l, plan.quota(l).min(avail(l))))
        .collect();
    let mut short = plan.m - eff.values().sum::<usize>();
    let mut order: Vec<CategoryLabel> = CategoryLabel::ALL.to_vec();
    order.sort_by(|a, b| plan.quota(*b).cmp(&plan.quota(*a)).then(a.code().cmp(&b.code())));
    while short > 0 {
        let mut progressed = false;
        for &l in &order {
            if short == 0 {
                break;
            }
            let e = eff.get_mut(&l).expect("all categories present");
            if *e < avail(l) {
                *e += 1;
                short -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    (eff, short)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationOptions {
    pub gamma: f64,
    pub threshold_on: ThresholdOn,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    pub unit_normalize: bool,
}

impl CombinationOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            gamma: 75.0,
            threshold_on: ThresholdOn::P,
            seed,
            kmeans: KMeansOptions::default(),
            unit_normalize: false,
        }
    }
}

type CategoryPicks<'a> = (Vec<(&'a Candidate, Option<usize>, Via)>, CategorySummary);

fn select_category<'a>(
    label: CategoryLabel,
    members: &[&'a Candidate],
    quota: usize,
    effective: usize,
    opts: &CombinationOptions,
) -> Result<CategoryPicks<'a>> {
    let mut summary = CategorySummary {
        quota,
        effective_quota: effective,
        available: members.len(),
        ..Default::default()
    };
    if effective == 0 {
        return Ok((Vec::new(), summary));
    }
    let p = |c: &Candidate| c.p.expect("members are scored");
    let mut dist: Vec<f64> = members
        .iter()
        .map(|c| match opts.threshold_on {
            ThresholdOn::P => p(c),
            ThresholdOn::Q => c.q.unwrap_or(0.0),
        })
        .collect();
    dist.sort_by(f64::total_cmp);
    let tau = nearest_rank(&dist, opts.gamma).expect("category is non-empty");
    summary.tau = Some(tau);

    let rows = members
        .iter()
        .map(|c| {
            c.embedding
                .clone()
                .map(|e| (c.id.clone(), e))
                .ok_or_else(|| Error::precondition(format!("`{}` has no embedding", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::new(rows)?;
    if set.len() != members.len() {
        return Err(Error::precondition(format!("{label}: non-finite embeddings in pool")));
    }
    if opts.unit_normalize {
        set = set.unit_normalized();
    }
    let clustering = kmeans(&set, effective, opts.seed.wrapping_add(label.code() as u64), &opts.kmeans)?;

    let mut by_id: Vec<&Candidate> = members.to_vec();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    // by_id[i] has id clustering.ids[i]
    let mut best: Vec<Option<usize>> = vec![None; effective];
    for (i, &k) in clustering.assignments.iter().enumerate() {
        let better = match best[k] {
            None => true,
            Some(b) => desc_then_id((p(by_id[i]), &by_id[i].id), (p(by_id[b]), &by_id[b].id)) == Ordering::Less,
        };
        if better {
            best[k] = Some(i);
        }
    }
    let mut reps: Vec<(usize, usize)> = Vec::new();
    for (k, b) in best.iter().enumerate() {
        let b = b.expect("no empty clusters");
        if p(by_id[b]) >= tau {
            reps.push((b, k));
        } else {
            summary.discarded_clusters.push(k);
        }
    }
    reps.sort_by(|a, b| desc_then_id((p(by_id[a.0]), &by_id[a.0].id), (p(by_id[b.0]), &by_id[b.0].id)));
    let mut taken = vec![false; by_id.len()];
    let mut picks: Vec<(&Candidate, Option<usize>, Via)> = reps
        .iter()
        .map(|&(i, k)| {
            taken[i] = true;
            (by_id[i], Some(k), Via::Cluster)
        })
        .collect();
    summary.from_clusters = picks.len();
    let mut rest: Vec<usize> = (0..by_id.len()).filter(|&i| !taken[i]).collect();
    rest.sort_by(|&a, &b| desc_then_id((p(by_id[a]), &by_id[a].id), (p(by_id[b]), &by_id[b].id)));
    for i in rest.into_iter().take(effective - picks.len()) {
        picks.push((by_id[i], Some(clustering.assignments[i]), Via::Backfill));
    }
    summary.backfilled = picks.len() - summary.from_clusters;
    Ok((picks, summary))
}

/// Cluster-and-quota selection. Per category: k-means with one cluster per
/// quota slot, keep each cluster's best member if it reaches the
/// category's `gamma`-th percentile, then top up with the best remaining
/// members. Categories are concatenated in code order.
pub fn sample_combination_pp(
    pool: &[Candidate],
    plan: &QuotaPlan,
    opts: &CombinationOptions,
) -> Result<SelectionResult> {
    check_pool(pool)?;
    plan.validate()?;
    if !(opts.gamma > 0.0 && opts.gamma < 100.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 100), got {}", opts.gamma)));
    }
    let mut groups: BTreeMap<CategoryLabel, Vec<&Candidate>> = BTreeMap::new();
    for c in pool.iter().filter(|c| c.p.is_some()) {
        groups.entry(c.category).or_default().push(c);
    }
    let available = groups.iter().map(|(l, v)| (*l, v.len())).collect();
    let (effective, shortfall) = effective_quotas(plan, &available);
    for l in CategoryLabel::ALL {
        let (q, e) = (plan.quota(l), effective[&l]);
        if e < q {
            tracing::warn!(category = %l, quota = q, available = e, "category short of its quota");
        }
    }
    if shortfall > 0 {
        tracing::warn!(shortfall, "pool cannot fill the plan");
    }
    let empty = Vec::new();
    let per: Vec<Result<(CategoryLabel, CategoryPicks)>> = CategoryLabel::ALL
        .par_iter()
        .map(|&l| {
            let members = groups.get(&l).unwrap_or(&empty);
            select_category(l, members, plan.quota(l), effective[&l], opts).map(|r| (l, r))
        })
        .collect();
    let mut picks = Vec::new();
    let mut per_category = BTreeMap::new();
    for r in per {
        let (l, (p, summary)) = r?;
        picks.extend(p);
        per_category.insert(l, summary);
    }
    let mut result = SelectionResult::ranked(Strategy::CombinationPP, plan.m, picks);
    result.per_category = per_category;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewedPool {
    pub chosen: Vec<CategoryLabel>,
    /// Kept ids, ascending.
    pub kept: Vec<String>,
    pub residue: BTreeMap<CategoryLabel, usize>,
}

/// Keeps every item of two randomly chosen categories and a uniform
/// `residue_fraction` (rounded to nearest) of each other category.
pub fn build_skewed_pool(
    items: &[(String, CategoryLabel)],
    seed: u64,
    residue_fraction: f64,
) -> Result<SkewedPool> {
    if !(0.0..=1.0).contains(&residue_fraction) {
        return Err(Error::Config(format!("residue fraction {residue_fraction} outside [0, 1]")));
    }
    let mut groups: BTreeMap<CategoryLabel, Vec<&str>> = BTreeMap::new();
    for (id, l) in items {
        groups.entry(*l).or_default().push(id);
    }
    let present: Vec<CategoryLabel> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<CategoryLabel> = if present.len() <= 2 {
        present.clone()
    } else {
        index::sample(&mut rng, present.len(), 2).into_iter().map(|i| present[i]).collect()
    };
    chosen.sort();
    let mut kept: Vec<String> = Vec::new();
    let mut residue = BTreeMap::new();
    for (l, mut ids) in groups {
        ids.sort_unstable();
        if chosen.contains(&l) {
            kept.extend(ids.iter().map(|s| s.to_string()));
            continue;
        }
        let n = (residue_fraction * ids.len() as f64).round() as usize;
        let mut pick: Vec<usize> = index::sample(&mut rng, ids.len(), n).into_vec();
        pick.sort_unstable();
        kept.extend(pick.into_iter().map(|i| ids[i].to_string()));
        residue.insert(l, n);
    }
    kept.sort();
    Ok(SkewedPool { chosen, kept, residue })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub count: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub total: usize,
    pub per_category: BTreeMap<CategoryLabel, Share>,
    pub per_source: BTreeMap<String, Share>,
}

pub fn composition_report<'a>(items: impl IntoIterator<Item = (CategoryLabel, &'a str)>) -> Composition {
    let mut cats: BTreeMap<CategoryLabel, usize> = BTreeMap::new();
    let mut srcs: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (l, src) in items {
        *cats.entry(l).or_default() += 1;
        *srcs.entry(src.to_string()).or_default() += 1;
        total += 1;
    }
    let share = |count: usize| Share {
        count,
        fraction: count as f64 / total as f64,
    };
    Composition {
        total,
        per_category: cats.into_iter().map(|(k, n)| (k, share(n))).collect(),
        per_source: srcs.into_iter().map(|(k, n)| (k, share(n))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy as _};
    use CategoryLabel::*;

    fn cand(id: &str, l: CategoryLabel, p: f64, emb: [f32; 2]) -> Candidate {
        Candidate {
            p: Some(p),
            q: Some(p),
            f: Some(1.0),
            embedding: Some(emb.to_vec()),
            ..Candidate::new(id, l)
        }
    }

    #[test]
    fn uniform_quotas() {
        let plan = QuotaPlan::uniform(10);
        assert_eq!(plan.quota(Math), 2);
        assert_eq!(plan.quota(Coding), 2);
        assert_eq!(plan.quota(Generation), 2);
        assert_eq!(plan.quota(Reasoning), 1);
        assert_eq!(plan.quotas.values().sum::<usize>(), 10);
        let bad = QuotaPlan {
            m: 5,
            quotas: [(Math, 2)].into_iter().collect(),
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn random_is_seeded_and_saturates() {
        let pool: Vec<Candidate> = (0..10).map(|i| Candidate::new(format!("c{i}"), Math)).collect();
        let a = sample_random(&pool, 4, 9).unwrap();
        assert_eq!(a, sample_random(&pool, 4, 9).unwrap());
        assert_eq!(sample_random(&pool, 10, 1).unwrap().selected.len(), 10);
        assert!(sample_random(&pool, 0, 1).unwrap().selected.is_empty());
        assert_eq!(sample_random(&pool, 20, 1).unwrap().shortfall, 10);
    }

    #[test]
    fn longest_by_chars_then_id() {
        let mk = |id: &str, n| Candidate {
            response_chars: n,
            ..Candidate::new(id, Coding)
        };
        let pool = vec![mk("a", 5), mk("b", 9), mk("c", 7), mk("d", 9)];
        assert_eq!(sample_longest(&pool, 3).unwrap().ids(), ["b", "d", "c"]);
    }

    #[test]
    fn top_key_order() {
        let mk = |id: &str, q| Candidate {
            q: Some(q),
            ..Candidate::new(id, Math)
        };
        let pool = vec![mk("a", 0.9), mk("b", 0.1), mk("c", 0.5)];
        assert_eq!(sample_top(&pool, 2, TopKey::Quality).unwrap().ids(), ["a", "c"]);
        let flat = vec![mk("z", 0.5), mk("y", 0.5), mk("x", 0.5)];
        assert_eq!(sample_top(&flat, 2, TopKey::Quality).unwrap().ids(), ["x", "y"]);
        assert_eq!(sample_top(&pool, 9, TopKey::Quality).unwrap().selected.len(), 3);
    }

    #[test]
    fn deita_filter_and_backfill() {
        let mk = |id: &str, s: f64, e: [f32; 2]| Candidate {
            deita: Some((s, 1.0)),
            embedding: Some(e.to_vec()),
            ..Candidate::new(id, Math)
        };
        let pool = vec![
            mk("a", 5.0, [1.0, 0.0]),
            mk("b", 4.0, [1.0, 0.0]),
            mk("c", 3.0, [0.0, 1.0]),
            mk("d", 2.0, [0.8, 0.6]),
        ];
        // cos(a,b)=1, cos(a,c)=0, cos(a,d)=0.8, cos(c,d)=0.6
        let r = sample_deita(&pool, 3, 0.9).unwrap();
        assert_eq!(r.ids(), ["a", "c", "d"]);
        let r = sample_deita(&pool, 3, 0.7).unwrap();
        assert_eq!(r.ids(), ["a", "c", "b"]);
        assert_eq!(r.selected[2].via, Via::Backfill);
        assert_eq!(sample_deita(&pool, 3, 1.0).unwrap().ids(), ["a", "b", "c"]);
    }

    #[test]
    fn shortfall_goes_to_largest_quota_first() {
        let plan = QuotaPlan::new([(Math, 3), (Coding, 2), (Generation, 1)].into_iter().collect());
        let avail = [(Math, 10), (Coding, 10), (Generation, 0)].into_iter().collect();
        let (eff, short) = effective_quotas(&plan, &avail);
        assert_eq!((eff[&Math], eff[&Coding], eff[&Generation], short), (4, 2, 0, 0));
        let avail = [(Math, 3), (Coding, 2)].into_iter().collect();
        let (eff, short) = effective_quotas(&plan, &avail);
        assert_eq!((eff[&Math], eff[&Coding], short), (3, 2, 1));
    }

    #[test]
    fn dominant_cluster_members_are_taken() {
        let pool = vec![
            cand("a", Math, 0.9, [0.0, 0.0]),
            cand("b", Math, 0.1, [0.1, 0.0]),
            cand("c", Math, 0.2, [0.0, 0.1]),
            cand("d", Math, 0.8, [10.0, 10.0]),
            cand("e", Math, 0.3, [10.1, 10.0]),
            cand("f", Math, 0.1, [10.0, 10.1]),
        ];
        let plan = QuotaPlan::new([(Math, 2)].into_iter().collect());
        let r = sample_combination_pp(&pool, &plan, &CombinationOptions::new(1)).unwrap();
        assert_eq!(r.ids(), ["a", "d"]);
        assert_eq!(r.backfill_count, 0);
        assert!(r.selected.iter().all(|s| s.via == Via::Cluster));
    }

    #[test]
    fn all_clusters_below_threshold_is_pure_backfill() {
        let pool = vec![
            cand("a", Math, 0.9, [0.0, 0.0]),
            cand("b", Math, 0.8, [0.1, 0.0]),
            cand("c", Math, 0.1, [10.0, 10.0]),
            cand("d", Math, 0.2, [10.1, 10.0]),
        ];
        // J = 1 with gamma 99: tau = 0.9 and the single cluster's best is 0.9
        let plan = QuotaPlan::new([(Math, 1)].into_iter().collect());
        let mut opts = CombinationOptions::new(0);
        opts.gamma = 99.0;
        let r = sample_combination_pp(&pool, &plan, &opts).unwrap();
        assert_eq!(r.ids(), ["a"]);
        assert_eq!(r.selected[0].via, Via::Cluster);
        // q-threshold above every p: nothing clears, top-p backfill only
        let pool: Vec<Candidate> = pool.into_iter().map(|c| Candidate { q: Some(5.0), ..c }).collect();
        opts.threshold_on = ThresholdOn::Q;
        let plan = QuotaPlan::new([(Math, 2)].into_iter().collect());
        let r = sample_combination_pp(&pool, &plan, &opts).unwrap();
        assert_eq!(r.ids(), ["a", "b"]);
        assert!(r.selected.iter().all(|s| s.via == Via::Backfill));
    }

    #[test]
    fn saturated_category_takes_everything() {
        let pool: Vec<Candidate> = (0..5).map(|i| cand(&format!("x{i}"), Coding, i as f64 / 10.0, [i as f32, 0.0])).collect();
        let plan = QuotaPlan::new([(Coding, 5)].into_iter().collect());
        let r = sample_combination_pp(&pool, &plan, &CombinationOptions::new(4)).unwrap();
        let mut ids = r.ids();
        ids.sort();
        assert_eq!(ids, ["x0", "x1", "x2", "x3", "x4"]);
    }

    #[test]
    fn skew_counts() {
        let items: Vec<(String, CategoryLabel)> = CategoryLabel::ALL
            .iter()
            .flat_map(|&l| (0..100).map(move |i| (format!("{l}-{i:03}"), l)))
            .collect();
        let s = build_skewed_pool(&items, 5, 0.04).unwrap();
        assert_eq!(s.chosen.len(), 2);
        assert_eq!(s.kept.len(), 200 + 5 * 4);
        assert!(s.residue.values().all(|&n| n == 4));
        let bare = build_skewed_pool(&items, 5, 0.0).unwrap();
        assert_eq!(bare.kept.len(), 200);
        let two: Vec<_> = items.iter().filter(|(_, l)| *l == Math || *l == Coding).cloned().collect();
        assert_eq!(build_skewed_pool(&two, 1, 0.04).unwrap().kept.len(), 200);
    }

    #[test]
    fn composition_fractions() {
        let c = composition_report([(Math, "a"), (Math, "b"), (Coding, "a"), (Extraction, "a")]);
        assert_eq!(c.per_category[&Math].fraction, 0.5);
        assert_eq!(c.per_source["a"].count, 3);
        assert!(composition_report(std::iter::empty()).per_category.is_empty());
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("combination++".parse::<Strategy>().unwrap(), Strategy::CombinationPP);
        let err = "best".parse::<Strategy>().unwrap_err().to_string();
        assert!(err.contains("combination_pp"));
    }

    fn arb_pool() -> impl proptest::strategy::Strategy<Value = Vec<Candidate>> {
        prop::collection::vec((0usize..3, 0u32..100, -5.0f32..5.0, -5.0f32..5.0), 1..40).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (l, p, x, y))| {
                    cand(&format!("i{i:02}"), CategoryLabel::ALL[l], f64::from(p) / 100.0, [x, y])
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn combination_pp_invariants(pool in arb_pool(), m in 0usize..12, seed in 0u64..1000) {
            let plan = QuotaPlan::uniform(m);
            let r = sample_combination_pp(&pool, &plan, &CombinationOptions::new(seed)).unwrap();
            prop_assert_eq!(r.selected.len(), m.min(pool.len()));
            let ids: HashSet<&str> = r.ids().into_iter().collect();
            prop_assert_eq!(ids.len(), r.selected.len());
            let mut seen_clusters = HashSet::new();
            for s in r.selected.iter().filter(|s| s.via == Via::Cluster) {
                prop_assert!(seen_clusters.insert((s.category, s.cluster)));
                let tau = r.per_category[&s.category].tau.unwrap();
                prop_assert!(s.p.unwrap() >= tau);
            }
            let mut counts: BTreeMap<CategoryLabel, usize> = BTreeMap::new();
            for s in &r.selected {
                *counts.entry(s.category).or_default() += 1;
            }
            for (l, summary) in &r.per_category {
                prop_assert_eq!(counts.get(l).copied().unwrap_or(0), summary.effective_quota);
                if summary.available >= plan.quota(*l) && r.shortfall == 0
                    && CategoryLabel::ALL.iter().all(|c| r.per_category[c].available >= plan.quota(*c)) {
                    prop_assert_eq!(summary.effective_quota, plan.quota(*l));
                }
            }
            prop_assert_eq!(&r, &sample_combination_pp(&pool, &plan, &CombinationOptions::new(seed)).unwrap());
        }

        #[test]
        fn simple_strategies_are_sound(pool in arb_pool(), m in 0usize..50, seed in 0u64..100) {
            for r in [
                sample_random(&pool, m, seed).unwrap(),
                sample_longest(&pool, m).unwrap(),
                sample_top(&pool, m, TopKey::Preference).unwrap(),
            ] {
                prop_assert_eq!(r.selected.len(), m.min(pool.len()));
                let ids: HashSet<&str> = r.ids().into_iter().collect();
                prop_assert_eq!(ids.len(), r.selected.len());
                prop_assert!(ids.iter().all(|id| pool.iter().any(|c| c.id == *id)));
            }
        }
    }
}
