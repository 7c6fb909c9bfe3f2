//! Difficulty training targets from a model-pool evaluation matrix, and
//! per-turn difficulty at pipeline time.
//!
//! The target construction runs four passes: scale every metric to [0, 1]
//! by its declared bounds, drop items no model scored above zero, center
//! each (model, dataset) slice on its mean, and average the negated
//! deviations over models. A positive target means models did worse on
//! the item than they usually do on its dataset, i.e. the item is hard.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::io;

/// One cell of the evaluation matrix as it appears on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub dataset: String,
    #[serde(default)]
    pub category: Option<String>,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub dataset: String,
    pub category: Option<String>,
    pub metric: String,
}

/// Model × item scores. `values[model][item]` is `None` where a model was
/// not evaluated on an item (e.g. judge-scored rows exist for a few models
/// only); missing cells are left out of every mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatrix {
    pub items: Vec<EvalItem>,
    pub models: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTarget {
    pub item_id: String,
    pub target: f64,
}

/// Native `(min, max)` range per metric name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricBounds(pub BTreeMap<String, (f64, f64)>);

impl Default for MetricBounds {
    fn default() -> Self {
        let unit = [
            "acc",
            "exact_match",
            "loose_acc",
            "pass@1",
            "f1",
            "schema_compliance",
        ];
        let mut m: BTreeMap<String, (f64, f64)> = unit.iter().map(|k| (k.to_string(), (0.0, 1.0))).collect();
        m.insert("bleu".into(), (0.0, 100.0));
        m.insert("judge".into(), (0.0, 10.0));
        Self(m)
    }
}

impl MetricBounds {
    pub fn get(&self, metric: &str) -> Result<(f64, f64)> {
        let (lo, hi) = *self.0.get(metric).ok_or_else(|| {
            let known: Vec<&str> = self.0.keys().map(String::as_str).collect();
            Error::Config(format!("unknown metric `{metric}` (known: {})", known.join(", ")))
        })?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("metric `{metric}`: bounds ({lo}, {hi}) are not an interval")));
        }
        Ok((lo, hi))
    }
}

impl EvalMatrix {
    /// Builds a matrix from cells. Items and models are ordered by id.
    pub fn from_records(records: impl IntoIterator<Item = EvalRecord>) -> Result<Self> {
        let mut items: BTreeMap<String, EvalItem> = BTreeMap::new();
        let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut models = BTreeSet::new();
        for r in records {
            if !r.value.is_finite() {
                return Err(Error::Format(format!("{}/{}: non-finite value", r.model, r.item_id)));
            }
            let item = items.entry(r.item_id.clone()).or_insert_with(|| EvalItem {
                item_id: r.item_id.clone(),
                dataset: r.dataset.clone(),
                category: r.category.clone(),
                metric: r.metric.clone(),
            });
            if item.dataset != r.dataset || item.metric != r.metric {
                return Err(Error::Format(format!(
                    "item `{}` appears with conflicting dataset or metric",
                    r.item_id
                )));
            }
            if cells.insert((r.model.clone(), r.item_id.clone()), r.value).is_some() {
                return Err(Error::Format(format!("duplicate cell ({}, {})", r.model, r.item_id)));
            }
            models.insert(r.model);
        }
        let items: Vec<EvalItem> = items.into_values().collect();
        let models: Vec<String> = models.into_iter().collect();
        let values = models
            .iter()
            .map(|m| {
                items
                    .iter()
                    .map(|it| cells.get(&(m.clone(), it.item_id.clone())).copied())
                    .collect()
            })
            .collect();
        Ok(Self { items, models, values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records = io::read_jsonl::<EvalRecord>(path)?
            .map(|r| r.map(|(_, rec)| rec))
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records)
    }

    fn with_values(&self, keep: &[usize], values: Vec<Vec<Option<f64>>>) -> Self {
        Self {
            items: keep.iter().map(|&i| self.items[i].clone()).collect(),
            models: self.models.clone(),
            values,
        }
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }
}

/// Scales each cell to [0, 1] by its metric's bounds. A value outside its
/// bounds means the bounds are misdeclared, which is a config error.
pub fn normalize_scores(m: &EvalMatrix, bounds: &MetricBounds) -> Result<EvalMatrix> {
    let ranges = m
        .items
        .iter()
        .map(|it| bounds.get(&it.metric))
        .collect::<Result<Vec<_>>>()?;
    let mut values = m.values.clone();
    for (model, row) in m.models.iter().zip(values.iter_mut()) {
        for ((cell, &(lo, hi)), item) in row.iter_mut().zip(&ranges).zip(&m.items) {
            if let Some(v) = cell {
                if *v < lo || *v > hi {
                    return Err(Error::Config(format!(
                        "{model}/{}: {} value {v} outside declared bounds [{lo}, {hi}]",
                        item.item_id, item.metric
                    )));
                }
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    Ok(EvalMatrix {
        values,
        ..m.clone()
    })
}

/// Keeps items that at least one model scored above zero.
pub fn drop_all_zero(m: &EvalMatrix) -> EvalMatrix {
    let keep: Vec<usize> = (0..m.items.len())
        .filter(|&i| m.values.iter().any(|row| row[i].is_some_and(|v| v > 0.0)))
        .collect();
    let values = m
        .values
        .iter()
        .map(|row| keep.iter().map(|&i| row[i]).collect())
        .collect();
    m.with_values(&keep, values)
}

/// Subtracts each model's mean over the item's dataset.
pub fn relative_deviation(m: &EvalMatrix) -> EvalMatrix {
    let values = m
        .values
        .iter()
        .map(|row| {
            let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
            for (item, v) in m.items.iter().zip(row) {
                if let Some(v) = v {
                    let e = sums.entry(item.dataset.as_str()).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            m.items
                .iter()
                .zip(row)
                .map(|(item, v)| {
                    v.map(|v| {
                        let (sum, n) = sums[item.dataset.as_str()];
                        v - sum / n as f64
                    })
                })
                .collect()
        })
        .collect();
    EvalMatrix {
        values,
        ..m.clone()
    }
}

/// Negated mean deviation per item. Items nobody was evaluated on are
/// skipped.
pub fn difficulty_targets(m: &EvalMatrix) -> Vec<DifficultyTarget> {
    m.items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let present: Vec<f64> = m.values.iter().filter_map(|row| row[i]).collect();
            if present.is_empty() {
                return None;
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            Some(DifficultyTarget {
                item_id: item.item_id.clone(),
                target: -mean,
            })
        })
        .collect()
}

/// normalize → drop → center → average.
pub fn build_targets(m: &EvalMatrix, bounds: &MetricBounds) -> Result<Vec<DifficultyTarget>> {
    let normalized = normalize_scores(m, bounds)?;
    let kept = drop_all_zero(&normalized);
    let dropped = m.item_count() - kept.item_count();
    if dropped > 0 {
        tracing::info!(dropped, kept = kept.item_count(), "dropped items no model solved");
    }
    Ok(difficulty_targets(&relative_deviation(&kept)))
}

/// Per-turn difficulty: a precomputed value wins, otherwise the gateway's
/// regressor is asked.
pub fn score_difficulty(gateway: &Gateway, instruction: &str, precomputed: Option<f64>) -> Result<f64> {
    match precomputed {
        Some(v) if v.is_finite() => Ok(v),
        Some(v) => Err(Error::Format(format!("precomputed difficulty {v} is not finite"))),
        None => gateway.score_difficulty(instruction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(item: &str, dataset: &str, model: &str, metric: &str, value: f64) -> EvalRecord {
        EvalRecord {
            item_id: item.into(),
            dataset: dataset.into(),
            category: None,
            model: model.into(),
            metric: metric.into(),
            value,
        }
    }

    fn matrix(rows: &[(&str, &str, &[f64])]) -> EvalMatrix {
        // rows are items; columns models m0, m1, ...
        let recs = rows.iter().flat_map(|(item, ds, vals)| {
            vals.iter()
                .enumerate()
                .map(move |(j, &v)| rec(item, ds, &format!("m{j}"), "acc", v))
        });
        EvalMatrix::from_records(recs).unwrap()
    }

    fn target_of(ts: &[DifficultyTarget], id: &str) -> f64 {
        ts.iter().find(|t| t.item_id == id).unwrap().target
    }

    #[test]
    fn deviation_from_model_mean() {
        let m = matrix(&[("a", "D", &[1.0, 0.0]), ("b", "D", &[0.5, 1.0]), ("c", "D", &[0.0, 0.5])]);
        let d = relative_deviation(&m);
        // m0 mean over D is 0.5
        assert_eq!(d.values[0], vec![Some(0.5), Some(0.0), Some(-0.5)]);
        assert_eq!(d.values[1], vec![Some(-0.5), Some(0.5), Some(0.0)]);
    }

    #[test]
    fn single_item_dataset_has_zero_deviation() {
        let m = matrix(&[("a", "D", &[0.3, 0.9]), ("b", "E", &[1.0, 0.2])]);
        let d = relative_deviation(&m);
        assert!(d.values.iter().flatten().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn all_zero_items_are_dropped_before_centering() {
        let m = matrix(&[("a", "D", &[0.0, 0.0]), ("b", "D", &[0.0, 0.4]), ("c", "D", &[1.0, 1.0])]);
        let kept = drop_all_zero(&m);
        let ids: Vec<&str> = kept.items.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        let ts = build_targets(&m, &MetricBounds::default()).unwrap();
        // m0 mean over {b, c} = 0.5, m1 mean = 0.7
        assert!((target_of(&ts, "b") - -(-0.5 + -0.3) / 2.0).abs() < 1e-12);
        assert!((target_of(&ts, "c") - -(0.5 + 0.3) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniformly_worse_item_is_harder() {
        let m = matrix(&[("hard", "D", &[0.3, 0.4]), ("x", "D", &[0.7, 0.8]), ("y", "D", &[0.5, 0.6])]);
        let ts = build_targets(&m, &MetricBounds::default()).unwrap();
        assert!((target_of(&ts, "hard") - 0.2).abs() < 1e-12);
        assert!((target_of(&ts, "x") + 0.2).abs() < 1e-12);
    }

    #[test]
    fn bounds_scale_and_reject() {
        let recs = vec![rec("a", "C", "m0", "bleu", 50.0), rec("b", "O", "m0", "judge", 10.0)];
        let m = EvalMatrix::from_records(recs).unwrap();
        let n = normalize_scores(&m, &MetricBounds::default()).unwrap();
        assert_eq!(n.values[0], vec![Some(0.5), Some(1.0)]);

        let neg = EvalMatrix::from_records([rec("a", "D", "m0", "acc", -0.1)]).unwrap();
        assert!(matches!(normalize_scores(&neg, &MetricBounds::default()), Err(Error::Config(_))));
        let unknown = EvalMatrix::from_records([rec("a", "D", "m0", "rouge", 0.1)]).unwrap();
        assert!(matches!(normalize_scores(&unknown, &MetricBounds::default()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_cells_are_excluded_from_means() {
        let recs = vec![
            rec("a", "O", "m0", "judge", 8.0),
            rec("b", "O", "m0", "judge", 4.0),
            rec("a", "O", "m1", "judge", 6.0),
        ];
        let m = EvalMatrix::from_records(recs).unwrap();
        assert_eq!(m.values[1], vec![Some(6.0), None]);
        let ts = build_targets(&m, &MetricBounds::default()).unwrap();
        // a: m0 dev +0.2, m1 dev 0 (its only item) -> target -0.1
        assert!((target_of(&ts, "a") + 0.1).abs() < 1e-12);
        assert!((target_of(&ts, "b") - 0.2).abs() < 1e-12);
    }

    #[test]
    fn duplicate_and_conflicting_cells_fail() {
        assert!(EvalMatrix::from_records([rec("a", "D", "m0", "acc", 1.0), rec("a", "D", "m0", "acc", 0.0)]).is_err());
        assert!(EvalMatrix::from_records([rec("a", "D", "m0", "acc", 1.0), rec("a", "E", "m1", "acc", 0.0)]).is_err());
        assert!(EvalMatrix::from_records([rec("a", "D", "m0", "acc", f64::NAN)]).is_err());
    }

    #[test]
    fn precomputed_difficulty_skips_gateway() {
        let gw = Gateway::mock();
        assert_eq!(score_difficulty(&gw, "x", Some(0.3)).unwrap(), 0.3);
        assert_eq!(gw.metrics().requests, 0);
        let v = score_difficulty(&gw, "x", None).unwrap();
        assert!((0.0..1.0).contains(&v));
        assert_eq!(gw.metrics().requests, 1);
    }

    proptest! {
        #[test]
        fn slices_are_centered_and_shift_invariant(
            vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 3),
            shift in -0.5f64..0.5,
            model in 0usize..3,
        ) {
            let rows: Vec<(String, &str, Vec<f64>)> = (0..6)
                .map(|i| (format!("i{i}"), if i < 3 { "D" } else { "E" }, vals.iter().map(|r| r[i]).collect()))
                .collect();
            let recs = |shift_d: f64| -> Vec<EvalRecord> {
                rows.iter().flat_map(|(id, ds, vs)| {
                    vs.iter().enumerate().map(move |(j, &v)| {
                        let v = if j == model && *ds == "D" { v + shift_d } else { v };
                        rec(id, ds, &format!("m{j}"), "acc", v)
                    })
                }).collect()
            };
            let base = relative_deviation(&EvalMatrix::from_records(recs(0.0)).unwrap());
            for row in &base.values {
                for range in [0..3, 3..6] {
                    let mean: f64 = row[range].iter().map(|v| v.unwrap()).sum::<f64>() / 3.0;
                    prop_assert!(mean.abs() < 1e-9);
                }
            }
            let shifted = relative_deviation(&EvalMatrix::from_records(recs(shift)).unwrap());
            for (a, b) in difficulty_targets(&base).iter().zip(difficulty_targets(&shifted).iter()) {
                prop_assert!((a.target - b.target).abs() < 1e-9);
            }
        }
    }
}
