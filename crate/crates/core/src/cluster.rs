//! Seeded k-means over one category's embeddings.
//!
//! Rows are sorted by id before anything else, so the result depends only
//! on the (id, vector) set, the cluster count and the seed. Seeding is
//! k-means++ from a ChaCha8 stream; Lloyd iterations run until no centroid
//! moves by `tol` or more. A cluster that empties out takes the point of
//! the largest cluster that lies farthest from its centroid, so the
//! cluster count never drops below `j`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::JsonlWriter;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    /// Rows with a non-finite component are dropped with a warning.
    /// Duplicate ids and mixed dimensions are errors.
    pub fn new(rows: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut rows: Vec<(String, Vec<f64>)> = rows
            .into_iter()
            .filter_map(|(id, v)| {
                if v.iter().all(|x| x.is_finite()) {
                    Some((id, v.into_iter().map(f64::from).collect()))
                } else {
                    tracing::warn!(%id, "dropping embedding with non-finite component");
                    None
                }
            })
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::precondition(format!("duplicate id `{}` in embedding set", w[0].0)));
        }
        if let Some(first) = rows.first() {
            let dim = first.1.len();
            if let Some(bad) = rows.iter().find(|r| r.1.len() != dim) {
                return Err(Error::Dimension {
                    expected: dim,
                    got: bad.1.len(),
                });
            }
        }
        let (ids, vectors) = rows.into_iter().unzip();
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Scales every non-zero row to unit length.
    pub fn unit_normalized(mut self) -> Self {
        for v in &mut self.vectors {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub j: usize,
    pub seed: u64,
    /// Row ids, ascending.
    pub ids: Vec<String>,
    /// Cluster of `ids[i]`.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn seed_plus_plus(x: &[Vec<f64>], j: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![x[first].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &x[first])).collect();
    while centroids.len() < j {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > r {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // every remaining point coincides with a centroid
            chosen.iter().position(|c| !c).expect("j <= n")
        };
        chosen[pick] = true;
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &x[pick]));
        }
        centroids.push(x[pick].clone());
    }
    centroids
}

/// Moves points into empty clusters until none is empty.
fn repair_empty(x: &[Vec<f64>], assign: &mut [usize], centroids: &mut [Vec<f64>]) -> usize {
    let j = centroids.len();
    let mut repairs = 0;
    loop {
        let mut sizes = vec![0usize; j];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return repairs;
        };
        let largest = (0..j).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).expect("j >= 1");
        let far = (0..x.len())
            .filter(|&i| assign[i] == largest)
            .map(|i| (i, sq_dist(&x[i], &centroids[largest])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .expect("largest cluster is non-empty")
            .0;
        assign[far] = empty;
        centroids[empty] = x[far].clone();
        repairs += 1;
    }
}

fn update(x: &[Vec<f64>], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = x[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in x.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

fn inertia(x: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    x.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

pub fn kmeans(set: &EmbeddingSet, j: usize, seed: u64, opts: &KMeansOptions) -> Result<Clustering> {
    let n = set.len();
    if j == 0 || j > n {
        return Err(Error::precondition(format!("cannot form {j} clusters from {n} points")));
    }
    if opts.max_iter == 0 || !(opts.tol >= 0.0) {
        return Err(Error::Config("k-means needs max_iter >= 1 and tol >= 0".into()));
    }
    let x = &set.vectors;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(x, j, &mut rng);
    let mut assign = vec![0usize; n];
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        assign = x.par_iter().map(|p| nearest(p, &centroids).0).collect();
        let repairs = repair_empty(x, &mut assign, &mut centroids);
        if repairs > 0 {
            tracing::debug!(repairs, iteration = iterations, "repaired empty clusters");
        }
        let before = centroids.clone();
        update(x, &assign, &mut centroids);
        let cost = inertia(x, &assign, &centroids);
        if let Some(&prev) = history.last() {
            assert!(
                cost <= prev + 1e-9 * prev.max(1.0),
                "k-means inertia rose from {prev} to {cost} at iteration {iterations}"
            );
        }
        history.push(cost);
        let shift = before
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        if shift < opts.tol {
            break;
        }
    }
    Ok(Clustering {
        j,
        seed,
        ids: set.ids.clone(),
        assignments: assign,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        iterations,
        inertia_history: history,
    })
}

#[derive(Serialize)]
struct DumpHeader<'a> {
    j: usize,
    seed: u64,
    inertia: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_digest: Option<&'a str>,
}

#[derive(Serialize, Deserialize)]
pub struct DumpRow {
    pub id: String,
    pub cluster: usize,
}

impl Clustering {
    /// Ids in cluster `k`, ascending.
    pub fn cluster_members(&self, k: usize) -> Vec<&str> {
        self.ids
            .iter()
            .zip(&self.assignments)
            .filter(|(_, &a)| a == k)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .ok()
            .map(|i| self.assignments[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.j];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Header line then one `{"id","cluster"}` line per row.
    pub fn write_dump(&self, path: impl AsRef<Path>, config_digest: Option<&str>) -> Result<String> {
        let mut w = JsonlWriter::create(path)?;
        w.write(&DumpHeader {
            j: self.j,
            seed: self.seed,
            inertia: self.inertia,
            iterations: self.iterations,
            config_digest,
        })?;
        for (id, &cluster) in self.ids.iter().zip(&self.assignments) {
            w.write(&DumpRow {
                id: id.clone(),
                cluster,
            })?;
        }
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[(f32, f32)]) -> EmbeddingSet {
        EmbeddingSet::new(points.iter().enumerate().map(|(i, &(a, b))| (format!("p{i:03}"), vec![a, b]))).unwrap()
    }

    fn blobs(seed: u64, per: usize) -> (EmbeddingSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (b, center) in [(-5.0f32, 0.0f32), (5.0, 0.0)].iter().enumerate() {
            for i in 0..per {
                let jitter = |rng: &mut ChaCha8Rng| (rng.random::<f32>() - 0.5) * 0.5;
                rows.push((format!("b{b}-{i:03}"), vec![center.0 + jitter(&mut rng), center.1 + jitter(&mut rng)]));
                truth.push(b);
            }
        }
        (EmbeddingSet::new(rows).unwrap(), truth)
    }

    #[test]
    fn saturation_gives_zero_inertia() {
        let s = set(&[(0.0, 0.0), (1.0, 0.0), (0.0, 3.0), (2.0, 2.0)]);
        let c = kmeans(&s, 4, 7, &KMeansOptions::default()).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert_eq!(c.sizes(), vec![1; 4]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let s = set(&[(0.0, 0.0), (2.0, 0.0), (1.0, 3.0)]);
        let c = kmeans(&s, 1, 1, &KMeansOptions::default()).unwrap();
        assert_eq!(c.assignments, vec![0, 0, 0]);
        assert!((c.centroids[0][0] - 1.0).abs() < 1e-12 && (c.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let s = set(&[(1.0, 1.0); 5]);
        let c = kmeans(&s, 3, 0, &KMeansOptions::default()).unwrap();
        assert!(c.sizes().iter().all(|&n| n >= 1));
        assert_eq!(c.inertia, 0.0);
    }

    #[test]
    fn bad_j_is_rejected() {
        let s = set(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(kmeans(&s, 3, 0, &KMeansOptions::default()).is_err());
        assert!(kmeans(&s, 0, 0, &KMeansOptions::default()).is_err());
    }

    #[test]
    fn non_finite_rows_are_dropped() {
        let s = EmbeddingSet::new(vec![("a".to_string(), vec![0.0, 1.0]), ("b".to_string(), vec![f32::NAN, 0.0])]).unwrap();
        assert_eq!(s.ids(), ["a"]);
        assert!(EmbeddingSet::new(vec![("a".to_string(), vec![0.0]), ("b".to_string(), vec![0.0, 1.0])]).is_err());
    }

    #[test]
    fn two_blobs_are_recovered() {
        for seed in 0..20 {
            let (s, truth) = blobs(seed, 25);
            let c = kmeans(&s, 2, seed, &KMeansOptions::default()).unwrap();
            let flip = c.assignments[0] != truth[0];
            for (a, t) in c.assignments.iter().zip(&truth) {
                assert_eq!((*a == 1) ^ flip, *t == 1, "seed {seed}");
            }
            assert!(c.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let (s, _) = blobs(3, 20);
        let a = kmeans(&s, 5, 11, &KMeansOptions::default()).unwrap();
        let b = kmeans(&s, 5, 11, &KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
        let mut rows: Vec<(String, Vec<f32>)> = s
            .ids
            .iter()
            .cloned()
            .zip(s.vectors.iter().map(|v| v.iter().map(|&x| x as f32).collect()))
            .collect();
        rows.reverse();
        let c = kmeans(&EmbeddingSet::new(rows).unwrap(), 5, 11, &KMeansOptions::default()).unwrap();
        assert_eq!(a.assignments, c.assignments);
    }

    #[test]
    fn dump_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clusters.jsonl");
        let c = kmeans(&set(&[(0.0, 0.0), (5.0, 5.0), (5.0, 6.0)]), 2, 0, &KMeansOptions::default()).unwrap();
        c.write_dump(&p, Some("abc")).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("\"j\":2") && lines[0].contains("abc"));
        assert_eq!(c.cluster_members(c.cluster_of("p001").unwrap()), ["p001", "p002"]);
    }
}
