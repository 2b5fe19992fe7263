//! Clustering and retrieval scores for embeddings: k-means followed by NMI,
//! and Recall@K over exact Euclidean neighbors.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::sq_dist;
use crate::mining::epoch_seed;

pub const DEFAULT_KMEANS_ITERS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

fn rows(z: &DMatrix<f64>) -> Vec<Vec<f64>> {
    z.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        let last = centers.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, last));
        }
    }
    centers
}

/// One k-means run: k-means++ seeding, then Lloyd iterations until the
/// assignment stops changing or `max_iter` is reached. An empty cluster is
/// moved onto the point farthest from its current center.
pub fn kmeans(z: &DMatrix<f64>, c: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    kmeans_with(z, c, seed, max_iter, Exec::default())
}

pub fn kmeans_with(z: &DMatrix<f64>, c: usize, seed: u64, max_iter: usize, exec: Exec) -> Result<Clustering> {
    let n = z.nrows();
    if c == 0 || c > n {
        return Err(Error::Config(format!("cannot form {c} clusters from {n} points")));
    }
    let points = rows(z);
    let dim = z.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(&points, c, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();

    for _ in 0..max_iter.max(1) {
        let nearest_all = exec.map(n, |i| nearest(&points[i], &centers));
        let next: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut dists: Vec<f64> = nearest_all.iter().map(|&(_, d)| d).collect();
        for k in 0..c {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
                continue;
            }
            let far = dists
                .iter()
                .enumerate()
                .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
            centers[k] = points[far].clone();
            dists[far] = 0.0;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    let flat: Vec<f64> = centers.iter().flatten().copied().collect();
    Ok(Clustering {
        assignments,
        centers: DMatrix::from_row_slice(c, dim, &flat),
        inertia,
    })
}

/// Best-inertia clustering over `restarts` seeds derived from `seed`.
pub fn kmeans_restarts(z: &DMatrix<f64>, c: usize, seed: u64, restarts: usize, exec: Exec) -> Result<Clustering> {
    let mut best: Option<Clustering> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans_with(z, c, epoch_seed(seed, r as u64), DEFAULT_KMEANS_ITERS, exec)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(A; Y) / ((H(A) + H(Y)) / 2)` with natural logarithms; 0 when the
/// denominator vanishes.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Ok(0.0);
    }
    let n = assignments.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cy: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &y) in assignments.iter().zip(labels) {
        *joint.entry((a, y)).or_default() += 1;
        *ca.entry(a).or_default() += 1;
        *cy.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hy = entropy(cy.values().copied(), n);
    let denom = 0.5 * (ha + hy);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (c as f64 * n / (ca[&a] as f64 * cy[&y] as f64)).ln()
        })
        .sum();
    Ok((mi.max(0.0)) / denom)
}

/// Recall@K in percent for every `K` in `ks`: the share of points with at
/// least one same-class point among their `K` nearest others. Distance ties
/// go to the smaller index.
pub fn recall_at_k(z: &DMatrix<f64>, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    recall_at_k_with(z, labels, ks, Exec::default())
}

pub fn recall_at_k_with(z: &DMatrix<f64>, labels: &[usize], ks: &[usize], exec: Exec) -> Result<BTreeMap<usize, f64>> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} points", labels.len())));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if ks.contains(&0) {
        return Err(Error::Config("recall K must be at least 1".into()));
    }
    if max_k >= n {
        return Err(Error::Config(format!("recall K = {max_k} needs more than {n} points")));
    }
    let points = rows(z);
    // rank (0-based) of the first same-class neighbor, if within max_k
    let first_hit = exec.map(n, |q| {
        let mut order: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (sq_dist(&points[q], &points[j]), j))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if max_k < order.len() {
            order.select_nth_unstable_by(max_k - 1, cmp);
            order.truncate(max_k);
        }
        order.sort_by(cmp);
        order.iter().position(|&(_, j)| labels[j] == labels[q])
    });
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, 100.0 * hits as f64 / n as f64)
        })
        .collect())
}

/// Round to one decimal for display.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub nmi: f64,
    /// `K → percentage`, unrounded.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// `{"nmi":…, "r@1":…, …}` with recall rounded to one decimal.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("nmi".into(), Value::from(self.nmi));
        for (&k, &r) in &self.recall_at {
            map.insert(format!("r@{k}"), Value::from(round1(r)));
        }
        Value::Object(map)
    }
}

/// k-means (10 restarts, `C` = number of distinct labels) + NMI, and Recall@K.
pub fn evaluate_embeddings(z: &DMatrix<f64>, labels: &[usize], ks: &[usize], seed: u64, exec: Exec) -> Result<EvalReport> {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let clustering = kmeans_restarts(z, distinct.len().max(1), seed, DEFAULT_RESTARTS, exec)?;
    Ok(EvalReport {
        nmi: nmi(&clustering.assignments, labels)?,
        recall_at: recall_at_k_with(z, labels, ks, exec)?,
        n_test: z.nrows(),
    })
}

/// Number of clusters whose assignment count is positive.
pub fn used_clusters(assignments: &[usize]) -> usize {
    assignments.iter().collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    #[test]
    fn every_point_its_own_cluster() {
        let z = line(&[0.0, 1.0, 5.0, 9.0, 9.5]);
        let out = kmeans(&z, 5, 1, 100).unwrap();
        assert_eq!(out.inertia, 0.0);
        assert_eq!(used_clusters(&out.assignments), 5);
    }

    #[test]
    fn separated_pairs() {
        let z = DMatrix::from_row_slice(4, 2, &[0., 0., 0.1, 0., 50., 50., 50., 50.2]);
        let out = kmeans_restarts(&z, 2, 3, 10, Exec::Sequential).unwrap();
        let a = &out.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        assert_eq!(out, kmeans_restarts(&z, 2, 3, 10, Exec::Sequential).unwrap());
        assert!(kmeans(&z, 5, 0, 10).is_err());
    }

    #[test]
    fn nmi_cases() {
        let y = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi(&[5, 5, 3, 3, 9, 9], &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn recall_cases() {
        let z = line(&[0.0, 0.0, 10.0, 10.0]);
        let r = recall_at_k(&z, &[0, 0, 1, 1], &[1]).unwrap();
        assert_eq!(r[&1], 100.0);

        // each point's nearest other (ties to the smaller index) has the other class
        let z = line(&[0.0, 1.0, 2.0, 3.0]);
        let r = recall_at_k(&z, &[0, 1, 0, 1], &[1, 2, 3]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&3], 100.0);
        assert!(recall_at_k(&z, &[0, 1, 0, 1], &[4]).is_err());
    }

    #[test]
    fn report_json_keys() {
        let z = line(&[0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 9.0, 9.1, 9.3, 9.4]);
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let rep = evaluate_embeddings(&z, &labels, &DEFAULT_RECALL_KS, 0, Exec::Sequential).unwrap();
        let json = rep.to_json();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["nmi", "r@1", "r@2", "r@4", "r@8"]);
        assert!((rep.nmi - 1.0).abs() < 1e-12);
    }
}
