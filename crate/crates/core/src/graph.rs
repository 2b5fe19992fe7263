//! Exact kNN graph, its row-stochastic neighbor matrix, the signed seed
//! affinities and the graph Laplacian.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{max_asymmetry, row_major, sq_dist};

/// Directed kNN graph. `neighbors(i)` lists the `k` nearest other nodes by
/// ascending squared Euclidean distance, ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    adjacency: Vec<usize>,
}

impl NeighborGraph {
    /// Wrap precomputed neighbor lists; validates the structural invariants.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        if k == 0 || k >= n {
            return Err(Error::Config(format!("need 1 <= k < n, got k={k}, n={n}")));
        }
        let mut adjacency = Vec::with_capacity(n * k);
        for (i, list) in lists.into_iter().enumerate() {
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if list.len() != k || seen.len() != k || list.contains(&i) || seen[k - 1] >= n {
                return Err(Error::Config(format!("invalid neighbor list for node {i}")));
            }
            adjacency.extend(list);
        }
        Ok(Self { n, k, adjacency })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i * self.k..(i + 1) * self.k]
    }

    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).contains(&j)
    }
}

pub fn build_knn(z: &DMatrix<f64>, k: usize) -> Result<NeighborGraph> {
    build_knn_with(z, k, Exec::default())
}

/// Exact kNN over the rows of `z` (brute force, `O(n² d)`).
pub fn build_knn_with(z: &DMatrix<f64>, k: usize, exec: Exec) -> Result<NeighborGraph> {
    let (n, d) = z.shape();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("need 1 <= k < n, got k={k}, n={n}")));
    }
    let rows = row_major(z);
    let lists = exec.map(n, |i| {
        let query = &rows[i * d..(i + 1) * d];
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(query, &rows[j * d..(j + 1) * d]), j))
            .collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist);
        cand.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok(NeighborGraph {
        n,
        k,
        adjacency: lists.into_iter().flatten().collect(),
    })
}

/// `Q_ij = 1/k` when `j` is one of `i`'s neighbors, else 0. Rows sum to one.
pub fn neighbor_matrix(graph: &NeighborGraph) -> DMatrix<f64> {
    let n = graph.len();
    let w = 1.0 / graph.k() as f64;
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in graph.neighbors(i) {
            q[(i, j)] = w;
        }
    }
    q
}

/// Signed seed affinities for nodes in partition order: `+1` on the diagonal
/// and between same-class labeled pairs, `−1` between differently labeled
/// pairs, `0` whenever an unlabeled node is involved.
pub fn seed_affinity(labels: &[Option<usize>]) -> DMatrix<f64> {
    let n = labels.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        match (labels[i], labels[j]) {
            (Some(a), Some(b)) if a == b => 1.0,
            (Some(_), Some(_)) => -1.0,
            _ => 0.0,
        }
    })
}

/// Symmetric binary adjacency `(A + Aᵀ) / 2` of the kNN graph: 1 for mutual
/// neighbors, 1/2 for one-sided edges.
pub fn symmetric_adjacency(graph: &NeighborGraph) -> DMatrix<f64> {
    let n = graph.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in graph.neighbors(i) {
            w[(i, j)] += 0.5;
            w[(j, i)] += 0.5;
        }
    }
    w
}

/// Graph Laplacian `D − W` with `D = diag(row sums of W)`.
pub fn laplacian(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !w.is_square() {
        return Err(Error::Dimension(format!("affinity matrix is {:?}", w.shape())));
    }
    let asym = max_asymmetry(w);
    if asym > 1e-12 {
        return Err(Error::Numerical(format!(
            "laplacian needs a symmetric affinity matrix (asymmetry {asym:e})"
        )));
    }
    let mut lap = -w.clone();
    for i in 0..w.nrows() {
        lap[(i, i)] += w.row(i).sum();
    }
    Ok(lap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Neumaier summation.
    fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut carry) = (0.0_f64, 0.0_f64);
        for v in values {
            let t = sum + v;
            carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
            sum = t;
        }
        sum + carry
    }

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(xs.len(), 1, xs)
    }

    #[test]
    fn knn_on_a_line() {
        let g = build_knn(&line(&[0.0, 1.0, 10.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(2), &[1]);

        let g2 = build_knn(&line(&[0.0, 1.0, 10.0]), 2).unwrap();
        assert_eq!(g2.neighbors(0), &[1, 2]);
        assert_eq!(g2.neighbors(2), &[1, 0]);
    }

    #[test]
    fn knn_ties_go_to_smaller_index() {
        let g = build_knn(&line(&[5.0, 5.0, 0.0, 5.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(3), &[0]);
        let g = build_knn(&line(&[0.0, -1.0, 1.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
    }

    #[test]
    fn knn_rejects_large_k() {
        assert!(matches!(build_knn(&line(&[0.0, 1.0]), 2), Err(Error::Config(_))));
        assert!(build_knn(&line(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn neighbor_matrix_small_graph() {
        let g = build_knn(&line(&[0.0, 1.0, 10.0]), 1).unwrap();
        let q = neighbor_matrix(&g);
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(q, expected);
        assert_ne!(q, q.transpose());
    }

    #[test]
    fn seed_affinity_cases() {
        assert_eq!(seed_affinity(&[Some(1), Some(1)]), DMatrix::from_element(2, 2, 1.0));
        assert_eq!(
            seed_affinity(&[Some(0), Some(1)]),
            DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])
        );
        assert_eq!(seed_affinity(&[Some(0), None]), DMatrix::identity(2, 2));
    }

    #[test]
    fn laplacian_two_nodes() {
        let w = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        assert_eq!(
            laplacian(&w).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])
        );
        let asym = DMatrix::from_row_slice(2, 2, &[0., 1., 0.5, 0.]);
        assert!(laplacian(&asym).is_err());
    }

    fn brute_knn(z: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
        let n = z.nrows();
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ((z.row(i) - z.row(j)).norm_squared(), j))
                    .collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn knn_matches_brute_force(n in 3usize..60, d in 1usize..5, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse grid values so exact ties actually occur
            let z = DMatrix::from_fn(n, d, |_, _| (rand::Rng::random_range(&mut rng, 0..4)) as f64);
            let k = 1 + ((n - 2) as f64 * k_frac) as usize;
            let g = build_knn_with(&z, k, Exec::Sequential).unwrap();
            let expected = brute_knn(&z, k);
            for (i, list) in expected.iter().enumerate() {
                prop_assert_eq!(g.neighbors(i), list.as_slice());
            }
            prop_assert_eq!(&g, &build_knn_with(&z, k, Exec::Parallel).unwrap());
            let q = neighbor_matrix(&g);
            for i in 0..n {
                // naive summation of k terms alone can drift past 1e-15 for large k
                prop_assert!((compensated_sum(q.row(i).iter().copied()) - 1.0).abs() <= 1e-15);
            }
        }

        #[test]
        fn laplacian_rows_sum_to_zero(n in 1usize..20, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = crate::linalg::random_matrix(n, n, &mut rng);
            let w = crate::linalg::sym(&a);
            let lap = laplacian(&w).unwrap();
            let ones = nalgebra::DVector::from_element(n, 1.0);
            for i in 0..n {
                prop_assert!(lap.row(i).sum().abs() <= 1e-12 * (1.0 + w.row(i).abs().sum()));
            }
            prop_assert!((ones.transpose() * &lap * &ones)[0].abs() <= 1e-11 * (1.0 + w.abs().sum()));
        }
    }
}
