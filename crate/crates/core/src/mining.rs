//! Triplet mining from affinity-sorted kNN neighborhoods.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::NeighborGraph;
use crate::propagation::AffinityMatrix;

/// Mini-batch size used throughout training unless configured otherwise.
pub const DEFAULT_BATCH_TRIPLETS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

pub type TripletBatch = Vec<Triplet>;

/// The anchor's graph neighbors ordered by descending affinity, ties by
/// ascending node index.
pub fn sorted_neighborhood(w: &AffinityMatrix, graph: &NeighborGraph, anchor: usize) -> Vec<usize> {
    let mut nbrs = graph.neighbors(anchor).to_vec();
    nbrs.sort_by(|&a, &b| {
        w.get(anchor, b)
            .total_cmp(&w.get(anchor, a))
            .then(a.cmp(&b))
    });
    nbrs
}

pub fn mine_triplets(
    w: &AffinityMatrix,
    graph: &NeighborGraph,
    anchors: &[usize],
) -> Result<Vec<Triplet>> {
    mine_triplets_with(w, graph, anchors, Exec::default())
}

/// For each anchor, pair the rank-`i` neighbor (positive) with the
/// rank-`k/2 + i` neighbor (negative), `i = 1..k/2`. Output follows anchor order.
pub fn mine_triplets_with(
    w: &AffinityMatrix,
    graph: &NeighborGraph,
    anchors: &[usize],
    exec: Exec,
) -> Result<Vec<Triplet>> {
    let k = graph.k();
    if !k.is_multiple_of(2) {
        return Err(Error::Config(format!("triplet mining needs an even k, got {k}")));
    }
    if w.len() != graph.len() {
        return Err(Error::Dimension(format!(
            "affinity matrix has {} nodes, graph has {}",
            w.len(),
            graph.len()
        )));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= graph.len()) {
        return Err(Error::Config(format!("anchor {bad} out of range")));
    }
    let half = k / 2;
    let per_anchor = exec.map(anchors.len(), |idx| {
        let a = anchors[idx];
        let sorted = sorted_neighborhood(w, graph, a);
        (0..half)
            .map(|i| Triplet::new(a, sorted[i], sorted[half + i]))
            .collect::<Vec<_>>()
    });
    Ok(per_anchor.into_iter().flatten().collect())
}

/// Seed for epoch `epoch` derived from a base seed (SplitMix64 step).
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffle under `seed` and cut into batches of `batch_size`; only the last
/// batch may be short.
pub fn batch_triplets(triplets: &[Triplet], batch_size: usize, seed: u64) -> Result<Vec<TripletBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    let mut order = triplets.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[Triplet]>::to_vec).collect())
}
