//! Graph-based semi-supervised distance metric learning.
//!
//! A handful of labeled rows seed a signed affinity matrix over a kNN graph of
//! labeled and unlabeled examples. Affinities are propagated by a random walk,
//! each node's neighborhood is sorted by propagated affinity, and the two
//! halves of that ordering become positives and negatives for triplets. An
//! orthonormal projection `L` (so `M = L Lᵀ`) is then fit to those triplets
//! with an angular loss, optimized by conjugate gradients on the Stiefel
//! manifold. SERAPH and LRML are provided as pairwise baselines, and the
//! `eval` module scores embeddings by NMI and Recall@K.
//!
//! The hot loops (kNN search, column solves, mining, retrieval) run through
//! [`exec::Exec`], which uses rayon when the `parallel` feature is enabled.

pub mod baselines;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod manifold;
pub mod metric;
pub mod mining;
pub mod propagation;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
