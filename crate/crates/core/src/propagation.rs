//! Random-walk affinity propagation: `W* = (1 − γ)(I − γQ)⁻¹ W⁰`, followed by
//! symmetrization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Partitions up to this many nodes use the dense direct solve by default.
pub const DIRECT_SOLVE_MAX_NODES: usize = 2000;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Symmetric propagated affinities used for mining.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub w: DMatrix<f64>,
    pub gamma: f64,
}

impl AffinityMatrix {
    /// Propagate with the default solver choice, then symmetrize.
    pub fn propagate(q: &DMatrix<f64>, w0: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let wstar = propagate(q, w0, gamma)?;
        Ok(Self {
            w: symmetrize(&wstar),
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }
}

fn check_inputs(q: &DMatrix<f64>, w0: &DMatrix<f64>, gamma: f64) -> Result<()> {
    if !q.is_square() || q.shape() != w0.shape() {
        return Err(Error::Dimension(format!(
            "Q is {:?} but W0 is {:?}",
            q.shape(),
            w0.shape()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// Dense solve for `n ≤ 2000`, fixed-point iteration above.
pub fn propagate(q: &DMatrix<f64>, w0: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    if q.nrows() <= DIRECT_SOLVE_MAX_NODES {
        propagate_direct(q, w0, gamma)
    } else {
        propagate_iterative(q, w0, gamma, DEFAULT_TOL, DEFAULT_MAX_ITER).map(|p| p.w)
    }
}

pub fn propagate_direct(q: &DMatrix<f64>, w0: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    propagate_direct_with(q, w0, gamma, Exec::default())
}

/// Solve `(I − γQ) W* = (1 − γ) W⁰` column by column from one LU factorization.
pub fn propagate_direct_with(
    q: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    gamma: f64,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    check_inputs(q, w0, gamma)?;
    let n = q.nrows();
    if gamma == 0.0 {
        return Ok(w0.clone());
    }
    let system = DMatrix::<f64>::identity(n, n) - q * gamma;
    let lu = system.lu();
    let scale = 1.0 - gamma;
    let columns: Vec<Option<DVector<f64>>> = exec.map(n, |j| {
        let rhs: DVector<f64> = w0.column(j) * scale;
        lu.solve(&rhs)
    });
    let mut out = DMatrix::zeros(n, n);
    for (j, col) in columns.into_iter().enumerate() {
        let col = col.ok_or_else(|| {
            Error::Numerical("propagation system (I - gamma Q) is singular".into())
        })?;
        out.set_column(j, &col);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite propagated affinity".into()));
    }
    Ok(out)
}

/// Result of the fixed-point solver.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub w: DMatrix<f64>,
    pub iterations: usize,
    /// Max-abs change of the last iteration.
    pub residual: f64,
}

pub fn propagate_iterative(
    q: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Propagated> {
    propagate_iterative_with(q, w0, gamma, tol, max_iter, Exec::default())
}

/// Iterate `W ← γ Q W + (1 − γ) W⁰` from `W⁰` until the max-abs change is
/// at most `tol`. `Q` is read once into sparse rows, so each sweep costs
/// `O(n² k)` for a kNN neighbor matrix.
pub fn propagate_iterative_with(
    q: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    gamma: f64,
    tol: f64,
    max_iter: usize,
    exec: Exec,
) -> Result<Propagated> {
    check_inputs(q, w0, gamma)?;
    if tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let n = q.nrows();
    let sparse: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter_map(|j| {
                    let v = q[(i, j)];
                    (v != 0.0).then_some((j, v))
                })
                .collect()
        })
        .collect();
    // row-major copies: row i of W is contiguous
    let seed = crate::linalg::row_major(w0);
    let mut current = seed.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let rows: Vec<(Vec<f64>, f64)> = exec.map(n, |i| {
            let mut row: Vec<f64> = seed[i * n..(i + 1) * n].iter().map(|v| (1.0 - gamma) * v).collect();
            for &(j, qij) in &sparse[i] {
                let coeff = gamma * qij;
                for (r, w) in row.iter_mut().zip(&current[j * n..(j + 1) * n]) {
                    *r += coeff * w;
                }
            }
            let change = row
                .iter()
                .zip(&current[i * n..(i + 1) * n])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            (row, change)
        });
        residual = rows.iter().map(|(_, c)| *c).fold(0.0_f64, f64::max);
        current = rows.into_iter().flat_map(|(r, _)| r).collect();
        if !residual.is_finite() {
            return Err(Error::Numerical("propagation iterate became non-finite".into()));
        }
        if residual <= tol {
            return Ok(Propagated {
                w: DMatrix::from_row_slice(n, n, &current),
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

/// `(W + Wᵀ) / 2`, exactly symmetric.
pub fn symmetrize(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    DMatrix::from_fn(n, w.ncols(), |i, j| 0.5 * (w[(i, j)] + w[(j, i)]))
}
