//! Small dense-matrix helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Copy a matrix into a row-major buffer so rows are contiguous.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Frobenius inner product `tr(Aᵀ B)`.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(A + Aᵀ) / 2`
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `‖LᵀL − I‖_F`
pub fn orthonormality_error(l: &DMatrix<f64>) -> f64 {
    let g = l.transpose() * l;
    let eye = DMatrix::<f64>::identity(g.nrows(), g.ncols());
    (g - eye).norm()
}

/// Largest absolute entrywise asymmetry `max |A_ij − A_ji|`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Thin QR with the sign convention `diag(R) > 0`.
///
/// Returns `None` when a diagonal entry of `R` is negligible relative to the
/// column scale, i.e. the input is numerically rank deficient.
pub fn thin_qr_positive(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (rows, cols) = a.shape();
    if cols > rows {
        return None;
    }
    let scale = a.column_iter().map(|c| c.norm()).fold(0.0_f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        let d = r[(j, j)];
        if d.abs() <= 1e-12 * scale {
            return None;
        }
        if d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Some(q)
}

/// A `d × l` matrix with orthonormal columns drawn uniformly (QR of a Gaussian).
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, l: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let g = DMatrix::<f64>::from_fn(d, l, |_, _| rng.sample(StandardNormal));
        if let Some(q) = thin_qr_positive(&g) {
            return q;
        }
    }
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Shortest decimal form with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qr_sign_convention_keeps_orthonormal_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_orthonormal(7, 3, &mut rng);
        assert!(orthonormality_error(&l) < 1e-13);
        let q = thin_qr_positive(&l).unwrap();
        assert!((q - &l).amax() < 1e-13);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let mut a = DMatrix::<f64>::zeros(4, 2);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 2.0;
        assert!(thin_qr_positive(&a).is_none());
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
