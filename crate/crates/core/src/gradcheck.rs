//! Central finite differences and randomized gradient checks for every
//! analytic gradient in the crate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    labeled_pairs, lrml_gradient, lrml_objective, seraph_gradient, seraph_objective, LrmlConfig, SeraphConfig,
};
use crate::encoder::Encoder;
use crate::error::Result;
use crate::graph::laplacian;
use crate::linalg::{random_matrix, random_vector, sym};
use crate::metric::{angular_loss, angular_loss_grad_embeddings, angular_loss_grad_l, AngularConfig};
use crate::mining::Triplet;

/// Default finite-difference step.
pub const STEP: f64 = 1e-6;
/// Denominator floor of [`max_rel_error`].
pub const REL_FLOOR: f64 = 1e-3;

/// `(f(X + hEᵢⱼ) − f(X − hEᵢⱼ)) / 2h` for every entry.
pub fn central_diff<F>(x: &DMatrix<f64>, h: f64, mut f: F) -> DMatrix<f64>
where
    F: FnMut(&DMatrix<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for idx in 0..x.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        out[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// [`central_diff`] for a vector argument; returns a `len × 1` matrix.
pub fn central_diff_vec<F>(x: &DVector<f64>, h: f64, mut f: F) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    central_diff(&m, h, |p| f(&DVector::from_column_slice(p.as_slice())))
}

/// `max |a − n| / max(|a|, |n|, 1e−3)` over entries.
pub fn max_rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    AngularWrtL,
    AngularWrtEmbeddings,
    EncoderEndToEnd,
    SeraphWrtM,
    LrmlWrtM,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::AngularWrtL,
        Suite::AngularWrtEmbeddings,
        Suite::EncoderEndToEnd,
        Suite::SeraphWrtM,
        Suite::LrmlWrtM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::AngularWrtL => "angular_wrt_L",
            Suite::AngularWrtEmbeddings => "angular_wrt_embeddings",
            Suite::EncoderEndToEnd => "encoder_end_to_end",
            Suite::SeraphWrtM => "seraph_wrt_M",
            Suite::LrmlWrtM => "lrml_wrt_M",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    pub max_rel_error: f64,
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Triplet> {
    (0..size)
        .map(|_| Triplet::new(rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)))
        .collect()
}

fn random_alpha(rng: &mut ChaCha8Rng) -> AngularConfig {
    AngularConfig::new(rng.random_range(20.0..55.0)).expect("angle in range")
}

fn psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = random_matrix(d, d, rng);
    &a * a.transpose() / d as f64
}

fn one_instance(suite: Suite, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.random_range(2..=10usize);
    let n = rng.random_range(3..=8usize);
    match suite {
        Suite::AngularWrtL | Suite::AngularWrtEmbeddings => {
            let l_dim = rng.random_range(1..=d);
            let l = random_matrix(d, l_dim, rng) * 0.5;
            let z = random_matrix(n, d, rng) * 0.5;
            let size = rng.random_range(1..=6);
            let batch = random_batch(rng, n, size);
            let alpha = random_alpha(rng);
            if suite == Suite::AngularWrtL {
                let g = angular_loss_grad_l(&l, &z, &batch, alpha)?;
                let num = central_diff(&l, STEP, |p| angular_loss(p, &z, &batch, alpha).unwrap_or(f64::NAN));
                Ok(max_rel_error(&g, &num))
            } else {
                let g = angular_loss_grad_embeddings(&l, &z, &batch, alpha)?;
                let num = central_diff(&z, STEP, |p| angular_loss(&l, p, &batch, alpha).unwrap_or(f64::NAN));
                Ok(max_rel_error(&g, &num))
            }
        }
        Suite::EncoderEndToEnd => {
            let d_in = rng.random_range(2..=10usize);
            let l_dim = rng.random_range(1..=d);
            let x = random_matrix(n, d_in, rng);
            let enc = Encoder::new(random_matrix(d, d_in, rng), random_vector(d, rng), true)?;
            let l = random_matrix(d, l_dim, rng);
            let size = rng.random_range(1..=6);
            let batch = random_batch(rng, n, size);
            let alpha = random_alpha(rng);
            let z = enc.forward(&x)?;
            let grads = enc.backward(&x, &angular_loss_grad_embeddings(&l, &z, &batch, alpha)?)?;
            let loss = |a: &DMatrix<f64>, b: &DVector<f64>| -> f64 {
                let e = Encoder {
                    a: a.clone(),
                    b: b.clone(),
                    normalize: true,
                };
                e.forward(&x)
                    .and_then(|z| angular_loss(&l, &z, &batch, alpha))
                    .unwrap_or(f64::NAN)
            };
            let num_a = central_diff(&enc.a, STEP, |a| loss(a, &enc.b));
            let num_b = central_diff_vec(&enc.b, STEP, |b| loss(&enc.a, b));
            let gb = DMatrix::from_column_slice(d, 1, grads.b.as_slice());
            Ok(max_rel_error(&grads.a, &num_a).max(max_rel_error(&gb, &num_b)))
        }
        Suite::SeraphWrtM => {
            let x = random_matrix(n, d, rng) * 0.5;
            let m = psd(rng, d);
            let labels: Vec<Option<usize>> = (0..n)
                .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..2)))
                .collect();
            let lp = labeled_pairs(&labels);
            let up: Vec<(usize, usize)> = (0..rng.random_range(1..=6))
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let cfg = SeraphConfig {
                eta: rng.random_range(0.5..2.0),
                mu: rng.random_range(0.1..2.0),
                lambda: rng.random_range(0.0..0.1),
            };
            let g = seraph_gradient(&m, &x, &lp, &up, &cfg)?;
            let num = central_diff(&m, STEP, |p| seraph_objective(p, &x, &lp, &up, &cfg).unwrap_or(f64::NAN));
            Ok(max_rel_error(&g, &num))
        }
        Suite::LrmlWrtM => {
            let x = random_matrix(n, d, rng) * 0.5;
            let m = psd(rng, d);
            let labels: Vec<Option<usize>> = (0..n)
                .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..2)))
                .collect();
            let lp = labeled_pairs(&labels);
            let w = sym(&random_matrix(n, n, rng)).map(f64::abs);
            let lap = laplacian(&w)?;
            let cfg = LrmlConfig {
                gamma_s: rng.random_range(0.1..2.0),
                gamma_d: rng.random_range(0.1..2.0),
            };
            let g = lrml_gradient(&x, &lp, &lap, &cfg)?;
            let num = central_diff(&m, STEP, |p| lrml_objective(p, &x, &lp, &lap, &cfg).unwrap_or(f64::NAN));
            Ok(max_rel_error(&g, &num))
        }
    }
}

/// Worst relative error of `suite` over `instances` random problems.
pub fn run_suite(suite: Suite, instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (suite as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let err = one_instance(suite, &mut rng)?;
        // NaN must never read as a pass
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(SuiteReport {
        suite,
        instances,
        max_rel_error: worst,
    })
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Suite::ALL.iter().map(|&s| run_suite(s, instances, seed)).collect()
}
