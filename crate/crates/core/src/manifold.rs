//! First-order Riemannian optimization on the Stiefel manifold
//! `St(d, l) = {L ∈ ℝ^{d×l} : LᵀL = I_l}`.
//!
//! Tangent projection `ξ = G − L sym(LᵀG)`, QR retraction with `diag(R) > 0`,
//! Polak–Ribière (PR+) conjugate directions with vector transport by
//! re-projection, and Armijo backtracking. A Euclidean mode (no projection,
//! no retraction, steepest descent) covers the unconstrained ablation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{frob_dot, sym, thin_qr_positive};
use crate::metric::MetricL;

/// `G − L sym(LᵀG)`: projection onto the tangent space at orthonormal `L`.
pub fn tangent_project(l: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    g - l * sym(&l.tr_mul(g))
}

/// `qf(L − step·ξ)`, the Q factor of a thin QR with positive `diag(R)`.
pub fn retract_qr(l: &DMatrix<f64>, xi: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("retraction step must be positive, got {step}")));
    }
    if xi.iter().all(|&v| v == 0.0) {
        return Ok(l.clone());
    }
    let moved = l - xi * step;
    thin_qr_positive(&moved)
        .ok_or_else(|| Error::Numerical("retraction input is rank deficient; retry with a smaller step".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ConjugateGradient,
    SteepestDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Orthonormal columns, kept by retraction.
    Stiefel,
    /// Unconstrained `L`; plain gradient descent.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    /// Length (Frobenius norm of the move) of the first trial step.
    pub step0: f64,
    pub direction: Direction,
    pub constraint: Constraint,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            step0: 0.1,
            direction: Direction::ConjugateGradient,
            constraint: Constraint::Stiefel,
            grad_tol: 1e-9,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub metric: MetricL,
    /// Objective at the start and after every accepted step.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Norm of the (Riemannian) gradient at the returned iterate.
    pub grad_norm: f64,
    /// The line search failed to find an acceptable step.
    pub stalled: bool,
}

impl OptimizeOutcome {
    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("values always holds the initial objective")
    }
}

/// Minimize `objective` over `L` starting from `start`.
///
/// `objective` returns `(J, ∂J/∂L)` with the Euclidean gradient; it is called
/// only at orthonormal points in Stiefel mode. Every accepted step satisfies
/// the Armijo condition, so the objective never increases.
pub fn optimize_l<F>(start: &MetricL, mut objective: F, cfg: &OptimizerConfig) -> Result<OptimizeOutcome>
where
    F: FnMut(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    let stiefel = cfg.constraint == Constraint::Stiefel;
    if stiefel && !start.orth_enforced {
        return Err(Error::Config("Stiefel optimization needs an orthonormal start".into()));
    }
    let riemannian = |l: &DMatrix<f64>, g: DMatrix<f64>| if stiefel { tangent_project(l, &g) } else { g };

    let mut l = start.l.clone();
    let (mut value, g) = objective(&l)?;
    if !value.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut grad = riemannian(&l, g);
    let mut dir = -&grad;
    let mut values = vec![value];
    let mut step_len = cfg.step0;
    let mut stalled = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let grad_norm_sq = frob_dot(&grad, &grad);
        if grad_norm_sq.sqrt() < cfg.grad_tol {
            break;
        }
        let mut slope = frob_dot(&grad, &dir);
        if slope >= 0.0 || cfg.direction == Direction::SteepestDescent {
            dir = -&grad;
            slope = -grad_norm_sq;
        }
        let dir_norm = dir.norm();
        let mut t = step_len / dir_norm;

        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = if stiefel {
                retract_qr(&l, &(-&dir), t).ok()
            } else {
                Some(&l + &dir * t)
            };
            if let Some(candidate) = trial {
                let (v, g) = objective(&candidate)?;
                if v.is_finite() && v <= value + cfg.armijo_c * t * slope {
                    accepted = Some((candidate, v, g));
                    break;
                }
            }
            t *= cfg.backtrack;
        }
        let Some((next, next_value, next_g)) = accepted else {
            stalled = true;
            break;
        };

        let next_grad = riemannian(&next, next_g);
        dir = match cfg.direction {
            Direction::SteepestDescent => -&next_grad,
            Direction::ConjugateGradient => {
                let (old_grad, old_dir) = if stiefel {
                    (tangent_project(&next, &grad), tangent_project(&next, &dir))
                } else {
                    (grad.clone(), dir.clone())
                };
                let beta = (frob_dot(&next_grad, &(&next_grad - &old_grad)) / grad_norm_sq).max(0.0);
                -&next_grad + old_dir * beta
            }
        };
        step_len = 2.0 * t * dir_norm;
        l = next;
        value = next_value;
        grad = next_grad;
        values.push(value);
        iterations += 1;
    }

    let grad_norm = grad.norm();
    Ok(OptimizeOutcome {
        metric: MetricL { l, orth_enforced: stiefel },
        values,
        iterations,
        grad_norm,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_error, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projecting_l_itself_vanishes() {
        let l = MetricL::random(6, 3, 1).unwrap().l;
        assert!(tangent_project(&l, &l).amax() < 1e-14);
    }

    #[test]
    fn square_identity_kills_symmetric_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sym(&random_matrix(4, 4, &mut rng));
        let xi = tangent_project(&DMatrix::identity(4, 4), &g);
        assert!(xi.amax() < 1e-15);
    }

    #[test]
    fn tangent_vectors_have_skew_ltxi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let l = MetricL::random(7, 3, rand::Rng::random(&mut rng)).unwrap().l;
            let xi = tangent_project(&l, &random_matrix(7, 3, &mut rng));
            let a = l.tr_mul(&xi);
            assert!((&a + a.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn zero_step_direction_returns_l_exactly() {
        let l = MetricL::random(5, 2, 4).unwrap().l;
        assert_eq!(retract_qr(&l, &DMatrix::zeros(5, 2), 0.3).unwrap(), l);
        assert!(retract_qr(&l, &DMatrix::zeros(5, 2), 0.0).is_err());
    }

    #[test]
    fn retraction_stays_orthonormal_under_repetition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = MetricL::random(8, 3, 6).unwrap().l;
        for _ in 0..1000 {
            let xi = tangent_project(&l, &random_matrix(8, 3, &mut rng));
            let step = rand::Rng::random_range(&mut rng, 0.01..1.0);
            l = retract_qr(&l, &xi, step).unwrap();
            assert!(orthonormality_error(&l) <= 1e-10);
        }
    }

    #[test]
    fn stationary_start_returns_immediately() {
        // J(L) = ‖LᵀA‖²_F with A orthogonal to span(L0): zero gradient at L0
        let l0 = MetricL::new(DMatrix::identity(4, 2), true).unwrap();
        let a = DMatrix::from_row_slice(4, 1, &[0., 0., 1., 2.]);
        let out = optimize_l(
            &l0,
            |l| {
                let p = l.tr_mul(&a);
                Ok((p.norm_squared(), &a * p.transpose() * 2.0))
            },
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.metric.l, l0.l);
        assert!(!out.stalled);
    }

    fn top_subspace(seed: u64, cfg: &OptimizerConfig) -> (f64, f64, OptimizeOutcome) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let l = 3;
        let a = random_matrix(d, d, &mut rng);
        let s = &a * a.transpose();
        let mut eig: Vec<f64> = s.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let target = -eig[..l].iter().sum::<f64>();
        let start = MetricL::random(d, l, seed + 1).unwrap();
        let out = optimize_l(
            &start,
            |x| Ok((-(x.tr_mul(&(&s * x))).trace(), &s * x * -2.0)),
            cfg,
        )
        .unwrap();
        (target, out.final_value(), out)
    }

    #[test]
    fn cg_finds_dominant_subspace() {
        let cfg = OptimizerConfig {
            max_iter: 5000,
            ..Default::default()
        };
        let (target, got, out) = top_subspace(10, &cfg);
        assert!((got - target).abs() <= 1e-6, "{got} vs {target}");
        assert!(out.values.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(orthonormality_error(&out.metric.l) <= 1e-8);
    }

    #[test]
    fn steepest_descent_keeps_invariants() {
        let cfg = OptimizerConfig {
            max_iter: 300,
            direction: Direction::SteepestDescent,
            ..Default::default()
        };
        let (_, _, out) = top_subspace(11, &cfg);
        assert!(out.values.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(orthonormality_error(&out.metric.l) <= 1e-8);
    }

    #[test]
    fn euclidean_mode_descends_without_retraction() {
        let target = DMatrix::from_row_slice(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let start = MetricL::new(DMatrix::zeros(3, 2), false).unwrap();
        let cfg = OptimizerConfig {
            max_iter: 200,
            constraint: Constraint::Euclidean,
            ..Default::default()
        };
        let out = optimize_l(&start, |l| Ok(((l - &target).norm_squared(), (l - &target) * 2.0)), &cfg).unwrap();
        assert!(out.values.windows(2).all(|w| w[1] <= w[0]));
        assert!((out.metric.l - target).amax() < 1e-6);
        assert!(!out.metric.orth_enforced);
    }
}
