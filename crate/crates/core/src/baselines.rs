//! Pairwise semi-supervised baselines over a full PSD matrix `M`.
//!
//! SERAPH: labeled-pair negative log-likelihood under the logistic pair model
//! `p(y) = 1 / (1 + exp(y (δ²_M − η)))`, plus `μ` times the entropy of that
//! model on unlabeled pairs, plus `λ Tr(M)`.
//!
//! LRML: `γ_S Σ_sim δ²_M − γ_D Σ_dis δ²_M + Tr(M Xᵀ 𝓛 X)` with `X` holding one
//! example per row. The objective is linear in `M`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, sym};
use crate::metric::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn sign(self) -> f64 {
        match self {
            PairLabel::Similar => 1.0,
            PairLabel::Dissimilar => -1.0,
        }
    }
}

/// A pair of rows with known (dis)similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
}

/// All pairs `i < j` among labeled rows.
pub fn labeled_pairs(labels: &[Option<usize>]) -> Vec<LabeledPair> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        let Some(a) = labels[i] else { continue };
        for (j, lj) in labels.iter().enumerate().skip(i + 1) {
            if let Some(b) = *lj {
                let label = if a == b { PairLabel::Similar } else { PairLabel::Dissimilar };
                pairs.push(LabeledPair { i, j, label });
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeraphConfig {
    pub eta: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl Default for SeraphConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            mu: 1.0,
            lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrmlConfig {
    pub gamma_s: f64,
    pub gamma_d: f64,
}

impl Default for LrmlConfig {
    fn default() -> Self {
        Self {
            gamma_s: 1.0,
            gamma_d: 1.0,
        }
    }
}

impl SeraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.lambda >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("SERAPH needs mu >= 0, lambda >= 0 and a finite eta".into()));
        }
        Ok(())
    }
}

impl LrmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_s < 0.0 || self.gamma_d < 0.0 || (self.gamma_s == 0.0 && self.gamma_d == 0.0) {
            return Err(Error::Config("LRML weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }
}

/// Symmetric positive semidefinite metric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMetric {
    pub m: DMatrix<f64>,
}

impl PsdMetric {
    pub fn identity(d: usize) -> Self {
        Self {
            m: DMatrix::identity(d, d),
        }
    }

    /// A factor `L = V Λ^{1/2}` with `M = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        let eig = self.m.clone().symmetric_eigen();
        let mut l = eig.eigenvectors;
        for (j, &lam) in eig.eigenvalues.iter().enumerate() {
            l.column_mut(j).scale_mut(lam.max(0.0).sqrt());
        }
        l
    }
}

/// Clamp negative eigenvalues to zero.
pub fn project_psd(m: &DMatrix<f64>) -> Result<PsdMetric> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("metric matrix is {:?}", m.shape())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("metric matrix has non-finite entries".into()));
    }
    let s = if max_asymmetry(m) > 1e-10 { sym(m) } else { m.clone() };
    let eig = s
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return Ok(PsdMetric { m: sym(m) });
    }
    let clamped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0)));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(PsdMetric { m: sym(&rebuilt) })
}

fn diff(x: &DMatrix<f64>, i: usize, j: usize) -> DVector<f64> {
    (x.row(i) - x.row(j)).transpose()
}

/// `(zᵢ − zⱼ)ᵀ M (zᵢ − zⱼ)`
pub fn mahalanobis_sq_full(m: &DMatrix<f64>, zi: &DVector<f64>, zj: &DVector<f64>) -> f64 {
    let u = zi - zj;
    u.dot(&(m * &u))
}

/// Probability of pair label `y` under the logistic model.
pub fn pair_probability(m: &DMatrix<f64>, zi: &DVector<f64>, zj: &DVector<f64>, y: PairLabel, eta: f64) -> f64 {
    let d2 = mahalanobis_sq_full(m, zi, zj);
    sigmoid(-y.sign() * (d2 - eta))
}

/// `p log p`, taken as 0 once `p` underflows below 1e−300.
fn p_log_p(p: f64, log_p: f64) -> f64 {
    if p < 1e-300 {
        0.0
    } else {
        p * log_p
    }
}

/// `Σ_{y∈±1} p(y) log p(y)` for a pair at squared distance `d2`.
fn neg_entropy(d2: f64, eta: f64) -> f64 {
    let s = d2 - eta;
    let p_sim = sigmoid(-s);
    let p_dis = sigmoid(s);
    p_log_p(p_sim, -softplus(s)) + p_log_p(p_dis, -softplus(-s))
}

fn check_rows(m: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() != x.ncols() {
        return Err(Error::Dimension(format!(
            "metric is {:?} but data has {} columns",
            m.shape(),
            x.ncols()
        )));
    }
    Ok(())
}

fn pair_d2(m: &DMatrix<f64>, x: &DMatrix<f64>, i: usize, j: usize) -> (DVector<f64>, f64) {
    let u = diff(x, i, j);
    let d2 = u.dot(&(m * &u));
    (u, d2)
}

/// The unlabeled bracket term `μ Σ_pairs Σ_y p log p` (non-positive; equal to
/// minus `μ` times the total entropy).
pub fn seraph_unlabeled_term(m: &DMatrix<f64>, x: &DMatrix<f64>, unlabeled: &[(usize, usize)], cfg: &SeraphConfig) -> Result<f64> {
    check_rows(m, x)?;
    Ok(cfg.mu * unlabeled.iter().map(|&(i, j)| neg_entropy(pair_d2(m, x, i, j).1, cfg.eta)).sum::<f64>())
}

/// `−[Σ_L log p(y) + μ Σ_U Σ_y p log p] + λ Tr(M)`
pub fn seraph_objective(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    unlabeled: &[(usize, usize)],
    cfg: &SeraphConfig,
) -> Result<f64> {
    check_rows(m, x)?;
    let nll: f64 = labeled
        .iter()
        .map(|p| softplus(p.label.sign() * (pair_d2(m, x, p.i, p.j).1 - cfg.eta)))
        .sum();
    let bracket = seraph_unlabeled_term(m, x, unlabeled, cfg)?;
    Ok(nll - bracket + cfg.lambda * m.trace())
}

/// `∂J/∂δ²` for every pair term of SERAPH, in order: labeled then unlabeled.
fn seraph_pair_coeffs(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    unlabeled: &[(usize, usize)],
    cfg: &SeraphConfig,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(labeled.len() + unlabeled.len());
    for p in labeled {
        let y = p.label.sign();
        let d2 = pair_d2(m, x, p.i, p.j).1;
        out.push((p.i, p.j, y * sigmoid(y * (d2 - cfg.eta))));
    }
    for &(i, j) in unlabeled {
        let s = pair_d2(m, x, i, j).1 - cfg.eta;
        let p = sigmoid(-s);
        // entropy H(p) has dH/dδ² = −p (1 − p) s
        out.push((i, j, -cfg.mu * p * (1.0 - p) * s));
    }
    out
}

fn accumulate_outer(x: &DMatrix<f64>, coeffs: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let d = x.ncols();
    let mut g = DMatrix::zeros(d, d);
    for &(i, j, c) in coeffs {
        let u = diff(x, i, j);
        g.ger(c, &u, &u, 1.0);
    }
    g
}

fn accumulate_embedding_grads(m: &DMatrix<f64>, x: &DMatrix<f64>, coeffs: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for &(i, j, c) in coeffs {
        let mu = m * diff(x, i, j) * (2.0 * c);
        let mut gi = g.row_mut(i);
        gi += mu.transpose();
        let mut gj = g.row_mut(j);
        gj -= mu.transpose();
    }
    g
}

pub fn seraph_gradient(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    unlabeled: &[(usize, usize)],
    cfg: &SeraphConfig,
) -> Result<DMatrix<f64>> {
    check_rows(m, x)?;
    let coeffs = seraph_pair_coeffs(m, x, labeled, unlabeled, cfg);
    let mut g = accumulate_outer(x, &coeffs);
    for k in 0..g.nrows() {
        g[(k, k)] += cfg.lambda;
    }
    Ok(sym(&g))
}

/// `∂J/∂zᵢ` of the SERAPH objective for every row of `x`.
pub fn seraph_grad_embeddings(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    unlabeled: &[(usize, usize)],
    cfg: &SeraphConfig,
) -> Result<DMatrix<f64>> {
    check_rows(m, x)?;
    let coeffs = seraph_pair_coeffs(m, x, labeled, unlabeled, cfg);
    Ok(accumulate_embedding_grads(m, x, &coeffs))
}

fn check_laplacian(x: &DMatrix<f64>, lap: &DMatrix<f64>) -> Result<()> {
    if lap.shape() != (x.nrows(), x.nrows()) {
        return Err(Error::Dimension(format!(
            "Laplacian is {:?} for {} examples",
            lap.shape(),
            x.nrows()
        )));
    }
    Ok(())
}

/// `Tr(M Xᵀ 𝓛 X)` for row-per-example `X`.
pub fn laplacian_term(m: &DMatrix<f64>, x: &DMatrix<f64>, lap: &DMatrix<f64>) -> Result<f64> {
    check_rows(m, x)?;
    check_laplacian(x, lap)?;
    let inner = x.transpose() * lap * x;
    Ok((m * inner).trace())
}

fn lrml_pair_coeffs(labeled: &[LabeledPair], cfg: &LrmlConfig) -> Vec<(usize, usize, f64)> {
    labeled
        .iter()
        .map(|p| {
            let c = match p.label {
                PairLabel::Similar => cfg.gamma_s,
                PairLabel::Dissimilar => -cfg.gamma_d,
            };
            (p.i, p.j, c)
        })
        .collect()
}

pub fn lrml_objective(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    lap: &DMatrix<f64>,
    cfg: &LrmlConfig,
) -> Result<f64> {
    let pairs: f64 = lrml_pair_coeffs(labeled, cfg)
        .iter()
        .map(|&(i, j, c)| c * pair_d2(m, x, i, j).1)
        .sum();
    Ok(pairs + laplacian_term(m, x, lap)?)
}

/// `γ_S Σ_sim u uᵀ − γ_D Σ_dis u uᵀ + Xᵀ 𝓛 X`; independent of `M`.
pub fn lrml_gradient(x: &DMatrix<f64>, labeled: &[LabeledPair], lap: &DMatrix<f64>, cfg: &LrmlConfig) -> Result<DMatrix<f64>> {
    check_laplacian(x, lap)?;
    let g = accumulate_outer(x, &lrml_pair_coeffs(labeled, cfg)) + x.transpose() * lap * x;
    Ok(sym(&g))
}

/// `∂J/∂zᵢ` of the LRML objective; the Laplacian term contributes `2 𝓛 X M`.
pub fn lrml_grad_embeddings(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    labeled: &[LabeledPair],
    lap: &DMatrix<f64>,
    cfg: &LrmlConfig,
) -> Result<DMatrix<f64>> {
    check_rows(m, x)?;
    check_laplacian(x, lap)?;
    let pairs = accumulate_embedding_grads(m, x, &lrml_pair_coeffs(labeled, cfg));
    Ok(pairs + (lap + lap.transpose()) * x * m)
}

/// Outcome of [`projected_gradient_descent`].
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub metric: PsdMetric,
    /// Objective at the start and after each accepted step.
    pub values: Vec<f64>,
}

/// Projected gradient descent on the PSD cone with backtracking: a step is
/// accepted only if it does not increase the objective.
pub fn projected_gradient_descent<F>(start: &PsdMetric, mut objective: F, steps: usize, step0: f64) -> Result<PgdOutcome>
where
    F: FnMut(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    let mut m = start.m.clone();
    let (mut value, mut grad) = objective(&m)?;
    let mut values = vec![value];
    let mut step_len = step0;
    for _ in 0..steps {
        let gnorm = grad.norm();
        if gnorm == 0.0 || !gnorm.is_finite() {
            break;
        }
        let mut t = step_len / gnorm;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = project_psd(&(&m - &grad * t))?.m;
            let (v, g) = objective(&cand)?;
            if v.is_finite() && v <= value {
                accepted = Some((cand, v, g));
                break;
            }
            t *= 0.5;
        }
        let Some((next, v, g)) = accepted else { break };
        step_len = 2.0 * t * gnorm;
        m = next;
        value = v;
        grad = g;
        values.push(value);
    }
    Ok(PgdOutcome {
        metric: PsdMetric { m },
        values,
    })
}
