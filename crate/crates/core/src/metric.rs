//! The factorized metric `M = L Lᵀ`, squared Mahalanobis distances, and the
//! angular triplet loss with its analytic gradients.
//!
//! For a triplet `(z, z⁺, z⁻)` with `u = z − z⁺` and `v = z⁻ − (z + z⁺)/2`,
//! the margin is `m = ‖Lᵀu‖² − 4 tan²α ‖Lᵀv‖²` and the loss is the softplus
//! of `m` summed over the batch. `M` is never formed: every product goes
//! through `Lᵀx` first.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{orthonormality_error, random_orthonormal};
use crate::mining::Triplet;

/// Tolerance on `‖LᵀL − I‖_F` for an orthonormal metric.
pub const ORTH_TOL: f64 = 1e-8;

/// `d × l` factor of the learned metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricL {
    pub l: DMatrix<f64>,
    pub orth_enforced: bool,
}

impl MetricL {
    pub fn new(l: DMatrix<f64>, orth_enforced: bool) -> Result<Self> {
        let (d, k) = l.shape();
        if k == 0 || k > d {
            return Err(Error::Dimension(format!("metric factor must satisfy d >= l >= 1, got {d}x{k}")));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("metric factor has non-finite entries".into()));
        }
        if orth_enforced {
            let err = orthonormality_error(&l);
            if err > ORTH_TOL {
                return Err(Error::Numerical(format!("metric factor is not orthonormal (error {err:e})")));
            }
        }
        Ok(Self { l, orth_enforced })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            l: DMatrix::identity(d, d),
            orth_enforced: true,
        }
    }

    /// Uniformly random orthonormal `d × l` factor.
    pub fn random(d: usize, l: usize, seed: u64) -> Result<Self> {
        if l == 0 || l > d {
            return Err(Error::Dimension(format!("need d >= l >= 1, got d={d}, l={l}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            l: random_orthonormal(d, l, &mut rng),
            orth_enforced: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.l.ncols()
    }

    /// `M = L Lᵀ`; for inspection only.
    pub fn metric_matrix(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Angle hyperparameter of the angular loss, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularConfig {
    alpha_deg: f64,
}

impl AngularConfig {
    pub fn new(alpha_deg: f64) -> Result<Self> {
        if !(alpha_deg > 0.0 && alpha_deg < 90.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 90) degrees, got {alpha_deg}")));
        }
        Ok(Self { alpha_deg })
    }

    pub fn alpha_deg(&self) -> f64 {
        self.alpha_deg
    }

    pub fn tan_sq(&self) -> f64 {
        self.alpha_deg.to_radians().tan().powi(2)
    }
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self { alpha_deg: 40.0 }
    }
}

/// `log(1 + eᵐ)` without overflow.
pub fn softplus(m: f64) -> f64 {
    if m > 30.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn check_dim(l: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    if v.len() != l.nrows() {
        return Err(Error::Dimension(format!(
            "vector of length {} against a {}x{} metric factor",
            v.len(),
            l.nrows(),
            l.ncols()
        )));
    }
    Ok(())
}

/// `δ²_L(zᵢ, zⱼ) = ‖Lᵀ(zᵢ − zⱼ)‖²`
pub fn mahalanobis_sq(l: &DMatrix<f64>, zi: &DVector<f64>, zj: &DVector<f64>) -> Result<f64> {
    check_dim(l, zi)?;
    check_dim(l, zj)?;
    Ok(l.tr_mul(&(zi - zj)).norm_squared())
}

/// Margin `m` of a single triplet.
pub fn angular_margin(
    l: &DMatrix<f64>,
    z: &DVector<f64>,
    zp: &DVector<f64>,
    zn: &DVector<f64>,
    alpha: AngularConfig,
) -> Result<f64> {
    for v in [z, zp, zn] {
        check_dim(l, v)?;
    }
    let u = z - zp;
    let v = zn - (z + zp) * 0.5;
    Ok(l.tr_mul(&u).norm_squared() - 4.0 * alpha.tan_sq() * l.tr_mul(&v).norm_squared())
}

/// Per-batch difference vectors, stored as columns: `U[:, i] = zᵢ − zᵢ⁺`,
/// `V[:, i] = zᵢ⁻ − (zᵢ + zᵢ⁺)/2`. Built once per batch while the
/// embeddings are fixed; every loss or gradient evaluation is then `O(d l T_b)`.
#[derive(Debug, Clone)]
pub struct TripletDiffs {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl TripletDiffs {
    pub fn new(embeddings: &DMatrix<f64>, batch: &[Triplet]) -> Result<Self> {
        let (n, d) = embeddings.shape();
        if batch.is_empty() {
            return Err(Error::NoTriplets);
        }
        if let Some(t) = batch
            .iter()
            .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
        {
            return Err(Error::Dimension(format!("triplet {t:?} indexes past {n} embeddings")));
        }
        let zt = embeddings.transpose();
        let mut u = DMatrix::zeros(d, batch.len());
        let mut v = DMatrix::zeros(d, batch.len());
        for (i, t) in batch.iter().enumerate() {
            let a = zt.column(t.anchor);
            let p = zt.column(t.positive);
            let neg = zt.column(t.negative);
            u.set_column(i, &(a - p));
            v.set_column(i, &(neg - (a + p) * 0.5));
        }
        Ok(Self { u, v })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, l: &DMatrix<f64>) -> Result<()> {
        if l.nrows() != self.u.nrows() {
            return Err(Error::Dimension(format!(
                "embeddings have dimension {} but L has {} rows",
                self.u.nrows(),
                l.nrows()
            )));
        }
        Ok(())
    }

    /// Projections `LᵀU`, `LᵀV` and the margins.
    fn project(&self, l: &DMatrix<f64>, alpha: AngularConfig) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let pu = l.tr_mul(&self.u);
        let pv = l.tr_mul(&self.v);
        let t4 = 4.0 * alpha.tan_sq();
        let m = pu
            .column_iter()
            .zip(pv.column_iter())
            .map(|(a, b)| a.norm_squared() - t4 * b.norm_squared())
            .collect();
        (pu, pv, m)
    }

    pub fn margins(&self, l: &DMatrix<f64>, alpha: AngularConfig) -> Result<Vec<f64>> {
        self.check(l)?;
        Ok(self.project(l, alpha).2)
    }

    pub fn loss(&self, l: &DMatrix<f64>, alpha: AngularConfig) -> Result<f64> {
        self.check(l)?;
        Ok(self.project(l, alpha).2.into_iter().map(softplus).sum())
    }

    /// Loss and `∂J/∂L = 2 U S (LᵀU)ᵀ − 8 tan²α V S (LᵀV)ᵀ` with `S = diag(σ(mᵢ))`.
    pub fn loss_and_grad(&self, l: &DMatrix<f64>, alpha: AngularConfig) -> Result<(f64, DMatrix<f64>)> {
        self.check(l)?;
        let (mut pu, mut pv, m) = self.project(l, alpha);
        let loss = m.iter().copied().map(softplus).sum();
        let t8 = 8.0 * alpha.tan_sq();
        for (i, &mi) in m.iter().enumerate() {
            let s = sigmoid(mi);
            pu.column_mut(i).scale_mut(2.0 * s);
            pv.column_mut(i).scale_mut(t8 * s);
        }
        let grad = &self.u * pu.transpose() - &self.v * pv.transpose();
        Ok((loss, grad))
    }
}

/// `J = Σ log(1 + exp(mᵢ))` over the batch.
pub fn angular_loss(
    l: &DMatrix<f64>,
    embeddings: &DMatrix<f64>,
    batch: &[Triplet],
    alpha: AngularConfig,
) -> Result<f64> {
    TripletDiffs::new(embeddings, batch)?.loss(l, alpha)
}

/// `∂J/∂L`, a `d × l` matrix.
pub fn angular_loss_grad_l(
    l: &DMatrix<f64>,
    embeddings: &DMatrix<f64>,
    batch: &[Triplet],
    alpha: AngularConfig,
) -> Result<DMatrix<f64>> {
    TripletDiffs::new(embeddings, batch)?
        .loss_and_grad(l, alpha)
        .map(|(_, g)| g)
}

/// `∂J/∂z` for every embedding row (rows not touched by the batch are zero).
pub fn angular_loss_grad_embeddings(
    l: &DMatrix<f64>,
    embeddings: &DMatrix<f64>,
    batch: &[Triplet],
    alpha: AngularConfig,
) -> Result<DMatrix<f64>> {
    let diffs = TripletDiffs::new(embeddings, batch)?;
    diffs.check(l)?;
    let (pu, pv, m) = diffs.project(l, alpha);
    // M u = L (Lᵀu), column per triplet
    let mu = l * pu;
    let mv = l * pv;
    let t = alpha.tan_sq();
    let (n, d) = embeddings.shape();
    let mut grad = vec![0.0; n * d];
    for (i, trip) in batch.iter().enumerate() {
        let s = sigmoid(m[i]);
        for r in 0..d {
            let a = 2.0 * mu[(r, i)];
            let b = 4.0 * t * mv[(r, i)];
            grad[trip.anchor * d + r] += s * (a + b);
            grad[trip.positive * d + r] += s * (b - a);
            grad[trip.negative * d + r] -= s * 2.0 * b;
        }
    }
    Ok(DMatrix::from_row_slice(n, d, &grad))
}

/// Rows `xᵢᵀ L`: the embedding of each row of `x`.
pub fn embed(l: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != l.nrows() {
        return Err(Error::Dimension(format!(
            "data has {} columns but L has {} rows",
            x.ncols(),
            l.nrows()
        )));
    }
    Ok(x * l)
}
