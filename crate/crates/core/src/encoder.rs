//! Shallow trainable feature map `z = (A x + b) / ‖A x + b‖`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Outputs with a smaller pre-normalization norm are rejected.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// `d × d_in`
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Encoder {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, normalize: bool) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "A is {}x{} but b has length {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("encoder parameters must be finite".into()));
        }
        Ok(Self { a, b, normalize })
    }

    /// `A` with an identity in its top-left corner, `b = 0`.
    pub fn identity_init(d_in: usize, d: usize, normalize: bool) -> Self {
        Self {
            a: DMatrix::identity(d, d_in),
            b: DVector::zeros(d),
            normalize,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Pre-normalization outputs `X Aᵀ + 1 bᵀ`.
    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.a.transpose();
        for mut row in y.row_iter_mut() {
            row += self.b.transpose();
        }
        y
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut y = self.affine(x);
        if self.normalize {
            for (i, mut row) in y.row_iter_mut().enumerate() {
                let norm = row.norm();
                if norm < MIN_NORM {
                    return Err(Error::DegenerateEmbedding { row: i, norm });
                }
                row /= norm;
            }
        }
        Ok(y)
    }

    /// Gradients of a loss w.r.t. `(A, b)` given `upstream[i] = ∂J/∂zᵢ`.
    pub fn backward(&self, x: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<EncoderGrads> {
        self.check_input(x)?;
        if upstream.shape() != (x.nrows(), self.output_dim()) {
            return Err(Error::Dimension(format!(
                "upstream gradient is {:?}, expected {:?}",
                upstream.shape(),
                (x.nrows(), self.output_dim())
            )));
        }
        let mut gy = upstream.clone();
        if self.normalize {
            let y = self.affine(x);
            for (i, (yrow, mut grow)) in y.row_iter().zip(gy.row_iter_mut()).enumerate() {
                let norm = yrow.norm();
                if norm < MIN_NORM {
                    return Err(Error::DegenerateEmbedding { row: i, norm });
                }
                // (I − ẑẑᵀ) g / ‖y‖
                let zhat = yrow / norm;
                let along = zhat.dot(&grow);
                grow -= zhat * along;
                grow /= norm;
            }
        }
        Ok(EncoderGrads {
            a: gy.transpose() * x,
            b: gy.row_sum().transpose(),
        })
    }

    /// `A ← A − lr·dA`, `b ← b − lr·db`.
    pub fn sgd_update(&mut self, grads: &EncoderGrads, lr: f64) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if grads.a.shape() != self.a.shape() || grads.b.len() != self.b.len() {
            return Err(Error::Dimension("gradient shapes do not match the encoder".into()));
        }
        self.a -= &grads.a * lr;
        self.b -= &grads.b * lr;
        Ok(())
    }
}
