use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Frozen per-dimension affine map `v = c * u + b`, `c > 0`. The offset
/// does not change the log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedScaling {
    c: Array1<f64>,
    b: Array1<f64>,
    log_det: f64,
}

impl FixedScaling {
    pub fn ones(dim: usize) -> Self {
        Self { c: Array1::ones(dim), b: Array1::zeros(dim), log_det: 0.0 }
    }

    pub fn new(c: Array1<f64>) -> Result<Self> {
        let b = Array1::zeros(c.len());
        Self::with_offset(c, b)
    }

    pub fn with_offset(c: Array1<f64>, b: Array1<f64>) -> Result<Self> {
        if let Some(bad) = c.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("scaling constants must be positive, got {bad}")));
        }
        if b.len() != c.len() {
            return Err(Error::Shape(format!("{} offsets for {} scaling constants", b.len(), c.len())));
        }
        if let Some(bad) = b.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("scaling offsets must be finite, got {bad}")));
        }
        let log_det = c.iter().map(|v| v.ln()).sum();
        Ok(Self { c, b, log_det })
    }

    /// Chooses `c` and `b` so each output dimension of `u` has zero mean and
    /// unit variance. Dimensions with (near) zero spread keep `c = 1`.
    pub fn fit_standardize(&mut self, u: ArrayView2<f64>) {
        let n = u.nrows().max(1) as f64;
        let mean = u.sum_axis(Axis(0)) / n;
        let var = (&u - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let c = var.mapv(|v| if v > 1e-16 { 1.0 / v.sqrt() } else { 1.0 });
        let b = -(&c * &mean);
        *self = Self::with_offset(c, b).expect("positive by construction");
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn constants(&self) -> &Array1<f64> {
        &self.c
    }

    pub fn offsets(&self) -> &Array1<f64> {
        &self.b
    }

    /// Per-sample log-determinant (identical for every input).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn forward(&self, u: ArrayView2<f64>) -> Array2<f64> {
        &u * &self.c + &self.b
    }

    pub fn inverse(&self, v: ArrayView2<f64>) -> Array2<f64> {
        (&v - &self.b) / &self.c
    }

    pub fn backward(&self, dv: ArrayView2<f64>) -> Array2<f64> {
        &dv * &self.c
    }
}
