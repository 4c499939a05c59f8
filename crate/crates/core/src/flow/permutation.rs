use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{orthogonality_defect, random_orthogonal};
use crate::rng::StreamRng;

/// Fixed orthogonal mixing `Q` of `channels` values, applied independently at
/// each of `spatial` positions. In vector mode `spatial == 1` and `Q` mixes
/// all dimensions. Rows are laid out channel-major: `(c, s) -> c * spatial + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPermutation {
    channels: usize,
    spatial: usize,
    q: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl SoftPermutation {
    pub fn random(channels: usize, spatial: usize, rng: &mut StreamRng) -> Self {
        Self { channels, spatial, q: random_orthogonal(channels, rng) }
    }

    pub fn identity(channels: usize, spatial: usize) -> Self {
        Self { channels, spatial, q: Array2::eye(channels) }
    }

    pub fn from_matrix(q: Array2<f64>, spatial: usize) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::Shape("permutation matrix must be square".into()));
        }
        let defect = orthogonality_defect(&q);
        if !(defect < 1e-8) {
            return Err(Error::InvalidArgument(format!(
                "permutation matrix is not orthogonal (defect {defect:e})"
            )));
        }
        Ok(Self { channels: q.nrows(), spatial, q })
    }

    pub fn dim(&self) -> usize {
        self.channels * self.spatial
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    /// `Q u` forward, `Q^T u` inverse. Contributes zero log-determinant.
    pub fn apply(&self, u: ArrayView2<f64>, direction: Direction) -> Result<Array2<f64>> {
        if u.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "permutation expects {} columns, got {}",
                self.dim(),
                u.ncols()
            )));
        }
        let m = match direction {
            Direction::Forward => self.q.view(),
            Direction::Inverse => self.q.t(),
        };
        if self.spatial == 1 {
            return Ok(u.dot(&m.t()));
        }
        let mut out = Array2::zeros(u.raw_dim());
        for (row, mut dst) in u.rows().into_iter().zip(out.rows_mut()) {
            let x = Array2::from_shape_vec((self.channels, self.spatial), row.to_vec()).expect("channel-major row");
            let y = m.dot(&x);
            dst.assign(&y.into_shape_with_order(self.dim()).expect("contiguous"));
        }
        Ok(out)
    }

    /// Adjoint of the forward map, which is the inverse map.
    pub fn backward(&self, dv: ArrayView2<f64>) -> Array2<f64> {
        self.apply(dv, Direction::Inverse).expect("shape checked in forward")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, substream};

    #[test]
    fn identity_leaves_input_unchanged() {
        let p = SoftPermutation::identity(3, 1);
        let u = ndarray::array![[1.0, -2.0, 3.5]];
        assert_eq!(p.apply(u.view(), Direction::Forward).unwrap(), u);
    }

    #[test]
    fn preserves_norm_and_round_trips() {
        let mut rng = substream(21, "test", 0);
        for (c, s) in [(6, 1), (4, 9)] {
            let p = SoftPermutation::random(c, s, &mut rng);
            let u = Array2::from_shape_simple_fn((50, c * s), || standard_normal(&mut rng));
            let v = p.apply(u.view(), Direction::Forward).unwrap();
            for (a, b) in u.rows().into_iter().zip(v.rows()) {
                let na = a.dot(&a).sqrt();
                let nb = b.dot(&b).sqrt();
                assert!((na - nb).abs() < 1e-10);
            }
            let back = p.apply(v.view(), Direction::Inverse).unwrap();
            let err = (&back - &u).iter().fold(0.0f64, |m, e| m.max(e.abs()));
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn rejects_non_orthogonal_matrix() {
        let q = ndarray::array![[1.0, 0.5], [0.0, 1.0]];
        assert!(SoftPermutation::from_matrix(q, 1).is_err());
    }
}
