//! Small dense helpers that do not warrant a LAPACK dependency.

use ndarray::Array2;

use crate::rng::{standard_normal, StreamRng};

/// Haar-random orthogonal matrix: QR of a Gaussian matrix with the signs of
/// `R`'s diagonal folded into `Q`. Uses Gram-Schmidt with one
/// re-orthogonalization pass, which is accurate to machine precision for the
/// sizes used here.
pub fn random_orthogonal(n: usize, rng: &mut StreamRng) -> Array2<f64> {
    let a = Array2::from_shape_simple_fn((n, n), || standard_normal(rng));
    orthonormalize_columns(a)
}

pub fn orthonormalize_columns(a: Array2<f64>) -> Array2<f64> {
    let n = a.ncols();
    let mut q = a;
    for j in 0..n {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..q.nrows()).map(|i| q[[i, j]] * q[[i, k]]).sum();
                for i in 0..q.nrows() {
                    q[[i, j]] -= dot * q[[i, k]];
                }
            }
        }
        let norm = (0..q.nrows()).map(|i| q[[i, j]] * q[[i, j]]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "rank-deficient matrix");
        for i in 0..q.nrows() {
            q[[i, j]] /= norm;
        }
    }
    q
}

/// Max |Q^T Q - I| entry.
pub fn orthogonality_defect(q: &Array2<f64>) -> f64 {
    let g = q.t().dot(q);
    g.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// Orthonormal DCT-II matrix: `D[k][m] = a_k cos(pi (2m+1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Array2<f64> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, m)| {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        a * (std::f64::consts::PI * (2 * m + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = substream(11, "test", 0);
        for n in [1, 2, 5, 32] {
            let q = random_orthogonal(n, &mut rng);
            assert!(orthogonality_defect(&q) < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn dct_matrix_is_orthonormal() {
        for n in [1, 2, 4, 7] {
            assert!(orthogonality_defect(&dct_matrix(n)) < 1e-13);
        }
    }
}
