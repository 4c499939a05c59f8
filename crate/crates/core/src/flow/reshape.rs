//! Volume-preserving image layers: i-RevNet space-to-depth downsampling and
//! per-channel DCT pooling. Image rows are channel-major `(c, h, w)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dct_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn downsampled(&self) -> Self {
        Self::new(self.channels * 4, self.height / 2, self.width / 2)
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Moves each 2x2 spatial block into four channels. Output channel
/// `k * C + c` holds input channel `c` at block offset `k = 2 * di + dj`,
/// so a single-channel block `[[a, b], [c, d]]` becomes `(a, b, c, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IRevNetDownsample {
    input: ImageShape,
    /// `source[o]` is the input index feeding output index `o`.
    source: Vec<usize>,
}

impl IRevNetDownsample {
    pub fn new(input: ImageShape) -> Result<Self> {
        if !input.height.is_multiple_of(2) || !input.width.is_multiple_of(2) || input.height == 0 || input.width == 0 {
            return Err(Error::Shape(format!("downsampling needs even spatial size, got {input}")));
        }
        let out = input.downsampled();
        let (c, h, w) = (input.channels, input.height, input.width);
        let mut source = vec![0; input.dim()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let k = (i % 2) * 2 + (j % 2);
                    let o = (k * c + ch) * out.spatial() + (i / 2) * out.width + j / 2;
                    source[o] = ch * h * w + i * w + j;
                }
            }
        }
        Ok(Self { input, source })
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn output_shape(&self) -> ImageShape {
        self.input.downsampled()
    }

    pub fn forward(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&u)?;
        let mut out = Array2::zeros(u.raw_dim());
        for (src, mut dst) in u.rows().into_iter().zip(out.rows_mut()) {
            for (o, &i) in self.source.iter().enumerate() {
                dst[o] = src[i];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&v)?;
        let mut out = Array2::zeros(v.raw_dim());
        for (src, mut dst) in v.rows().into_iter().zip(out.rows_mut()) {
            for (o, &i) in self.source.iter().enumerate() {
                dst[i] = src[o];
            }
        }
        Ok(out)
    }

    pub fn backward(&self, dv: ArrayView2<f64>) -> Array2<f64> {
        self.inverse(dv).expect("shape checked in forward")
    }

    fn check(&self, u: &ArrayView2<f64>) -> Result<()> {
        if u.ncols() != self.input.dim() {
            return Err(Error::Shape(format!(
                "downsampling of {} expects {} columns, got {}",
                self.input,
                self.input.dim(),
                u.ncols()
            )));
        }
        Ok(())
    }
}

/// Orthonormal 2-D DCT-II over the spatial axes of every channel. Output
/// coefficients keep the `(c, k, l)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DctPool {
    shape: ImageShape,
    basis: Array2<f64>,
}

impl DctPool {
    pub fn new(shape: ImageShape) -> Result<Self> {
        if shape.height != shape.width || shape.height == 0 {
            return Err(Error::Shape(format!("DCT pooling needs a square spatial input, got {shape}")));
        }
        Ok(Self { shape, basis: dct_matrix(shape.height) })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn map(&self, u: ArrayView2<f64>, transpose: bool) -> Result<Array2<f64>> {
        if u.ncols() != self.shape.dim() {
            return Err(Error::Shape(format!(
                "DCT pooling of {} expects {} columns, got {}",
                self.shape,
                self.shape.dim(),
                u.ncols()
            )));
        }
        let n = self.shape.height;
        let d = if transpose { self.basis.t() } else { self.basis.view() };
        let mut out = Array2::zeros(u.raw_dim());
        for (src, mut dst) in u.rows().into_iter().zip(out.rows_mut()) {
            for ch in 0..self.shape.channels {
                let block = src.slice(ndarray::s![ch * n * n..(ch + 1) * n * n]);
                let x = block.into_shape_with_order((n, n)).expect("contiguous channel");
                let y = d.dot(&x).dot(&d.t());
                dst.slice_mut(ndarray::s![ch * n * n..(ch + 1) * n * n])
                    .assign(&y.into_shape_with_order(n * n).expect("contiguous"));
            }
        }
        Ok(out)
    }

    pub fn forward(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map(u, false)
    }

    pub fn inverse(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.map(v, true)
    }

    pub fn backward(&self, dv: ArrayView2<f64>) -> Array2<f64> {
        self.map(dv, true).expect("shape checked in forward")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_block_order() {
        let down = IRevNetDownsample::new(ImageShape::new(1, 2, 2)).unwrap();
        let u = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(down.forward(u.view()).unwrap(), u);
        let down = IRevNetDownsample::new(ImageShape::new(1, 2, 4)).unwrap();
        // [[a b e f] [c d g h]] -> channels k: (a,e) (b,f) (c,g) (d,h)
        let u = array![[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]];
        let v = down.forward(u.view()).unwrap();
        assert_eq!(v, array![[1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]]);
    }

    #[test]
    fn shape_law_and_odd_sizes() {
        let s = ImageShape::new(3, 4, 6);
        let d = IRevNetDownsample::new(s).unwrap();
        assert_eq!(d.output_shape(), ImageShape::new(12, 2, 3));
        assert_eq!(d.output_shape().dim(), s.dim());
        assert!(IRevNetDownsample::new(ImageShape::new(1, 3, 4)).is_err());
    }

    #[test]
    fn dct_of_constant_image() {
        let pool = DctPool::new(ImageShape::new(2, 4, 4)).unwrap();
        let u = Array2::from_elem((1, 32), 0.7);
        let v = pool.forward(u.view()).unwrap();
        for ch in 0..2 {
            assert!((v[[0, ch * 16]] - 0.7 * 4.0).abs() < 1e-12);
            for k in 1..16 {
                assert!(v[[0, ch * 16 + k]].abs() < 1e-12);
            }
        }
        assert!(DctPool::new(ImageShape::new(1, 2, 4)).is_err());
    }
}
