//! Affine coupling block with a tanh-clamped log-scale.
//!
//! The input row `u` is split into `u1 = u[..split]` and `u2 = u[split..]`.
//! A dense subnetwork (two ReLU hidden layers) maps `u1` to a raw log-scale
//! `s` and a shift `t` for `u2`:
//!
//! ```text
//! s_c = clamp * tanh(s)
//! v1  = u1
//! v2  = u2 * exp(s_c) + t
//! log|det J| = sum(s_c)
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamRng};

pub const DEFAULT_CLAMP: f64 = 2.0;
pub const DEFAULT_HIDDEN: usize = 64;

/// Names of the six parameter tensors, in [`AffineCoupling::params`] order.
pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling {
    dim: usize,
    split: usize,
    clamp: f64,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

/// Activations kept from the forward pass for [`AffineCoupling::backward`].
#[derive(Debug, Clone)]
pub struct CouplingCache {
    u1: Array2<f64>,
    u2: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    tanh_s: Array2<f64>,
    scale: Array2<f64>,
}

struct SubnetOut {
    h1: Array2<f64>,
    h2: Array2<f64>,
    s_raw: Array2<f64>,
    shift: Array2<f64>,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl AffineCoupling {
    /// A block whose subnetwork output layer is zero, so the block starts as
    /// the identity map. Hidden weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn identity(dim: usize, split: usize, hidden: usize, clamp: f64, rng: &mut StreamRng) -> Self {
        assert!(split < dim, "coupling split must leave a transformed part");
        assert!(clamp > 0.0, "clamp must be positive");
        let n2 = dim - split;
        let bound = |fan_in: usize| 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut uniform = |b: f64, n: usize| (0..n).map(|_| rng.random_range(-b..b)).collect::<Vec<f64>>();
        let w1 = Array2::from_shape_vec((split, hidden), uniform(bound(split), split * hidden)).unwrap();
        let b1 = Array1::from(uniform(bound(split), hidden));
        let w2 = Array2::from_shape_vec((hidden, hidden), uniform(bound(hidden), hidden * hidden)).unwrap();
        let b2 = Array1::from(uniform(bound(hidden), hidden));
        Self {
            dim,
            split,
            clamp,
            w1,
            b1,
            w2,
            b2,
            w3: Array2::zeros((hidden, 2 * n2)),
            b3: Array1::zeros(2 * n2),
        }
    }

    /// Rebuilds a block from raw tensors, validating their shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        split: usize,
        clamp: f64,
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        w3: Array2<f64>,
        b3: Array1<f64>,
    ) -> Result<Self> {
        let hidden = b1.len();
        let n2 = dim.checked_sub(split).filter(|&n| n > 0).ok_or_else(|| {
            Error::Shape(format!("coupling split {split} must be below dim {dim}"))
        })?;
        let ok = w1.dim() == (split, hidden)
            && w2.dim() == (hidden, hidden)
            && b2.len() == hidden
            && w3.dim() == (hidden, 2 * n2)
            && b3.len() == 2 * n2;
        if !ok {
            return Err(Error::Shape("coupling parameter tensors are inconsistent".into()));
        }
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(Error::InvalidArgument(format!("clamp must be positive, got {clamp}")));
        }
        Ok(Self { dim, split, clamp, w1, b1, w2, b2, w3, b3 })
    }

    /// Overwrites every parameter (including the output layer) with
    /// `N(0, scale^2)` draws. Used to test non-trivial blocks.
    pub fn randomize(&mut self, scale: f64, rng: &mut StreamRng) {
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = scale * standard_normal(rng);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn transformed_dim(&self) -> usize {
        self.dim - self.split
    }

    pub fn params(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    fn check_input(&self, u: &ArrayView2<f64>, what: &str) -> Result<()> {
        if u.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "coupling {what}: expected {} columns, got {}",
                self.dim,
                u.ncols()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coupling {what} input")));
        }
        Ok(())
    }

    fn subnet(&self, u1: ArrayView2<f64>) -> SubnetOut {
        let mut h1 = u1.dot(&self.w1) + &self.b1;
        relu_inplace(&mut h1);
        let mut h2 = h1.dot(&self.w2) + &self.b2;
        relu_inplace(&mut h2);
        let out = h2.dot(&self.w3) + &self.b3;
        let n2 = self.transformed_dim();
        let s_raw = out.slice(s![.., ..n2]).to_owned();
        let shift = out.slice(s![.., n2..]).to_owned();
        SubnetOut { h1, h2, s_raw, shift }
    }

    /// Forward map of a batch (rows are samples). Returns outputs and the
    /// per-sample log-determinant.
    pub fn forward(&self, u: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (v, logdet, _) = self.forward_cached(u)?;
        Ok((v, logdet))
    }

    pub fn forward_cached(&self, u: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, CouplingCache)> {
        self.check_input(&u, "forward")?;
        let u1 = u.slice(s![.., ..self.split]);
        let u2 = u.slice(s![.., self.split..]).to_owned();
        let SubnetOut { h1, h2, s_raw, shift } = self.subnet(u1);
        let tanh_s = s_raw.mapv(f64::tanh);
        let clamp = self.clamp;
        let scale = tanh_s.mapv(|t| (clamp * t).exp());
        let v2 = &u2 * &scale + &shift;
        let logdet = tanh_s.sum_axis(Axis(1)) * clamp;
        let v = concatenate(Axis(1), &[u1, v2.view()]).expect("matching rows");
        let cache = CouplingCache { u1: u1.to_owned(), u2, h1, h2, tanh_s, scale };
        Ok((v, logdet, cache))
    }

    pub fn inverse(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&v, "inverse")?;
        let v1 = v.slice(s![.., ..self.split]);
        let v2 = v.slice(s![.., self.split..]);
        let SubnetOut { s_raw, shift, .. } = self.subnet(v1);
        let clamp = self.clamp;
        let mut u2 = &v2 - &shift;
        Zip::from(&mut u2).and(&s_raw).for_each(|u, &s| *u *= (-clamp * s.tanh()).exp());
        Ok(concatenate(Axis(1), &[v1, u2.view()]).expect("matching rows"))
    }

    /// Reverse-mode pass. `dv` is dL/dv, `dlogdet` is dL/d(log|det J|) per
    /// sample. Parameter gradients are accumulated into `grads` (six buffers
    /// in [`PARAM_NAMES`] order); returns dL/du.
    pub fn backward(
        &self,
        cache: &CouplingCache,
        dv: ArrayView2<f64>,
        dlogdet: ArrayView1<f64>,
        grads: &mut [Vec<f64>],
    ) -> Array2<f64> {
        debug_assert_eq!(grads.len(), 6);
        let dv1 = dv.slice(s![.., ..self.split]);
        let dv2 = dv.slice(s![.., self.split..]);
        let du2 = &dv2 * &cache.scale;

        let clamp = self.clamp;
        let mut ds_raw = &du2 * &cache.u2;
        Zip::from(ds_raw.rows_mut()).and(dlogdet).for_each(|mut row, &g| row += g);
        Zip::from(&mut ds_raw).and(&cache.tanh_s).for_each(|d, &t| *d *= clamp * (1.0 - t * t));
        let dout = concatenate(Axis(1), &[ds_raw.view(), dv2]).expect("matching rows");

        add_into(&mut grads[4], cache.h2.t().dot(&dout));
        add_into(&mut grads[5], dout.sum_axis(Axis(0)));
        let mut dh2 = dout.dot(&self.w3.t());
        Zip::from(&mut dh2).and(&cache.h2).for_each(|d, &h| if h <= 0.0 { *d = 0.0 });

        add_into(&mut grads[2], cache.h1.t().dot(&dh2));
        add_into(&mut grads[3], dh2.sum_axis(Axis(0)));
        let mut dh1 = dh2.dot(&self.w2.t());
        Zip::from(&mut dh1).and(&cache.h1).for_each(|d, &h| if h <= 0.0 { *d = 0.0 });

        add_into(&mut grads[0], cache.u1.t().dot(&dh1));
        add_into(&mut grads[1], dh1.sum_axis(Axis(0)));
        let du1 = &dv1 + &dh1.dot(&self.w1.t());

        concatenate(Axis(1), &[du1.view(), du2.view()]).expect("matching rows")
    }

    /// Fingerprint of the ReLU activation pattern on a batch. Two parameter
    /// settings with equal fingerprints lie in the same linear region of
    /// every hidden unit (up to hash collisions).
    pub(crate) fn activation_pattern(&self, cache: &CouplingCache, hasher: &mut u64) {
        for h in cache.h1.iter().chain(cache.h2.iter()) {
            let bit = u64::from(*h > 0.0);
            *hasher = (*hasher ^ bit).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;

    #[test]
    fn zero_output_layer_is_identity() {
        let mut rng = substream(1, "test", 0);
        let block = AffineCoupling::identity(5, 2, 16, DEFAULT_CLAMP, &mut rng);
        let u = Array2::from_shape_simple_fn((7, 5), || standard_normal(&mut rng));
        let (v, logdet) = block.forward(u.view()).unwrap();
        assert_eq!(v, u);
        assert!(logdet.iter().all(|&l| l == 0.0));
        assert_eq!(block.inverse(u.view()).unwrap(), u);
    }

    #[test]
    fn constant_scale_and_shift() {
        let mut rng = substream(2, "test", 0);
        let mut block = AffineCoupling::identity(2, 1, 8, DEFAULT_CLAMP, &mut rng);
        // s_c = 2 tanh(s) = 0.5, t = 1
        block.b3[0] = (0.25f64).atanh();
        block.b3[1] = 1.0;
        let u = array![[0.0, 1.0]];
        let (v, logdet) = block.forward(u.view()).unwrap();
        assert_eq!(v[[0, 0]], 0.0);
        assert!((v[[0, 1]] - (0.5f64.exp() + 1.0)).abs() < 1e-14);
        assert!((logdet[0] - 0.5).abs() < 1e-14);

        let back = block.inverse(v.view()).unwrap();
        assert!((back[[0, 1]] - 1.0).abs() < 1e-14);
        let v2 = array![[0.0, 3.0]];
        let u2 = block.inverse(v2.view()).unwrap();
        assert!((u2[[0, 1]] - (3.0 - 1.0) * (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let mut rng = substream(3, "test", 0);
        let block = AffineCoupling::identity(4, 2, 8, DEFAULT_CLAMP, &mut rng);
        let bad = array![[0.0, f64::NAN, 1.0, 2.0]];
        assert!(matches!(block.forward(bad.view()), Err(Error::NonFinite(_))));
        assert!(matches!(block.inverse(bad.view()), Err(Error::NonFinite(_))));
        let wrong = array![[0.0, 1.0, 2.0]];
        assert!(matches!(block.forward(wrong.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn log_det_is_bounded_by_clamp() {
        let mut rng = substream(4, "test", 0);
        let mut block = AffineCoupling::identity(6, 3, 16, DEFAULT_CLAMP, &mut rng);
        block.randomize(3.0, &mut rng);
        let u = Array2::from_shape_simple_fn((200, 6), || 5.0 * standard_normal(&mut rng));
        let (_, logdet) = block.forward(u.view()).unwrap();
        let bound = DEFAULT_CLAMP * 3.0;
        assert!(logdet.iter().all(|l| l.abs() <= bound), "{logdet}");
    }

    #[test]
    fn one_dimensional_block_is_a_learnable_affine_map() {
        let mut rng = substream(5, "test", 0);
        let mut block = AffineCoupling::identity(1, 0, 4, DEFAULT_CLAMP, &mut rng);
        block.b3[0] = 0.3;
        block.b3[1] = -2.0;
        let u = array![[1.0], [2.0]];
        let (v, logdet) = block.forward(u.view()).unwrap();
        let a = (2.0 * 0.3f64.tanh()).exp();
        assert!((v[[0, 0]] - (a - 2.0)).abs() < 1e-14);
        assert!((v[[1, 0]] - (2.0 * a - 2.0)).abs() < 1e-14);
        assert!((logdet[0] - a.ln()).abs() < 1e-14);
    }
}
