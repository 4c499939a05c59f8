//! Invertible layers and their composition into a flow network `z = g(x)`.

mod coupling;
mod permutation;
mod reshape;
mod scaling;

pub use coupling::{AffineCoupling, CouplingCache, DEFAULT_CLAMP, DEFAULT_HIDDEN, PARAM_NAMES};
pub use permutation::{Direction, SoftPermutation};
pub use reshape::{DctPool, IRevNetDownsample, ImageShape};
pub use scaling::FixedScaling;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_VECTOR_BLOCKS: usize = 8;
/// Blocks per resolution level in image mode, separated by downsampling.
pub const DEFAULT_IMAGE_LEVELS: [usize; 3] = [2, 4, 4];
/// Fully connected blocks after DCT pooling in image mode.
pub const DEFAULT_IMAGE_TAIL_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Coupling(AffineCoupling),
    Permutation(SoftPermutation),
    Scaling(FixedScaling),
    Downsample(IRevNetDownsample),
    Dct(DctPool),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "coupling",
            Layer::Permutation(_) => "permutation",
            Layer::Scaling(_) => "scaling",
            Layer::Downsample(_) => "downsample",
            Layer::Dct(_) => "dct",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.dim(),
            Layer::Permutation(p) => p.dim(),
            Layer::Scaling(s) => s.dim(),
            Layer::Downsample(d) => d.input_shape().dim(),
            Layer::Dct(d) => d.shape().dim(),
        }
    }

    fn forward(&self, u: ArrayView2<f64>) -> Result<(Array2<f64>, Option<Array1<f64>>, Option<CouplingCache>)> {
        Ok(match self {
            Layer::Coupling(c) => {
                let (v, ld, cache) = c.forward_cached(u)?;
                (v, Some(ld), Some(cache))
            }
            Layer::Permutation(p) => (p.apply(u, Direction::Forward)?, None, None),
            Layer::Scaling(s) => {
                let ld = Array1::from_elem(u.nrows(), s.log_det());
                (s.forward(u), Some(ld), None)
            }
            Layer::Downsample(d) => (d.forward(u)?, None, None),
            Layer::Dct(d) => (d.forward(u)?, None, None),
        })
    }

    fn inverse(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Layer::Coupling(c) => c.inverse(v),
            Layer::Permutation(p) => p.apply(v, Direction::Inverse),
            Layer::Scaling(s) => Ok(s.inverse(v)),
            Layer::Downsample(d) => d.inverse(v),
            Layer::Dct(d) => d.inverse(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    Vector,
    Image(ImageShape),
}

/// Ordered stack of invertible layers on `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    dim: usize,
    mode: FlowMode,
    layers: Vec<Layer>,
}

/// Recorded forward pass: outputs plus whatever each layer needs to run its
/// adjoint.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub z: Array2<f64>,
    pub logdet: Array1<f64>,
    caches: Vec<Option<CouplingCache>>,
}

fn push_block(
    layers: &mut Vec<Layer>,
    dim: usize,
    split: usize,
    perm: SoftPermutation,
    hidden: usize,
    clamp: f64,
    rng: &mut StreamRng,
) {
    layers.push(Layer::Coupling(AffineCoupling::identity(dim, split, hidden, clamp, rng)));
    layers.push(Layer::Permutation(perm));
    layers.push(Layer::Scaling(FixedScaling::ones(dim)));
}

impl FlowNetwork {
    pub fn new(dim: usize, mode: FlowMode, layers: Vec<Layer>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("flow dimension must be positive".into()));
        }
        if let FlowMode::Image(shape) = mode {
            if shape.dim() != dim {
                return Err(Error::Shape(format!("image shape {shape} does not match dim {dim}")));
            }
        }
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.dim() != dim) {
            return Err(Error::Shape(format!(
                "layer {i} ({}) has dim {}, network has {dim}",
                l.kind(),
                l.dim()
            )));
        }
        Ok(Self { dim, mode, layers })
    }

    /// Identity network (no layers).
    pub fn identity(dim: usize) -> Self {
        Self { dim, mode: FlowMode::Vector, layers: Vec::new() }
    }

    /// Vector-mode stack: each block is coupling, soft permutation, fixed
    /// scaling. Every coupling starts as the identity.
    pub fn vector(dim: usize, blocks: usize, hidden: usize, clamp: f64, rng: &mut StreamRng) -> Self {
        let mut layers = Vec::with_capacity(3 * blocks);
        for _ in 0..blocks {
            let perm = SoftPermutation::random(dim, 1, rng);
            push_block(&mut layers, dim, dim / 2, perm, hidden, clamp, rng);
        }
        Self { dim, mode: FlowMode::Vector, layers }
    }

    /// Image-mode stack: `levels[0]` blocks, downsample, `levels[1]` blocks,
    /// downsample, ..., then DCT pooling and `tail` fully connected blocks.
    ///
    /// Couplings split on channels (first `C/2` channels condition the rest);
    /// with a single channel the flat row is halved instead. Soft
    /// permutations mix channels per pixel, or all values when `C == 1`.
    pub fn image(
        shape: ImageShape,
        levels: &[usize],
        tail: usize,
        hidden: usize,
        clamp: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let dim = shape.dim();
        let mut layers = Vec::new();
        let mut current = shape;
        for (level, &blocks) in levels.iter().enumerate() {
            if level > 0 {
                let down = IRevNetDownsample::new(current)?;
                current = down.output_shape();
                layers.push(Layer::Downsample(down));
            }
            for _ in 0..blocks {
                let (split, perm) = if current.channels >= 2 {
                    (
                        (current.channels / 2) * current.spatial(),
                        SoftPermutation::random(current.channels, current.spatial(), rng),
                    )
                } else {
                    (dim / 2, SoftPermutation::random(dim, 1, rng))
                };
                push_block(&mut layers, dim, split, perm, hidden, clamp, rng);
            }
        }
        layers.push(Layer::Dct(DctPool::new(current)?));
        for _ in 0..tail {
            let perm = SoftPermutation::random(dim, 1, rng);
            push_block(&mut layers, dim, dim / 2, perm, hidden, clamp, rng);
        }
        Self::new(dim, FlowMode::Image(shape), layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> FlowMode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn push(&mut self, layer: Layer) -> Result<()> {
        if layer.dim() != self.dim {
            return Err(Error::Shape(format!("layer dim {} != network dim {}", layer.dim(), self.dim)));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn couplings(&self) -> impl Iterator<Item = &AffineCoupling> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Coupling(c) => Some(c),
            _ => None,
        })
    }

    pub fn couplings_mut(&mut self) -> impl Iterator<Item = &mut AffineCoupling> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Coupling(c) => Some(c),
            _ => None,
        })
    }

    /// Trainable tensors as `(name, values)`, coupling by coupling.
    pub fn param_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Coupling(c) = layer {
                for (name, values) in PARAM_NAMES.iter().zip(c.params()) {
                    out.push((format!("layer{i}.coupling.{name}"), values));
                }
            }
        }
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.couplings_mut().flat_map(|c| c.params_mut()).collect()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::Shape(format!("network expects {} columns, got {}", self.dim, x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let trace = self.forward_traced(x)?;
        Ok((trace.z, trace.logdet))
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<FlowTrace> {
        self.check_input(&x)?;
        let mut z = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, ld, cache) = layer.forward(z.view())?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("output of layer {i} ({})", layer.kind())));
            }
            if let Some(ld) = ld {
                logdet += &ld;
            }
            z = out;
            caches.push(cache);
        }
        Ok(FlowTrace { z, logdet, caches })
    }

    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&z)?;
        let mut x = z.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = layer.inverse(x.view())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("inverse of layer {i} ({})", layer.kind())));
            }
        }
        Ok(x)
    }

    /// Adjoint pass. `dz` is dL/dz, `dlogdet` is dL/d(log|det J|) per sample.
    /// Coupling parameter gradients are accumulated into `grads`, laid out as
    /// [`FlowNetwork::param_blocks`]. Returns dL/dx.
    pub fn backward(
        &self,
        trace: &FlowTrace,
        dz: ArrayView2<f64>,
        dlogdet: ArrayView1<f64>,
        grads: &mut [Vec<f64>],
    ) -> Array2<f64> {
        let mut g = dz.to_owned();
        let mut block_end = grads.len();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            g = match layer {
                Layer::Coupling(c) => {
                    let cache = cache.as_ref().expect("coupling cache recorded");
                    let start = block_end - PARAM_NAMES.len();
                    let out = c.backward(cache, g.view(), dlogdet, &mut grads[start..block_end]);
                    block_end = start;
                    out
                }
                Layer::Permutation(p) => p.backward(g.view()),
                Layer::Scaling(s) => s.backward(g.view()),
                Layer::Downsample(d) => d.backward(g.view()),
                Layer::Dct(d) => d.backward(g.view()),
            };
        }
        debug_assert_eq!(block_end, 0);
        g
    }

    /// Data-dependent initialization of every fixed scaling layer: propagates
    /// `x` and sets each layer so its output has zero mean and unit variance
    /// per dimension.
    pub fn init_scaling(&mut self, x: ArrayView2<f64>) -> Result<()> {
        self.check_input(&x)?;
        let mut z = x.to_owned();
        for layer in self.layers.iter_mut() {
            if let Layer::Scaling(s) = layer {
                s.fit_standardize(z.view());
            }
            z = layer.forward(z.view())?.0;
        }
        Ok(())
    }

    /// Hash of every ReLU activation pattern on `x`.
    pub fn activation_fingerprint(&self, x: ArrayView2<f64>) -> Result<u64> {
        let trace = self.forward_traced(x)?;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (layer, cache) in self.layers.iter().zip(&trace.caches) {
            if let (Layer::Coupling(c), Some(cache)) = (layer, cache) {
                c.activation_pattern(cache, &mut h);
            }
        }
        Ok(h)
    }
}
