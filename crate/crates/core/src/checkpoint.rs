//! Little-endian binary checkpoint of a model and (optionally) optimizer
//! state. The byte layout is described in `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::flow::{
    AffineCoupling, DctPool, FixedScaling, FlowMode, FlowNetwork, IRevNetDownsample, ImageShape, Layer,
    SoftPermutation,
};
use crate::latent::GmmLatent;
use crate::model::IbInn;

pub const MAGIC: &[u8; 6] = b"IBINN1";
pub const VERSION: u32 = 1;

const TAG_COUPLING: u8 = 1;
const TAG_PERMUTATION: u8 = 2;
const TAG_SCALING: u8 = 3;
const TAG_DOWNSAMPLE: u8 = 4;
const TAG_DCT: u8 = 5;
const TAG_GMM: u8 = 0x10;
const TAG_TRAINER: u8 = 0x20;
const TAG_END: u8 = 0xFF;

/// Optimizer progress saved next to the model so training can resume at an
/// epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: u32,
    pub step: u64,
    /// Momentum buffers in [`IbInn::param_blocks`] order.
    pub velocity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: IbInn,
    pub trainer: Option<TrainerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("size fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let v = self.f64s(rows * cols, what)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length matches"))
    }
    fn vector(&mut self, n: usize, what: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64s(n, what)?))
    }
    fn shape(&mut self, what: &str) -> Result<ImageShape> {
        Ok(ImageShape::new(self.u32(what)?, self.u32(what)?, self.u32(what)?))
    }
}

fn write_shape(w: &mut Writer, s: ImageShape) {
    w.u32(s.channels);
    w.u32(s.height);
    w.u32(s.width);
}

pub fn encode(model: &IbInn, trainer: Option<&TrainerState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(model.dim());
    let layers = model.flow.layers();
    w.u32(layers.len());
    match model.flow.mode() {
        FlowMode::Vector => w.u8(0),
        FlowMode::Image(shape) => {
            w.u8(1);
            write_shape(&mut w, shape);
        }
    }
    for layer in layers {
        match layer {
            Layer::Coupling(c) => {
                w.u8(TAG_COUPLING);
                w.u32(c.split());
                w.u32(c.transformed_dim());
                w.u32(c.hidden());
                w.f64(c.clamp());
                for p in c.params() {
                    w.f64s(p);
                }
            }
            Layer::Permutation(p) => {
                w.u8(TAG_PERMUTATION);
                w.u32(p.channels());
                w.u32(p.spatial());
                w.f64s(p.matrix().iter());
            }
            Layer::Scaling(s) => {
                w.u8(TAG_SCALING);
                w.u32(s.dim());
                w.f64s(s.constants().iter());
                w.f64s(s.offsets().iter());
            }
            Layer::Downsample(d) => {
                w.u8(TAG_DOWNSAMPLE);
                write_shape(&mut w, d.input_shape());
            }
            Layer::Dct(d) => {
                w.u8(TAG_DCT);
                write_shape(&mut w, d.shape());
            }
        }
    }
    let gmm = &model.gmm;
    w.u8(TAG_GMM);
    w.u32(gmm.classes());
    w.u32(gmm.dim());
    w.u8(u8::from(gmm.learns_prior()) | (u8::from(gmm.means_fixed()) << 1));
    w.f64s(gmm.means().iter());
    w.f64s(gmm.prior_logits().iter());
    if let Some(t) = trainer {
        w.u8(TAG_TRAINER);
        w.u32(t.epoch as usize);
        w.u64(t.step);
        w.u32(t.velocity.len());
        for v in &t.velocity {
            w.u32(v.len());
            w.f64s(v);
        }
    }
    w.u8(TAG_END);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an IBINN1 checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dim = r.u32("dim")?;
    let count = r.u32("layer count")?;
    let mode = match r.u8("mode")? {
        0 => FlowMode::Vector,
        1 => FlowMode::Image(r.shape("image shape")?),
        m => return Err(Error::Checkpoint(format!("unknown flow mode {m}"))),
    };
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = r.pos;
        let tag = r.u8("layer tag")?;
        let ctx = |e: Error| Error::Checkpoint(format!("layer {i} at byte {at}: {e}"));
        let layer = match tag {
            TAG_COUPLING => {
                let split = r.u32("coupling split")?;
                let n2 = r.u32("coupling width")?;
                let hidden = r.u32("coupling hidden")?;
                let clamp = r.f64("coupling clamp")?;
                if split + n2 != dim {
                    return Err(ctx(Error::Shape(format!("split {split} + {n2} != dim {dim}"))));
                }
                let w1 = r.matrix(split, hidden, "w1")?;
                let b1 = r.vector(hidden, "b1")?;
                let w2 = r.matrix(hidden, hidden, "w2")?;
                let b2 = r.vector(hidden, "b2")?;
                let w3 = r.matrix(hidden, 2 * n2, "w3")?;
                let b3 = r.vector(2 * n2, "b3")?;
                Layer::Coupling(AffineCoupling::from_parts(dim, split, clamp, w1, b1, w2, b2, w3, b3).map_err(ctx)?)
            }
            TAG_PERMUTATION => {
                let channels = r.u32("permutation channels")?;
                let spatial = r.u32("permutation spatial")?;
                let q = r.matrix(channels, channels, "permutation matrix")?;
                Layer::Permutation(SoftPermutation::from_matrix(q, spatial).map_err(ctx)?)
            }
            TAG_SCALING => {
                let n = r.u32("scaling dim")?;
                let c = r.vector(n, "scaling constants")?;
                let b = r.vector(n, "scaling offsets")?;
                Layer::Scaling(FixedScaling::with_offset(c, b).map_err(ctx)?)
            }
            TAG_DOWNSAMPLE => Layer::Downsample(IRevNetDownsample::new(r.shape("downsample shape")?).map_err(ctx)?),
            TAG_DCT => Layer::Dct(DctPool::new(r.shape("dct shape")?).map_err(ctx)?),
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t:#04x} at byte {at}"))),
        };
        layers.push(layer);
    }
    let flow = FlowNetwork::new(dim, mode, layers).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if r.u8("mixture tag")? != TAG_GMM {
        return Err(Error::Checkpoint(format!("expected mixture section at byte {}", r.pos - 1)));
    }
    let k = r.u32("class count")?;
    let gd = r.u32("mixture dim")?;
    let flags = r.u8("mixture flags")?;
    let means = r.matrix(k, gd, "means")?;
    let phi = r.vector(k, "prior logits")?;
    let gmm = GmmLatent::new(means)
        .and_then(|g| g.with_prior_logits(phi))
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .with_learnable_prior(flags & 1 != 0)
        .with_fixed_means(flags & 2 != 0);
    let model = IbInn::new(flow, gmm).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut trainer = None;
    loop {
        let at = r.pos;
        match r.u8("section tag")? {
            TAG_END => break,
            TAG_TRAINER => {
                let epoch = r.u32("epoch")? as u32;
                let step = r.u64("step")?;
                let blocks = r.u32("velocity block count")?;
                let mut velocity = Vec::with_capacity(blocks.min(1 << 16));
                for _ in 0..blocks {
                    let n = r.u32("velocity length")?;
                    velocity.push(r.f64s(n, "velocity")?);
                }
                trainer = Some(TrainerState { epoch, step, velocity });
            }
            t => return Err(Error::Checkpoint(format!("unknown section tag {t:#04x} at byte {at}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after end tag", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, trainer })
}

pub fn save(path: &Path, model: &IbInn, trainer: Option<&TrainerState>) -> Result<()> {
    fs::write(path, encode(model, trainer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
