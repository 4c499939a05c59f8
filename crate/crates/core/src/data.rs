//! Synthetic labeled datasets on `[0, 1]^d`, their out-of-distribution
//! variants, and CSV / binary file formats.
//!
//! Labels are 0-based in memory and 1-based in files.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{standard_normal, substream, StreamRng};

pub const DEFAULT_LEVELS: u32 = 256;
pub const DEFAULT_ROTATE_ANGLE: f64 = 0.3 * PI;
pub const DEFAULT_NOISE_AMPLITUDE: f64 = 0.02;
pub const DEFAULT_SHIFT_ANGLE: f64 = PI / 4.0;

const BLOB_RADIUS: f64 = 0.3;
const BLOB_STD_TANGENTIAL: f64 = 0.02;
const BLOB_STD_RADIAL: f64 = 0.05;
const MOON_NOISE: f64 = 0.1;
const EXTRA_DIM_STD: f64 = 0.05;
const RING_SPAN: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Gaussian clusters evenly spaced on a circle, elongated radially.
    Blobs,
    /// Interleaved half-circle arcs, a K-class version of two moons.
    Moons,
    /// Concentric annuli.
    Rings,
    /// Standard normal features, not quantized; labels carry no information.
    Gaussian,
}

impl Generator {
    pub fn max_classes(self) -> usize {
        match self {
            Generator::Blobs => 6,
            Generator::Moons | Generator::Rings => 8,
            Generator::Gaussian => 64,
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Blobs => "blobs",
            Generator::Moons => "moons",
            Generator::Rings => "rings",
            Generator::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Generator {
    type Err = Error;

    /// Accepts `moons-K` as a spelling of `moons`; use
    /// [`DatasetSpec::parse_generator`] to also pick up the class count.
    fn from_str(s: &str) -> Result<Self> {
        let base = s.split('-').next().unwrap_or(s);
        match base {
            "blobs" => Ok(Generator::Blobs),
            "moons" => Ok(Generator::Moons),
            "rings" => Ok(Generator::Rings),
            "gaussian" => Ok(Generator::Gaussian),
            _ => Err(Error::InvalidArgument(format!("unknown generator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Quantization levels `F`; `None` keeps continuous features.
    pub levels: Option<u32>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Moons,
            classes: 3,
            dim: 2,
            train: 20_000,
            test: 5_000,
            levels: Some(DEFAULT_LEVELS),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Parses a generator name, taking `K` from a `moons-K` suffix.
    pub fn parse_generator(&mut self, name: &str) -> Result<()> {
        self.generator = name.parse()?;
        if let Some((_, k)) = name.split_once('-') {
            self.classes = k.parse().map_err(|_| Error::InvalidArgument(format!("bad class count in `{name}`")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        if self.classes > self.generator.max_classes() {
            return Err(Error::InvalidArgument(format!(
                "{} supports at most {} separable classes, got {}",
                self.generator,
                self.generator.max_classes(),
                self.classes
            )));
        }
        if self.generator == Generator::Gaussian {
            if self.dim == 0 {
                return Err(Error::InvalidArgument("dimension must be positive".into()));
            }
        } else if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("{} needs dim >= 2, got {}", self.generator, self.dim)));
        }
        match (self.generator, self.levels) {
            (Generator::Gaussian, Some(_)) => {
                Err(Error::InvalidArgument("gaussian features are unbounded and cannot be quantized".into()))
            }
            (Generator::Gaussian, None) => Ok(()),
            (_, Some(f)) if f >= 2 => Ok(()),
            (_, f) => Err(Error::InvalidArgument(format!("quantization needs F >= 2, got {f:?}"))),
        }
    }
}

/// Features (one sample per row) with 0-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub levels: Option<u32>,
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, classes: usize, levels: Option<u32>) -> Result<Self> {
        if labels.len() != x.nrows() {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), x.nrows())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidClass { class: bad, classes });
        }
        Ok(Self { x, labels, classes, levels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            levels: self.levels,
        }
    }

    /// Quantization step `1/F`, if quantized.
    pub fn delta_x(&self) -> Option<f64> {
        self.levels.map(|f| 1.0 / f as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Maps `v` to the grid `{0, 1/F, ..., (F-1)/F}` by flooring `v * F`, with
/// values already on the grid kept in place despite rounding noise.
pub fn quantize(v: f64, levels: u32) -> f64 {
    quantize_index(v, levels) as f64 / levels as f64
}

pub fn quantize_index(v: f64, levels: u32) -> u32 {
    let t = v * levels as f64;
    let r = t.round();
    let idx = if (t - r).abs() < 1e-9 { r } else { t.floor() };
    idx.clamp(0.0, (levels - 1) as f64) as u32
}

fn quantize_all(x: &mut Array2<f64>, levels: Option<u32>) {
    if let Some(f) = levels {
        x.mapv_inplace(|v| quantize(v, f));
    }
}

/// Raw, unquantized sample of class `k`; `class_slots` is the number of
/// classes the layout reserves room for.
fn draw(gen: Generator, k: usize, class_slots: usize, dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    match gen {
        Generator::Gaussian => {
            out.iter_mut().for_each(|v| *v = standard_normal(rng));
            return out;
        }
        Generator::Blobs => {
            let theta = 2.0 * PI * k as f64 / class_slots as f64;
            let (s, c) = theta.sin_cos();
            let along = BLOB_STD_TANGENTIAL * standard_normal(rng);
            let across = BLOB_STD_RADIAL * standard_normal(rng);
            out[0] = 0.5 + BLOB_RADIUS * c + across * c - along * s;
            out[1] = 0.5 + BLOB_RADIUS * s + across * s + along * c;
        }
        Generator::Moons => {
            // arc k spans [k-1, k+1] horizontally; room is left for arc K
            let t = rng.random_range(0.0..PI);
            let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
            let x = k as f64 + sign * t.cos() + MOON_NOISE * standard_normal(rng);
            let y = (k % 2) as f64 * 0.5 + sign * t.sin() + MOON_NOISE * standard_normal(rng);
            let margin = 0.5;
            let span = class_slots as f64 + 1.0 + 2.0 * margin;
            out[0] = (x + 1.0 + margin) / span;
            out[1] = (y - 0.25) / span + 0.5;
        }
        Generator::Rings => {
            let spacing = RING_SPAN / (class_slots + 1) as f64;
            let r = (k + 1) as f64 * spacing + 0.12 * spacing * standard_normal(rng);
            let a = rng.random_range(0.0..2.0 * PI);
            out[0] = 0.5 + r * a.cos();
            out[1] = 0.5 + r * a.sin();
        }
    }
    for v in out.iter_mut().skip(2) {
        *v = 0.5 + EXTRA_DIM_STD * standard_normal(rng);
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Layout slots: moons reserve an extra arc so the held-out class fits.
fn class_slots(spec: &DatasetSpec) -> usize {
    match spec.generator {
        Generator::Moons => spec.classes + 1,
        _ => spec.classes,
    }
}

fn sample_set(spec: &DatasetSpec, n: usize, rng: &mut StreamRng) -> LabeledSet {
    let slots = class_slots(spec);
    let mut x = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let k = rng.random_range(0..spec.classes);
        labels.push(k);
        row.assign(&Array1::from(draw(spec.generator, k, slots, spec.dim, rng)));
    }
    quantize_all(&mut x, spec.levels);
    LabeledSet { x, labels, classes: spec.classes, levels: spec.levels }
}

/// Train and test sets drawn from independent streams of `spec.seed`.
pub fn make_inlier(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let train = sample_set(spec, spec.train, &mut substream(spec.seed, "data-train", 0));
    let test = sample_set(spec, spec.test, &mut substream(spec.seed, "data-test", 0));
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodKind {
    /// Rotation by an angle in a random 2-plane through the data center.
    Rotate,
    /// Additive uniform noise of a given amplitude.
    Noise,
    /// Samples of a class never seen in training.
    Holdout,
    /// Same support, with each class's spread rotated (or, for isotropic
    /// generators, stretched).
    Shift,
}

impl OodKind {
    pub const ALL: [OodKind; 4] = [OodKind::Rotate, OodKind::Noise, OodKind::Holdout, OodKind::Shift];

    pub fn default_strength(self) -> f64 {
        match self {
            OodKind::Rotate => DEFAULT_ROTATE_ANGLE,
            OodKind::Noise => DEFAULT_NOISE_AMPLITUDE,
            OodKind::Holdout => 0.0,
            OodKind::Shift => DEFAULT_SHIFT_ANGLE,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodKind::Rotate => "rotate",
            OodKind::Noise => "noise",
            OodKind::Holdout => "holdout",
            OodKind::Shift => "shift",
        })
    }
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotate" => Ok(OodKind::Rotate),
            "noise" => Ok(OodKind::Noise),
            "holdout" => Ok(OodKind::Holdout),
            "shift" => Ok(OodKind::Shift),
            _ => Err(Error::InvalidArgument(format!(
                "unknown OoD kind `{s}` (expected rotate, noise, holdout or shift)"
            ))),
        }
    }
}

fn finish(mut x: Array2<f64>, levels: Option<u32>) -> Array2<f64> {
    if levels.is_some() {
        x.mapv_inplace(|v| v.clamp(0.0, 1.0));
        quantize_all(&mut x, levels);
    }
    x
}

/// Unlabeled out-of-distribution variant of `base` (typically the inlier
/// test set), with as many rows as `base`. `strength` is the angle for
/// `rotate`/`shift`, the amplitude for `noise`, and unused for `holdout`.
pub fn make_ood(spec: &DatasetSpec, base: &LabeledSet, kind: OodKind, strength: f64) -> Result<Array2<f64>> {
    spec.validate()?;
    if base.dim() != spec.dim {
        return Err(Error::Shape(format!("base set has dim {}, spec says {}", base.dim(), spec.dim)));
    }
    if !strength.is_finite() {
        return Err(Error::InvalidArgument(format!("OoD strength must be finite, got {strength}")));
    }
    let mut rng = substream(spec.seed, "ood", kind.index());
    let center = if spec.levels.is_some() { 0.5 } else { 0.0 };
    let x = match kind {
        OodKind::Rotate => {
            let (u, v) = random_plane(spec.dim, &mut rng);
            let (s, c) = strength.sin_cos();
            let mut x = base.x.clone();
            for mut row in x.rows_mut() {
                let a: f64 = row.iter().zip(&u).map(|(x, u)| (x - center) * u).sum();
                let b: f64 = row.iter().zip(&v).map(|(x, v)| (x - center) * v).sum();
                let (da, db) = (a * (c - 1.0) - b * s, a * s + b * (c - 1.0));
                for ((x, ui), vi) in row.iter_mut().zip(&u).zip(&v) {
                    *x += da * ui + db * vi;
                }
            }
            x
        }
        OodKind::Noise => {
            if strength < 0.0 {
                return Err(Error::InvalidArgument(format!("noise amplitude must be >= 0, got {strength}")));
            }
            let mut x = base.x.clone();
            if strength > 0.0 {
                x.mapv_inplace(|v| v + rng.random_range(-strength..strength));
            }
            x
        }
        OodKind::Holdout => holdout(spec, base.len(), &mut rng),
        OodKind::Shift => shift(spec, base, strength),
    };
    Ok(finish(x, spec.levels))
}

fn random_plane(dim: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let unit = |mut v: Vec<f64>| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        v
    };
    let u = unit((0..dim).map(|_| standard_normal(rng)).collect());
    let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(b, a)| *b -= proj * a);
    (u, unit(v))
}

fn holdout(spec: &DatasetSpec, n: usize, rng: &mut StreamRng) -> Array2<f64> {
    let mut x = Array2::zeros((n, spec.dim));
    for mut row in x.rows_mut() {
        let sample = match spec.generator {
            Generator::Moons => draw(Generator::Moons, spec.classes, spec.classes + 1, spec.dim, rng),
            Generator::Blobs | Generator::Rings => {
                let std = if spec.generator == Generator::Blobs { 0.03 } else { 0.02 };
                let mut s: Vec<f64> = (0..spec.dim)
                    .map(|j| 0.5 + if j < 2 { std } else { EXTRA_DIM_STD } * standard_normal(rng))
                    .collect();
                s.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                s
            }
            // a component of unit variance off to the side of N(0, I)
            Generator::Gaussian => (0..spec.dim).map(|j| standard_normal(rng) + if j == 0 { 4.0 } else { 0.0 }).collect(),
        };
        row.assign(&Array1::from(sample));
    }
    x
}

fn shift(spec: &DatasetSpec, base: &LabeledSet, angle: f64) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((base.classes, spec.dim));
    let counts = base.class_counts();
    for (row, &y) in base.x.rows().into_iter().zip(&base.labels) {
        let mut m = means.row_mut(y);
        m += &row;
    }
    for (mut m, &c) in means.rows_mut().into_iter().zip(&counts) {
        m /= c.max(1) as f64;
    }
    let isotropic = matches!(spec.generator, Generator::Rings | Generator::Gaussian);
    let (s, c) = angle.sin_cos();
    let mut x = base.x.clone();
    for (mut row, &y) in x.rows_mut().into_iter().zip(&base.labels) {
        if isotropic {
            let center = if spec.levels.is_some() { 0.5 } else { 0.0 };
            row[0] = center + 1.3 * (row[0] - center);
            row[1] = center + 0.7 * (row[1] - center);
        } else {
            let (a, b) = (row[0] - means[[y, 0]], row[1] - means[[y, 1]]);
            row[0] = means[[y, 0]] + c * a - s * b;
            row[1] = means[[y, 1]] + s * a + c * b;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// `.bin`/`.ibds` are binary; everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("ibds") => FileFormat::Binary,
            _ => FileFormat::Csv,
        }
    }
}

impl FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" | "binary" => Ok(FileFormat::Binary),
            _ => Err(Error::InvalidArgument(format!("unknown file format `{s}`"))),
        }
    }
}

/// `d,K,F,n` then one `x_1,...,x_d,label` row per sample (`F = 0` for
/// continuous features).
pub fn to_csv(set: &LabeledSet) -> String {
    let mut out = format!("{},{},{},{}\n", set.dim(), set.classes, set.levels.unwrap_or(0), set.len());
    for (row, &y) in set.x.rows().into_iter().zip(&set.labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", y + 1));
    }
    out
}

pub fn from_csv(text: &str) -> Result<LabeledSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Dataset("empty file, expected header `d,K,F,n`".into()))?;
    let fields: Vec<usize> = header
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Dataset(format!("line 1: malformed header `{header}`, expected `d,K,F,n`")))?;
    let [d, k, f, n] = fields[..] else {
        return Err(Error::Dataset(format!("line 1: header has {} fields, expected 4 (d,K,F,n)", fields.len())));
    };
    if d == 0 || k == 0 || f == 1 {
        return Err(Error::Dataset(format!("line 1: invalid header values d={d} K={k} F={f}")));
    }
    let levels = (f > 0).then_some(f as u32);
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row_index = 0;
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        if row_index == n {
            return Err(Error::Dataset(format!("line {line_no}: extra data row {} beyond n = {n}", row_index + 1)));
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != d + 1 {
            return Err(Error::Dataset(format!(
                "line {line_no} (row {}): {} fields, expected {}",
                row_index + 1,
                parts.len(),
                d + 1
            )));
        }
        for (j, p) in parts[..d].iter().enumerate() {
            let v: f64 = p
                .parse()
                .map_err(|_| Error::Dataset(format!("line {line_no} (row {}): bad value `{p}`", row_index + 1)))?;
            if levels.is_some() && !(0.0..=1.0).contains(&v) {
                return Err(Error::Dataset(format!("line {line_no} (row {}): value {v} outside [0, 1]", row_index + 1)));
            }
            x[[row_index, j]] = match levels {
                Some(f) => quantize(v, f),
                None => v,
            };
        }
        let label: usize = parts[d]
            .parse()
            .ok()
            .filter(|&l| (1..=k).contains(&l))
            .ok_or_else(|| Error::Dataset(format!("line {line_no} (row {}): label `{}` not in 1..={k}", row_index + 1, parts[d])))?;
        labels.push(label - 1);
        row_index += 1;
    }
    if row_index != n {
        return Err(Error::Dataset(format!("header declares {n} rows but row {} is missing", row_index + 1)));
    }
    ensure_finite(x.as_slice().expect("standard layout"), || "dataset features".into())?;
    LabeledSet::new(x, labels, k, levels)
}

const BINARY_MAGIC: &[u8; 5] = b"IBDS1";

/// `IBDS1`, u32 LE `d, K, F, n`, then per sample `d` grid indices and a
/// 1-based label, one byte each.
pub fn to_binary(set: &LabeledSet) -> Result<Vec<u8>> {
    let f = set.levels.ok_or_else(|| Error::Dataset("binary format needs quantized features".into()))?;
    if f > 256 || set.classes > 255 {
        return Err(Error::Dataset(format!("binary format needs F <= 256 and K <= 255, got F={f} K={}", set.classes)));
    }
    let mut out = BINARY_MAGIC.to_vec();
    for v in [set.dim(), set.classes, f as usize, set.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (row, &y) in set.x.rows().into_iter().zip(&set.labels) {
        out.extend(row.iter().map(|&v| quantize_index(v, f) as u8));
        out.push((y + 1) as u8);
    }
    Ok(out)
}

pub fn from_binary(bytes: &[u8]) -> Result<LabeledSet> {
    if bytes.len() < 21 || &bytes[..5] != BINARY_MAGIC {
        return Err(Error::Dataset("offset 0: missing IBDS1 header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (d, k, f, n) = (field(0), field(1), field(2), field(3));
    if d == 0 || k == 0 || k > 255 || !(2..=256).contains(&f) {
        return Err(Error::Dataset(format!("offset 5: invalid header values d={d} K={k} F={f}")));
    }
    let record = d + 1;
    let body = &bytes[21..];
    if body.len() != n * record {
        return Err(Error::Dataset(format!(
            "offset 21: expected {n} records of {record} bytes ({} bytes), found {} bytes",
            n * record,
            body.len()
        )));
    }
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in body.chunks_exact(record).enumerate() {
        let offset = 21 + i * record;
        for j in 0..d {
            if rec[j] as usize >= f {
                return Err(Error::Dataset(format!("offset {}: value {} >= F = {f}", offset + j, rec[j])));
            }
            x[[i, j]] = rec[j] as f64 / f as f64;
        }
        let label = rec[d] as usize;
        if !(1..=k).contains(&label) {
            return Err(Error::Dataset(format!("offset {}: label {label} not in 1..={k}", offset + d)));
        }
        labels.push(label - 1);
    }
    LabeledSet::new(x, labels, k, Some(f as u32))
}

pub fn save(path: &Path, set: &LabeledSet, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => fs::write(path, to_csv(set))?,
        FileFormat::Binary => fs::write(path, to_binary(set)?)?,
    }
    Ok(())
}

pub fn load_external(path: &Path, format: FileFormat) -> Result<LabeledSet> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let set = match format {
        FileFormat::Csv => {
            from_csv(std::str::from_utf8(&bytes).map_err(|e| Error::Dataset(format!("not UTF-8 text: {e}")))?)
        }
        FileFormat::Binary => from_binary(&bytes),
    };
    set.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Wraps unlabeled rows (OoD sets, samples) as a set with a placeholder
/// label so they can be written in the dataset formats.
pub fn unlabeled(x: Array2<f64>, classes: usize, levels: Option<u32>) -> LabeledSet {
    let n = x.nrows();
    LabeledSet { x, labels: vec![0; n], classes, levels }
}

/// Mean and covariance of the class-`y` rows.
pub fn class_moments(x: ArrayView2<f64>, labels: &[usize], y: usize) -> (Array1<f64>, Array2<f64>) {
    let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == y).map(|(i, _)| i).collect();
    let rows = x.select(Axis(0), &idx);
    let n = rows.nrows().max(1) as f64;
    let mean = rows.sum_axis(Axis(0)) / n;
    let centered = &rows - &mean;
    let cov = centered.t().dot(&centered) / n;
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: Generator, classes: usize) -> DatasetSpec {
        DatasetSpec { generator, classes, dim: 2, train: 600, test: 300, levels: Some(256), seed: 5 }
    }

    #[test]
    fn quantize_is_idempotent_and_on_grid() {
        for &v in &[0.0, 0.3, 0.999_999, 1.0, 0.5 - 1e-12, 17.0 / 256.0, -0.2] {
            let q = quantize(v, 256);
            assert_eq!(quantize(q, 256), q);
            assert!((0.0..=255.0 / 256.0).contains(&q));
            assert_eq!((q * 256.0).fract(), 0.0);
        }
        assert_eq!(quantize(17.0 / 256.0, 256), 17.0 / 256.0);
        assert_eq!(quantize(1.0, 256), 255.0 / 256.0);
    }

    #[test]
    fn generators_are_seeded_and_bounded() {
        for g in [Generator::Blobs, Generator::Moons, Generator::Rings] {
            let s = spec(g, 3);
            let a = make_inlier(&s).unwrap();
            assert_eq!(a, make_inlier(&s).unwrap());
            assert!(a.train.x.iter().all(|v| (0.0..1.0).contains(v)));
            assert_eq!(a.train.len(), 600);
            assert_eq!(a.test.len(), 300);
            assert_ne!(a.train.x.row(0), a.test.x.row(0));
        }
    }

    #[test]
    fn too_many_classes_is_rejected() {
        assert!(make_inlier(&spec(Generator::Blobs, 7)).is_err());
        assert!(make_inlier(&spec(Generator::Moons, 9)).is_err());
        assert!(make_inlier(&DatasetSpec { levels: Some(256), ..spec(Generator::Gaussian, 1) }).is_err());
    }

    #[test]
    fn moons_name_carries_class_count() {
        let mut s = DatasetSpec::default();
        s.parse_generator("moons-4").unwrap();
        assert_eq!((s.generator, s.classes), (Generator::Moons, 4));
        assert!(s.parse_generator("spirals").is_err());
    }

    #[test]
    fn zero_strength_ood_is_identity() {
        let s = spec(Generator::Blobs, 3);
        let split = make_inlier(&s).unwrap();
        assert_eq!(make_ood(&s, &split.test, OodKind::Rotate, 0.0).unwrap(), split.test.x);
        assert_eq!(make_ood(&s, &split.test, OodKind::Noise, 0.0).unwrap(), split.test.x);
        let rotated = make_ood(&s, &split.test, OodKind::Rotate, DEFAULT_ROTATE_ANGLE).unwrap();
        assert_ne!(rotated, split.test.x);
        assert!("twist".parse::<OodKind>().is_err());
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let set = make_inlier(&spec(Generator::Moons, 3)).unwrap().test;
        assert_eq!(from_csv(&to_csv(&set)).unwrap(), set);
        assert_eq!(from_binary(&to_binary(&set).unwrap()).unwrap(), set);
        let cont = make_inlier(&DatasetSpec { levels: None, ..spec(Generator::Gaussian, 1) }).unwrap().test;
        assert_eq!(from_csv(&to_csv(&cont)).unwrap(), cont);
        assert!(to_binary(&cont).is_err());
    }

    #[test]
    fn csv_errors_name_the_row() {
        let err = from_csv("2,2,256,3\n0.1,0.2,1\n0.3,0.4,2\n").unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        let err = from_csv("2,2,256,1\n0.1,0.2,1\n0.3,0.4,2\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("row 2"), "{err}");
        let err = from_csv("2,2,256,2\n0.1,0.2,1\n0.3,x,2\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(from_csv("2,2,256,1\n0.1,0.2,3\n").is_err());
    }
}
