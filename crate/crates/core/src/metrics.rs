//! Evaluation: bits/dim, classification error, calibration errors, OoD
//! entropy increase and typicality ROC-AUC.

use std::ops::Range;

use log::warn;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{argmax, IbInn};
use crate::objective::{add_noise, Objective};
use crate::rng::substream;

/// Rows per evaluation chunk. Fixed so results never depend on the thread
/// count.
pub const EVAL_CHUNK: usize = 1024;

/// Calibration bin edges: steps of 0.01 near 0 and 1, 0.1 in between.
pub const CALIBRATION_EDGES: [f64; 20] = [
    0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 0.96, 0.97, 0.98, 0.99,
    1.0,
];

/// `nll / (d ln 2) + log2 F`: nats per sample on `[0, 1]^d` to bits per
/// dimension on the integer scale `{0, ..., F-1}^d`.
pub fn bits_per_dim(nll: f64, dim: usize, levels: u32) -> Result<f64> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!("bits/dim needs F >= 2 quantization levels, got {levels}")));
    }
    Ok(bits_per_dim_continuous(nll, dim) + (levels as f64).log2())
}

/// `nll / (d ln 2)` for continuous data, where no rescaling applies.
pub fn bits_per_dim_continuous(nll: f64, dim: usize) -> f64 {
    nll / (dim as f64 * std::f64::consts::LN_2)
}

/// Converts a smoothed density evaluated at a grid point `w` into the
/// equivalent per-sample NLL on `[0, 1]^d`: `Q = q(w) / r(0)` recovers the
/// grid probability as `sigma -> 0`, and the returned
/// `-ln Q - d ln F` gives `bits_per_dim = -log2(Q) / d`.
pub fn grid_point_nll(log_q_w: f64, dim: usize, sigma: f64, levels: u32) -> f64 {
    let log_r0 = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    -log_q_w + log_r0 - dim as f64 * (levels as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub ice: f64,
    pub geo_mean: f64,
}

impl CalibrationReport {
    fn new(ece: f64, mce: f64, ice: f64) -> Self {
        Self { ece, mce, ice, geo_mean: (ece * mce * ice).cbrt() }
    }
}

/// Histogram of confidences with per-bin hit counts. Bin `i` covers
/// `[b_i, b_{i+1})`; the last bin also includes 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBins {
    edges: Vec<f64>,
    counts: Vec<usize>,
    correct: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityRow {
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub count: usize,
}

impl Default for CalibrationBins {
    fn default() -> Self {
        Self::with_edges(CALIBRATION_EDGES.to_vec()).expect("valid edges")
    }
}

impl CalibrationBins {
    pub fn with_edges(edges: Vec<f64>) -> Result<Self> {
        let valid = edges.len() >= 2
            && edges[0] == 0.0
            && *edges.last().unwrap() == 1.0
            && edges.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(Error::InvalidArgument("bin edges must increase strictly from 0 to 1".into()));
        }
        let n = edges.len() - 1;
        Ok(Self { edges, counts: vec![0; n], correct: vec![0; n] })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn correct_counts(&self) -> &[usize] {
        &self.correct
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn bin_of(&self, confidence: f64) -> usize {
        let last = self.counts.len() - 1;
        self.edges[1..].partition_point(|&upper| upper <= confidence).min(last)
    }

    pub fn add(&mut self, confidence: f64, correct: bool) -> Result<()> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidArgument(format!("confidence {confidence} outside [0, 1]")));
        }
        let b = self.bin_of(confidence);
        self.counts[b] += 1;
        self.correct[b] += usize::from(correct);
        Ok(())
    }

    /// Bins every entry `q(y'|x_j)` of every posterior row, counting it as
    /// correct when `y'` is the true label `y_j`.
    pub fn add_posteriors(&mut self, probs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if probs.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} posteriors for {} labels", probs.nrows(), labels.len())));
        }
        for (row, &y) in probs.rows().into_iter().zip(labels) {
            for (k, &p) in row.iter().enumerate() {
                self.add(p.clamp(0.0, 1.0), k == y)?;
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<ReliabilityRow> {
        (0..self.counts.len())
            .map(|i| ReliabilityRow {
                lower: self.edges[i],
                upper: self.edges[i + 1],
                confidence: 0.5 * (self.edges[i] + self.edges[i + 1]),
                accuracy: (self.counts[i] > 0).then(|| self.correct[i] as f64 / self.counts[i] as f64),
                count: self.counts[i],
            })
            .collect()
    }

    /// ECE weights bin gaps by occupancy, MCE takes the largest gap over
    /// occupied bins, ICE weights gaps by bin width.
    pub fn report(&self) -> CalibrationReport {
        let total = self.total();
        if total == 0 {
            return CalibrationReport::new(0.0, 0.0, 0.0);
        }
        let (mut ece, mut mce, mut ice) = (0.0, 0.0f64, 0.0);
        for row in self.rows() {
            if let Some(acc) = row.accuracy {
                let gap = (row.confidence - acc).abs();
                ece += row.count as f64 / total as f64 * gap;
                mce = mce.max(gap);
                ice += (row.upper - row.lower) * gap;
            }
        }
        CalibrationReport::new(ece, mce, ice)
    }

    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("lower,upper,confidence,accuracy,count\n");
        for r in self.rows() {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.lower, r.upper, r.confidence, acc, r.count));
        }
        out
    }
}

pub fn calibration_report(confidences: &[f64], correct: &[bool]) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::Shape(format!("{} confidences for {} outcomes", confidences.len(), correct.len())));
    }
    let mut bins = CalibrationBins::default();
    for (&c, &ok) in confidences.iter().zip(correct) {
        bins.add(c, ok)?;
    }
    Ok(bins.report())
}

/// Discrete entropy in nats.
pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn mean_entropy(probs: ArrayView2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    probs.rows().into_iter().map(|r| entropy(r.iter().copied())).sum::<f64>() / n
}

/// Mean posterior entropy on the OoD rows minus that on the in-distribution
/// rows, in nats.
pub fn entropy_increase(probs_in: ArrayView2<f64>, probs_ood: ArrayView2<f64>) -> Result<f64> {
    if probs_in.nrows() == 0 || probs_ood.nrows() == 0 {
        return Err(Error::InvalidArgument("entropy increase needs two nonempty sets".into()));
    }
    Ok(mean_entropy(probs_ood) - mean_entropy(probs_in))
}

pub fn ood_entropy_increase(model: &IbInn, x_in: ArrayView2<f64>, x_ood: ArrayView2<f64>) -> Result<f64> {
    entropy_increase(predict(model, x_in)?.view(), predict(model, x_ood)?.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AucResult {
    /// Percent; 50 is chance, 100 perfect separation.
    pub auc: f64,
    /// All scores were equal, so the ranking carried no information.
    pub degenerate: bool,
}

/// ROC-AUC of `positive` scoring above `negative` (Mann-Whitney U with
/// average ranks for ties), in percent.
pub fn roc_auc(negative: &[f64], positive: &[f64]) -> Result<AucResult> {
    if negative.is_empty() || positive.is_empty() {
        return Err(Error::InvalidArgument("AUC needs nonempty score sets".into()));
    }
    if negative.iter().chain(positive).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let first = negative[0];
    if negative.iter().chain(positive).all(|&s| s == first) {
        warn!("all typicality scores are equal; reporting chance-level AUC");
        return Ok(AucResult { auc: 50.0, degenerate: true });
    }
    let mut all: Vec<(f64, bool)> =
        negative.iter().map(|&s| (s, false)).chain(positive.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (n_pos, n_neg) = (positive.len() as f64, negative.len() as f64);
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(AucResult { auc: 100.0 * u / (n_pos * n_neg), degenerate: false })
}

/// ROC curve points `(false positive rate, true positive rate)` sweeping the
/// threshold from high to low, one point per distinct score.
pub fn roc_points(negative: &[f64], positive: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> =
        negative.iter().map(|&s| (s, false)).chain(positive.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_pos, n_neg) = (positive.len().max(1) as f64, negative.len().max(1) as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(s, pos)) in all.iter().enumerate() {
        if pos {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == all.len() || all[i + 1].0 != s {
            points.push((fp as f64 / n_neg, tp as f64 / n_pos));
        }
    }
    points
}

/// `|NLL(x) - h|` per row: distance of each sample's NLL from the typical
/// value `h` (the training-set mean NLL).
pub fn typicality_scores(model: &IbInn, x: ArrayView2<f64>, typical_nll: f64) -> Result<Vec<f64>> {
    Ok(nll(model, x)?.iter().map(|v| (v - typical_nll).abs()).collect())
}

pub fn typicality_ood_auc(model: &IbInn, x_train: ArrayView2<f64>, x_in: ArrayView2<f64>, x_ood: ArrayView2<f64>) -> Result<AucResult> {
    let h = nll(model, x_train)?.mean().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    roc_auc(&typicality_scores(model, x_in, h)?, &typicality_scores(model, x_ood, h)?)
}

/// Upper bound on worker threads: `IBINN_THREADS` if set, else the machine's
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("IBINN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to consecutive [`EVAL_CHUNK`]-row ranges on up to
/// [`eval_threads`] threads and returns the results in order.
pub fn map_chunks<T: Send>(rows: usize, f: impl Fn(Range<usize>) -> Result<T> + Sync) -> Result<Vec<T>> {
    let ranges: Vec<Range<usize>> = (0..rows).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(rows)).collect();
    let threads = eval_threads().min(ranges.len()).max(1);
    if threads == 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let per_thread = ranges.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .chunks(per_thread)
            .map(|group| {
                let f = &f;
                scope.spawn(move || group.iter().cloned().map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Per-row `-log q_X(x)`, chunked.
pub fn nll(model: &IbInn, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    if x.nrows() == 0 {
        return Ok(Array1::zeros(0));
    }
    let parts = map_chunks(x.nrows(), |r| model.nll(x.slice(ndarray::s![r, ..])))?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("1-D chunks"))
}

/// Posterior `q(y|x)` per row, chunked.
pub fn predict(model: &IbInn, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Ok(Array2::zeros((0, model.classes())));
    }
    let parts = map_chunks(x.nrows(), |r| model.predict(x.slice(ndarray::s![r, ..])))?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("matching columns"))
}

pub fn error_rate(probs: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let wrong = probs.rows().into_iter().zip(labels).filter(|(r, &y)| argmax(r.iter().copied()) != y).count();
    wrong as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodMetrics {
    pub name: String,
    /// Nats.
    pub entropy_increase: f64,
    /// Percent.
    pub typicality_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` when the objective ignores the density (only-`L_Y` training).
    pub bits_per_dim: Option<f64>,
    /// Mean noisy test NLL in nats per sample.
    pub test_nll: f64,
    pub accuracy: f64,
    pub error_pct: f64,
    pub ece: f64,
    pub mce: f64,
    pub ice: f64,
    pub geo_mean: f64,
    pub ood: Vec<OodMetrics>,
}

pub struct EvalInputs<'a> {
    pub train_x: ArrayView2<'a, f64>,
    pub test_x: ArrayView2<'a, f64>,
    pub test_labels: &'a [usize],
    pub levels: Option<u32>,
    pub ood: Vec<(String, ArrayView2<'a, f64>)>,
}

/// Full report on a test set. Bits/dim uses the test NLL under the same
/// dequantization noise `sigma` as training (drawn from `seed`).
pub fn evaluate(model: &IbInn, inputs: &EvalInputs, objective: Objective, sigma: f64, seed: u64) -> Result<MetricsReport> {
    if inputs.test_x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let noisy = add_noise(inputs.test_x, sigma, &mut substream(seed, "eval-noise", 0))?;
    let test_nll = nll(model, noisy.view())?.mean().expect("nonempty");
    let bpd = match (objective, inputs.levels) {
        (Objective::OnlyLy, _) => None,
        (_, Some(f)) => Some(bits_per_dim(test_nll, model.dim(), f)?),
        (_, None) => Some(bits_per_dim_continuous(test_nll, model.dim())),
    };
    let probs = predict(model, inputs.test_x)?;
    let err = error_rate(probs.view(), inputs.test_labels);
    let mut bins = CalibrationBins::default();
    bins.add_posteriors(probs.view(), inputs.test_labels)?;
    let cal = bins.report();

    let mut ood = Vec::new();
    if !inputs.ood.is_empty() {
        let h = nll(model, inputs.train_x)?.mean().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
        let in_scores = typicality_scores(model, inputs.test_x, h)?;
        for (name, x) in &inputs.ood {
            let p_ood = predict(model, *x)?;
            ood.push(OodMetrics {
                name: name.clone(),
                entropy_increase: entropy_increase(probs.view(), p_ood.view())?,
                typicality_auc: roc_auc(&in_scores, &typicality_scores(model, *x, h)?)?.auc,
            });
        }
    }
    Ok(MetricsReport {
        bits_per_dim: bpd,
        test_nll,
        accuracy: 1.0 - err,
        error_pct: 100.0 * err,
        ece: cal.ece,
        mce: cal.mce,
        ice: cal.ice,
        geo_mean: cal.geo_mean,
        ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bits_per_dim_formula() {
        let d = 3;
        let nll = -4.0 * d as f64 * std::f64::consts::LN_2;
        assert!((bits_per_dim(nll, d, 256).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(bits_per_dim(0.0, 5, 256).unwrap(), 8.0);
        assert!(bits_per_dim(0.0, 1, 1).is_err());
    }

    #[test]
    fn bin_assignment_at_edges() {
        let bins = CalibrationBins::default();
        assert_eq!(bins.bin_of(0.0), 0);
        assert_eq!(bins.bin_of(0.01), 1);
        assert_eq!(bins.bin_of(0.5), 9);
        assert_eq!(bins.bin_of(0.985), 17);
        assert_eq!(bins.bin_of(0.999), 18);
        assert_eq!(bins.bin_of(1.0), 18);
    }

    #[test]
    fn binary_entropy_increase() {
        let inn = array![[0.9, 0.1]];
        let ood = array![[0.6, 0.4]];
        let v = entropy_increase(inn.view(), ood.view()).unwrap();
        assert!((v - 0.3479).abs() < 1e-4);
        assert_eq!(entropy_increase(inn.view(), inn.view()).unwrap(), 0.0);
        let onehot = array![[1.0, 0.0, 0.0]];
        let uniform = array![[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        assert!((entropy_increase(onehot.view(), uniform.view()).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap().auc, 100.0);
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap().auc, 0.0);
        let s = [0.3, 0.1, 0.2, 0.2];
        assert_eq!(roc_auc(&s, &s).unwrap().auc, 50.0);
        let flat = roc_auc(&[1.0; 3], &[1.0; 2]).unwrap();
        assert!(flat.degenerate && flat.auc == 50.0);
        let pts = roc_points(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn chunked_map_keeps_order() {
        let out = map_chunks(2500, |r| Ok(r.start)).unwrap();
        assert_eq!(out, vec![0, 1024, 2048]);
    }
}
