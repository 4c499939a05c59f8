//! Reverse-mode gradients of the loss through the flow and the mixture, and a
//! central-difference checker for them.
//!
//! The adjoints are written by hand per layer (see
//! [`FlowNetwork::backward`](crate::flow::FlowNetwork::backward) and
//! [`evaluate_head`]); there is no general tape.

use ndarray::ArrayView2;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::IbInn;
use crate::objective::{evaluate_head, loss_lx, loss_total, lx_weight, LossBreakdown, LossConfig};
use crate::rng::StreamRng;

/// One gradient buffer per trainable tensor, in
/// [`IbInn::param_blocks`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &IbInn) -> Self {
        let (names, values) = model.param_blocks().into_iter().map(|(n, v)| (n, vec![0.0; v.len()])).unzip();
        Self { names, values }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.names.iter().zip(&self.values) {
            if v.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }
}

/// Loss and its exact gradient w.r.t. every trainable parameter for one
/// batch of already-dequantized inputs.
pub fn backward(
    model: &IbInn,
    x_noisy: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    let trace = model.flow.forward_traced(x_noisy)?;
    let (breakdown, head) = evaluate_head(&model.gmm, trace.z.view(), trace.logdet.view(), labels, config, true)?;
    let head = head.expect("gradients requested");

    let mut grads = GradientSet::zeros_like(model);
    let flow_blocks = model.flow.param_blocks().len();
    model.flow.backward(&trace, head.dz.view(), head.dlogdet.view(), &mut grads.values[..flow_blocks]);
    let mut next = flow_blocks;
    if !model.gmm.means_fixed() {
        grads.values[next].copy_from_slice(head.dmeans.as_slice().expect("standard layout"));
        next += 1;
    }
    if model.gmm.learns_prior() {
        grads.values[next].copy_from_slice(head.dprior_logits.as_slice().expect("standard layout"));
    }
    grads.check_finite()?;
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Probes rejected because `+-h` moved a ReLU unit across its kink.
    pub skipped_kinks: usize,
    pub per_block: Vec<BlockError>,
    pub coordinates: Vec<CoordinateCheck>,
}

/// Denominator floor for the relative error, well above the rounding noise
/// of a central difference with `h = 1e-5` on O(1) losses (~1e-11).
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients against central differences on `coords`
/// random coordinates (block chosen uniformly, then an entry uniformly).
///
/// The prior logits are differenced through the weighted `L_X` term alone,
/// since `L_Y` is deliberately kept from training them.
pub fn grad_check(
    model: &IbInn,
    x_noisy: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
    coords: usize,
    h: f64,
    tol: f64,
    rng: &mut StreamRng,
) -> Result<GradCheckReport> {
    let (_, analytic) = backward(model, x_noisy, labels, config)?;
    compare_gradients(model, &analytic, x_noisy, labels, config, coords, h, tol, rng)
}

/// Same as [`grad_check`] but against caller-supplied analytic gradients.
#[allow(clippy::too_many_arguments)]
pub fn compare_gradients(
    model: &IbInn,
    analytic: &GradientSet,
    x_noisy: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
    coords: usize,
    h: f64,
    tol: f64,
    rng: &mut StreamRng,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let base_pattern = model.flow.activation_fingerprint(x_noisy)?;
    let mut probe = model.clone();
    let sizes: Vec<usize> = analytic.blocks().iter().map(Vec::len).collect();
    let candidates: Vec<usize> = (0..sizes.len()).filter(|&b| sizes[b] > 0).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("model has no trainable parameters".into()));
    }

    let mut checks = Vec::with_capacity(coords);
    let mut skipped = 0usize;
    let max_attempts = coords * 20 + 100;
    let mut attempts = 0;
    while checks.len() < coords && attempts < max_attempts {
        attempts += 1;
        let block = candidates[rng.random_range(0..candidates.len())];
        let index = rng.random_range(0..sizes[block]);
        let original = probe.param_blocks()[block].1[index];

        let prior_block = analytic.names()[block] == "gmm.prior_logits";
        let mut eval = |value: f64| -> Result<(f64, u64)> {
            probe.param_blocks_mut()[block][index] = value;
            let loss = if prior_block {
                lx_weight(config.objective, probe.dim()) * loss_lx(&probe, x_noisy)?
            } else {
                loss_total(&probe, x_noisy, labels, config)?.total
            };
            Ok((loss, probe.flow.activation_fingerprint(x_noisy)?))
        };
        let (plus, pat_plus) = eval(original + h)?;
        let (minus, pat_minus) = eval(original - h)?;
        probe.param_blocks_mut()[block][index] = original;

        if pat_plus != base_pattern || pat_minus != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.blocks()[block][index];
        checks.push(CoordinateCheck {
            block: analytic.names()[block].clone(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }

    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let mut per_block: Vec<BlockError> = Vec::new();
    for c in &checks {
        match per_block.iter_mut().find(|b| b.block == c.block) {
            Some(b) => {
                b.max_rel_error = b.max_rel_error.max(c.rel_error);
                b.coordinates += 1;
            }
            None => per_block.push(BlockError { block: c.block.clone(), max_rel_error: c.rel_error, coordinates: 1 }),
        }
    }
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        max_rel_error,
        passed: checks.len() == coords && max_rel_error < tol,
        skipped_kinks: skipped,
        per_block,
        coordinates: checks,
    })
}
