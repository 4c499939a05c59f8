use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::flow::FlowNetwork;
use crate::latent::GmmLatent;

/// A flow network together with its latent mixture: the full generative
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct IbInn {
    pub flow: FlowNetwork,
    pub gmm: GmmLatent,
}

impl IbInn {
    pub fn new(flow: FlowNetwork, gmm: GmmLatent) -> Result<Self> {
        if flow.dim() != gmm.dim() {
            return Err(Error::Shape(format!("flow dim {} != mixture dim {}", flow.dim(), gmm.dim())));
        }
        Ok(Self { flow, gmm })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn classes(&self) -> usize {
        self.gmm.classes()
    }

    /// Trainable tensors: coupling subnetworks, then the means (unless frozen
    /// on a hypersphere), then the prior logits (if learnable).
    pub fn param_blocks(&self) -> Vec<(String, &[f64])> {
        let mut blocks = self.flow.param_blocks();
        if !self.gmm.means_fixed() {
            blocks.push(("gmm.means".into(), self.gmm.means().as_slice().expect("standard layout")));
        }
        if self.gmm.learns_prior() {
            blocks.push(("gmm.prior_logits".into(), self.gmm.prior_logits().as_slice().expect("standard layout")));
        }
        blocks
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let fixed = self.gmm.means_fixed();
        let learn_prior = self.gmm.learns_prior();
        let mut blocks = self.flow.param_blocks_mut();
        let (means, phi) = self.gmm.params_mut();
        if !fixed {
            blocks.push(means.as_slice_mut().expect("standard layout"));
        }
        if learn_prior {
            blocks.push(phi.as_slice_mut().expect("standard layout"));
        }
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// `-log q_X(x) = -log q(g(x)) - log|det J(x)|` per row, in nats.
    pub fn nll(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, logdet) = self.flow.forward(x)?;
        Ok(-(self.gmm.log_marginal_batch(z.view()) + logdet))
    }

    /// `-log q(x|y) = -log q(g(x)|y) - log|det J(x)|` per row.
    pub fn class_nll(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<Array1<f64>> {
        check_labels(labels, x.nrows(), self.classes())?;
        let (z, logdet) = self.flow.forward(x)?;
        let ll = self.gmm.class_log_liks(z.view());
        Ok(Array1::from_iter(labels.iter().enumerate().map(|(i, &y)| -ll[[i, y]] - logdet[i])))
    }

    /// Class posterior `q(y|x)` per row. The Jacobian cancels, so this is the
    /// latent mixture posterior at `g(x)`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (z, _) = self.flow.forward(x)?;
        Ok(self.gmm.log_posterior_batch(z.view()).mapv(f64::exp))
    }

    pub fn predict_labels(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.axis_iter(Axis(0)).map(|row| argmax(row.iter().copied())).collect())
    }
}

pub(crate) fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidClass { class: bad, classes });
    }
    Ok(())
}
