//! Class-conditional unit-covariance Gaussian mixture in latent space.
//!
//! `q(z|y) = N(z; mu_y, I)`, `q(y) = softmax(phi)_y`, and the marginal and
//! posterior follow by Bayes' rule. All log-densities are in nats and include
//! the `-(d/2) log 2 pi` normalizer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, StreamRng};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Stable `log(sum(exp(xs)))`. Returns `-inf` for an empty or all `-inf`
/// input.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let lse = logsumexp(xs.iter().copied());
    xs.mapv(|x| x - lse)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmLatent {
    means: Array2<f64>,
    phi: Array1<f64>,
    learn_prior: bool,
    fixed_means: bool,
}

impl GmmLatent {
    /// Mixture with the given means (`K x d`) and uniform prior.
    pub fn new(means: Array2<f64>) -> Result<Self> {
        if means.nrows() == 0 || means.ncols() == 0 {
            return Err(Error::Shape("mixture needs at least one class and one dimension".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture means".into()));
        }
        let k = means.nrows();
        Ok(Self { means, phi: Array1::zeros(k), learn_prior: false, fixed_means: false })
    }

    /// Means drawn i.i.d. from `N(0, 1/d)`.
    pub fn init(classes: usize, dim: usize, rng: &mut StreamRng) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        Self::new(Array2::from_shape_simple_fn((classes, dim), || scale * standard_normal(rng)))
    }

    /// Random directions scaled to norm `radius`, frozen during training.
    pub fn on_hypersphere(classes: usize, dim: usize, radius: f64, rng: &mut StreamRng) -> Result<Self> {
        let mut gmm = Self::init(classes, dim, rng)?;
        for mut row in gmm.means.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row *= radius / norm;
        }
        gmm.fixed_means = true;
        Ok(gmm)
    }

    pub fn with_prior_logits(mut self, phi: Array1<f64>) -> Result<Self> {
        if phi.len() != self.classes() {
            return Err(Error::Shape(format!("{} prior logits for {} classes", phi.len(), self.classes())));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior logits".into()));
        }
        self.phi = phi;
        Ok(self)
    }

    pub fn with_learnable_prior(mut self, learn: bool) -> Self {
        self.learn_prior = learn;
        self
    }

    pub fn with_fixed_means(mut self, fixed: bool) -> Self {
        self.fixed_means = fixed;
        self
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn means_mut(&mut self) -> &mut Array2<f64> {
        &mut self.means
    }

    pub fn prior_logits(&self) -> &Array1<f64> {
        &self.phi
    }

    pub fn prior_logits_mut(&mut self) -> &mut Array1<f64> {
        &mut self.phi
    }

    /// Means and prior logits borrowed mutably at once.
    pub fn params_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.means, &mut self.phi)
    }

    pub fn learns_prior(&self) -> bool {
        self.learn_prior
    }

    pub fn means_fixed(&self) -> bool {
        self.fixed_means
    }

    /// `w_y = log q(y)`.
    pub fn log_weights(&self) -> Array1<f64> {
        log_softmax(self.phi.view())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::InvalidClass { class: y, classes: self.classes() });
        }
        Ok(())
    }

    fn check_latent(&self, z: &ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!("latent has {} entries, mixture dim is {}", z.len(), self.dim())));
        }
        Ok(())
    }

    fn sq_dist(z: ArrayView1<f64>, mu: ArrayView1<f64>) -> f64 {
        z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `log N(z; mu_y, I)`.
    pub fn log_lik_class(&self, z: ArrayView1<f64>, y: usize) -> Result<f64> {
        self.check_latent(&z)?;
        self.check_class(y)?;
        Ok(-0.5 * Self::sq_dist(z, self.means.row(y)) - 0.5 * self.dim() as f64 * LN_2PI)
    }

    /// `log N(z_i; mu_y, I)` for every row `i` and class `y`.
    pub fn class_log_liks(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let norm = 0.5 * self.dim() as f64 * LN_2PI;
        let mut out = Array2::zeros((z.nrows(), self.classes()));
        for (zi, mut row) in z.rows().into_iter().zip(out.rows_mut()) {
            for (y, mu) in self.means.rows().into_iter().enumerate() {
                row[y] = -0.5 * Self::sq_dist(zi, mu) - norm;
            }
        }
        out
    }

    /// `log q(z_i|y) + w_y`.
    pub fn joint_log(&self, z: ArrayView2<f64>) -> Array2<f64> {
        self.class_log_liks(z) + &self.log_weights()
    }

    pub fn log_marginal(&self, z: ArrayView1<f64>) -> Result<f64> {
        self.check_latent(&z)?;
        let joint = self.joint_log(z.insert_axis(Axis(0)));
        Ok(logsumexp(joint.iter().copied()))
    }

    pub fn log_marginal_batch(&self, z: ArrayView2<f64>) -> Array1<f64> {
        self.joint_log(z).map_axis(Axis(1), |row| logsumexp(row.iter().copied()))
    }

    /// `log q(y|z)` for all classes.
    pub fn log_posterior(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_latent(&z)?;
        Ok(self.log_posterior_batch(z.insert_axis(Axis(0))).row(0).to_owned())
    }

    pub fn log_posterior_batch(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut joint = self.joint_log(z);
        for mut row in joint.rows_mut() {
            let lse = logsumexp(row.iter().copied());
            row -= lse;
        }
        joint
    }

    /// `count` draws of `mu_y + temperature * n`, `n ~ N(0, I)`.
    pub fn sample_latent(&self, y: usize, count: usize, temperature: f64, rng: &mut StreamRng) -> Result<Array2<f64>> {
        self.check_class(y)?;
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be >= 0, got {temperature}")));
        }
        let mu = self.means.row(y);
        let mut out = Array2::zeros((count, self.dim()));
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(mu) {
                *v = m + temperature * standard_normal(rng);
            }
        }
        Ok(out)
    }
}
