mod common;

use common::*;
use ibinn_core::latent::GmmLatent;
use ibinn_core::rng::{standard_normal, substream};
use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;

#[test]
fn class_density_integrates_to_one() {
    let gmm = GmmLatent::new(array![[0.3], [-1.2]]).unwrap();
    for y in 0..2 {
        let mass = simpson(|z| gmm.log_lik_class(array![z].view(), y).unwrap().exp(), -12.0, 12.0, 4000);
        assert!((mass - 1.0).abs() < 1e-4, "class {y}: {mass}");
    }
}

#[test]
fn marginal_matches_naive_sum() {
    let mut rng = substream(21, "latent-test", 0);
    let means = Array2::from_shape_simple_fn((3, 3), || standard_normal(&mut rng));
    let gmm = GmmLatent::new(means).unwrap().with_prior_logits(array![0.2, -0.7, 1.1]).unwrap();
    let w = gmm.log_weights();
    for _ in 0..50 {
        let z = Array1::from_shape_simple_fn(3, || 1.5 * standard_normal(&mut rng));
        let naive = (0..3).map(|y| (w[y] + gmm.log_lik_class(z.view(), y).unwrap()).exp()).sum::<f64>().ln();
        let lm = gmm.log_marginal(z.view()).unwrap();
        assert!((lm - naive).abs() / naive.abs() < 1e-10);
    }
}

#[test]
fn equidistant_point_has_uniform_posterior() {
    let s = 3f64.sqrt() / 2.0;
    let gmm = GmmLatent::new(array![[1.0, 0.0], [-0.5, s], [-0.5, -s]]).unwrap();
    let lp = gmm.log_posterior(array![0.0, 0.0].view()).unwrap();
    assert!(lp.iter().all(|&v| (v - (1.0f64 / 3.0).ln()).abs() < 1e-12));
}

#[test]
fn two_component_posterior_matches_density_ratio() {
    let gmm = GmmLatent::new(array![[1.0], [-1.0]]).unwrap();
    for z in [-2.0, -0.3, 0.0, 1.0, 2.5] {
        let a = normal_pdf(z, 1.0, 1.0);
        let b = normal_pdf(z, -1.0, 1.0);
        let p = gmm.log_posterior(array![z].view()).unwrap()[0].exp();
        assert!((p - a / (a + b)).abs() < 1e-12);
    }
    let p1 = gmm.log_posterior(array![1.0].view()).unwrap()[0].exp();
    assert!((p1 - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    assert!((p1 - 0.8808).abs() < 1e-4);
}

#[test]
fn samples_have_the_right_moments() {
    let gmm = GmmLatent::new(array![[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
    let n = 100_000;
    let z = gmm.sample_latent(0, n, 1.0, &mut substream(21, "latent-test", 1)).unwrap();
    let mean = z.mean_axis(Axis(0)).unwrap();
    let tol = 3.0 / (n as f64).sqrt();
    for (m, mu) in mean.iter().zip([0.5, -1.0, 2.0]) {
        assert!((m - mu).abs() < tol, "{m} vs {mu}");
    }
    let var = z.var_axis(Axis(0), 1.0);
    assert!(var.iter().all(|v| (v - 1.0).abs() < 0.05));
}

proptest! {
    #[test]
    fn posterior_is_normalized(seed in 0u64..500, k in 1usize..6, d in 1usize..5) {
        let mut rng = substream(seed, "prop-latent", 0);
        let means = Array2::from_shape_simple_fn((k, d), || standard_normal(&mut rng));
        let phi = Array1::from_shape_simple_fn(k, || standard_normal(&mut rng));
        let gmm = GmmLatent::new(means).unwrap().with_prior_logits(phi).unwrap();
        let z = Array2::from_shape_simple_fn((10, d), || 4.0 * standard_normal(&mut rng));
        let post = gmm.log_posterior_batch(z.view());
        for row in post.rows() {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let marg = gmm.log_marginal_batch(z.view());
        let joint = gmm.joint_log(z.view());
        for (m, row) in marg.iter().zip(joint.rows()) {
            prop_assert!(row.iter().all(|&j| j <= *m + 1e-12));
        }
    }
}
