mod common;

use common::*;
use ibinn_core::flow::{
    AffineCoupling, DctPool, Direction, FixedScaling, FlowNetwork, IRevNetDownsample, ImageShape, SoftPermutation,
    DEFAULT_CLAMP,
};
use ibinn_core::linalg::random_orthogonal;
use ibinn_core::rng::{standard_normal, substream, StreamRng};
use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;

fn randn(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || standard_normal(rng))
}

fn norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

#[test]
fn coupling_logdet_matches_fd_jacobian() {
    let mut rng = substream(11, "flow-test", 0);
    let mut block = AffineCoupling::identity(6, 3, 24, DEFAULT_CLAMP, &mut rng);
    block.randomize(0.5, &mut rng);
    for _ in 0..5 {
        let u = Array1::from_shape_simple_fn(6, || standard_normal(&mut rng));
        let f = |v: &Array1<f64>| block.forward(v.view().insert_axis(Axis(0))).unwrap().0.row(0).to_owned();
        let brute = lu_log_abs_det(fd_jacobian(f, &u, 1e-6));
        let ld = block.forward(u.view().insert_axis(Axis(0))).unwrap().1[0];
        assert!((ld - brute).abs() / brute.abs().max(1e-12) < 1e-4, "{ld} vs {brute}");
    }
}

#[test]
fn coupling_round_trip_thousand_vectors() {
    let mut rng = substream(11, "flow-test", 1);
    let mut block = AffineCoupling::identity(5, 2, 32, DEFAULT_CLAMP, &mut rng);
    block.randomize(1.0, &mut rng);
    let u = randn(1000, 5, &mut rng) * 3.0;
    let (v, _) = block.forward(u.view()).unwrap();
    assert!(max_abs_diff(&block.inverse(v.view()).unwrap(), &u) < 1e-6);
}

#[test]
fn permutation_from_qr_round_trips() {
    let mut rng = substream(11, "flow-test", 2);
    let q = random_orthogonal(7, &mut rng);
    let p = SoftPermutation::from_matrix(q, 1).unwrap();
    let u = randn(200, 7, &mut rng);
    let v = p.apply(u.view(), Direction::Forward).unwrap();
    for (a, b) in u.rows().into_iter().zip(v.rows()) {
        assert!((norm(a) - norm(b)).abs() < 1e-10);
    }
    assert!(max_abs_diff(&p.apply(v.view(), Direction::Inverse).unwrap(), &u) < 1e-10);
}

#[test]
fn downsample_order_and_exact_round_trip() {
    let d = IRevNetDownsample::new(ImageShape::new(1, 2, 2)).unwrap();
    let x = array![[1.0, 2.0, 3.0, 4.0]];
    // [[a, b], [c, d]] -> channels (a, b, c, d)
    assert_eq!(d.forward(x.view()).unwrap(), x);

    let shape = ImageShape::new(3, 4, 4);
    let d = IRevNetDownsample::new(shape).unwrap();
    let out = d.output_shape();
    assert_eq!((out.channels, out.height, out.width), (12, 2, 2));
    let mut rng = substream(11, "flow-test", 3);
    let x = randn(10, shape.dim(), &mut rng);
    assert_eq!(d.inverse(d.forward(x.view()).unwrap().view()).unwrap(), x);
}

#[test]
fn dct_parseval_and_round_trip() {
    let shape = ImageShape::new(2, 4, 4);
    let dct = DctPool::new(shape).unwrap();
    let mut rng = substream(11, "flow-test", 4);
    let x = randn(50, shape.dim(), &mut rng);
    let y = dct.forward(x.view()).unwrap();
    for (a, b) in x.rows().into_iter().zip(y.rows()) {
        assert!((norm(a) - norm(b)).abs() < 1e-8);
    }
    assert!(max_abs_diff(&dct.inverse(y.view()).unwrap(), &x) < 1e-8);
}

#[test]
fn identity_network_and_small_net_logdet() {
    let mut rng = substream(11, "flow-test", 5);
    let net = FlowNetwork::vector(4, 3, 16, DEFAULT_CLAMP, &mut rng);
    let x = randn(20, 4, &mut rng);
    let (z, ld) = net.forward(x.view()).unwrap();
    // fresh couplings are the identity; the soft permutations are rotations
    for (a, b) in x.rows().into_iter().zip(z.rows()) {
        assert!((norm(a) - norm(b)).abs() < 1e-12);
    }
    assert!(ld.iter().all(|&v| v.abs() < 1e-12));

    let mut net = net;
    for c in net.couplings_mut() {
        c.randomize(0.4, &mut rng);
    }
    net.init_scaling((randn(128, 4, &mut rng) * 2.0).view()).unwrap();
    for _ in 0..3 {
        let x = Array1::from_shape_simple_fn(4, || standard_normal(&mut rng));
        let ld = net.forward(x.view().insert_axis(Axis(0))).unwrap().1[0];
        let brute = fd_network_logdet(&net, &x, 1e-6);
        assert!((ld - brute).abs() / brute.abs().max(1e-12) < 1e-4);
    }
    let x = randn(1000, 4, &mut rng);
    let (z, _) = net.forward(x.view()).unwrap();
    assert!(max_abs_diff(&net.inverse(z.view()).unwrap(), &x) < 1e-5);
}

#[test]
fn scaling_offset_leaves_log_det_unchanged() {
    let c = array![2.0, 0.5, 3.0];
    let plain = FixedScaling::new(c.clone()).unwrap();
    let shifted = FixedScaling::with_offset(c, array![1.0, -2.0, 0.25]).unwrap();
    assert_eq!(plain.log_det(), shifted.log_det());
    assert!((plain.log_det() - 3f64.ln()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn network_round_trip(seed in 0u64..1000, dim in 2usize..7, blocks in 1usize..6, scale in 0.0f64..0.3) {
        let mut rng = substream(seed, "prop-flow", 0);
        let mut net = FlowNetwork::vector(dim, blocks, 16, DEFAULT_CLAMP, &mut rng);
        for c in net.couplings_mut() {
            c.randomize(scale, &mut rng);
        }
        net.init_scaling(randn(64, dim, &mut rng).view()).unwrap();
        let x = randn(32, dim, &mut rng);
        let (z, ld) = net.forward(x.view()).unwrap();
        prop_assert!(max_abs_diff(&net.inverse(z.view()).unwrap(), &x) < 1e-8);
        prop_assert!(ld.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn coupling_log_det_within_clamp(seed in 0u64..1000, scale in 0.0f64..3.0) {
        let mut rng = substream(seed, "prop-flow", 1);
        let mut block = AffineCoupling::identity(6, 3, 8, DEFAULT_CLAMP, &mut rng);
        block.randomize(scale, &mut rng);
        let (_, ld) = block.forward((randn(16, 6, &mut rng) * 5.0).view()).unwrap();
        // |s| <= clamp per transformed coordinate
        prop_assert!(ld.iter().all(|v| v.abs() <= 3.0 * DEFAULT_CLAMP + 1e-12));
    }

    #[test]
    fn permutation_preserves_norm(seed in 0u64..1000, channels in 1usize..9, spatial in 1usize..5) {
        let mut rng = substream(seed, "prop-flow", 2);
        let p = SoftPermutation::random(channels, spatial, &mut rng);
        let u = randn(8, channels * spatial, &mut rng);
        let v = p.apply(u.view(), Direction::Forward).unwrap();
        for (a, b) in u.rows().into_iter().zip(v.rows()) {
            prop_assert!((norm(a) - norm(b)).abs() < 1e-10);
        }
    }
}
