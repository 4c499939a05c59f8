mod common;

use common::*;
use ibinn_core::data::{make_inlier, Generator};
use ibinn_core::grad::{backward, compare_gradients, grad_check};
use ibinn_core::model::IbInn;
use ibinn_core::objective::{add_noise, LossConfig, Objective};
use ibinn_core::rng::substream;
use ibinn_core::train::{init_model, TrainConfig};
use ndarray::{s, Array2};

fn fresh_model_and_batch() -> (IbInn, Array2<f64>, Vec<usize>) {
    let spec = small_spec(Generator::Moons, 3, 256, 16);
    let split = make_inlier(&spec).unwrap();
    let cfg = TrainConfig { hidden: 16, blocks: 4, ..TrainConfig::default() };
    let mut model = init_model(&cfg, 2, 3).unwrap();
    let x = add_noise(split.train.x.slice(s![..32, ..]), 1e-3, &mut substream(0, "grad-test", 0)).unwrap();
    model.flow.init_scaling(x.view()).unwrap();
    (model, x, split.train.labels[..32].to_vec())
}

#[test]
fn identity_initialized_model_passes() {
    let (model, x, labels) = fresh_model_and_batch();
    for objective in [Objective::ib(1.0).unwrap(), Objective::ib(0.0).unwrap(), Objective::OnlyLy, Objective::ClassNll] {
        let cfg = LossConfig::new(objective, 0.05).unwrap();
        let report = grad_check(&model, x.view(), &labels, &cfg, 40, 1e-5, 1e-4, &mut substream(1, "grad-test", 0)).unwrap();
        assert!(report.passed, "{}: max rel {}", objective.label(), report.max_rel_error);
        assert!(report.coordinates.len() >= 30);
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let (model, x, labels) = fresh_model_and_batch();
    let cfg = LossConfig::new(Objective::ib(1.0).unwrap(), 0.05).unwrap();
    let (_, mut grads) = backward(&model, x.view(), &labels, &cfg).unwrap();
    grads.scale(1.01);
    let report =
        compare_gradients(&model, &grads, x.view(), &labels, &cfg, 40, 1e-5, 1e-4, &mut substream(1, "grad-test", 1))
            .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 5e-3);
}

#[test]
fn backward_is_bit_deterministic() {
    let (model, x, labels) = fresh_model_and_batch();
    let cfg = LossConfig::new(Objective::ib(1.0).unwrap(), 0.05).unwrap();
    let (a, ga) = backward(&model, x.view(), &labels, &cfg).unwrap();
    let (b, gb) = backward(&model, x.view(), &labels, &cfg).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    for (p, q) in ga.blocks().iter().zip(gb.blocks()) {
        assert!(p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

/// Error against step size; truncation dominates at large h and rounding at
/// small h. Printed for inspection only.
#[test]
fn step_size_sweep_is_reported() {
    let (model, x, labels) = fresh_model_and_batch();
    let cfg = LossConfig::new(Objective::ib(1.0).unwrap(), 0.05).unwrap();
    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let r = grad_check(&model, x.view(), &labels, &cfg, 30, h, 1e-4, &mut substream(2, "grad-test", 0)).unwrap();
        println!("h = {h:e}: max rel. error {:.3e}", r.max_rel_error);
        assert!(r.max_rel_error.is_finite());
    }
}
