//! Independent oracles shared by the integration tests: brute-force
//! Jacobians, quadrature, and exact mixture convolutions. Nothing here calls
//! into the code under test except to build inputs.

#![allow(dead_code)]

use std::f64::consts::PI;

use ibinn_core::data::{make_inlier, DatasetSpec, Generator, Split};
use ibinn_core::flow::FlowNetwork;
use ibinn_core::rng::{standard_normal, StreamRng};
use ibinn_core::train::TrainConfig;
use ndarray::{Array1, Array2};

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&Array1<f64>) -> Array1<f64>, x: &Array1<f64>, h: f64) -> Array2<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = Array2::zeros((m, n));
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.column_mut(j).assign(&col);
    }
    jac
}

/// `log|det A|` by LU decomposition with partial pivoting.
pub fn lu_log_abs_det(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs())).unwrap();
        if p != k {
            for c in 0..n {
                a.swap([k, c], [p, c]);
            }
        }
        let pivot = a[[k, k]];
        assert!(pivot != 0.0, "singular Jacobian");
        acc += pivot.abs().ln();
        for i in k + 1..n {
            let factor = a[[i, k]] / pivot;
            for c in k..n {
                a[[i, c]] -= factor * a[[k, c]];
            }
        }
    }
    acc
}

/// Brute-force `log|det J|` of a network at a single input.
pub fn fd_network_logdet(net: &FlowNetwork, x: &Array1<f64>, h: f64) -> f64 {
    let f = |v: &Array1<f64>| {
        let row = v.clone().insert_axis(ndarray::Axis(0));
        net.forward(row.view()).unwrap().0.row(0).to_owned()
    };
    lu_log_abs_det(fd_jacobian(f, x, h))
}

/// Composite Simpson nodes and weights on `[a, b]` with `n` (even) intervals.
pub fn simpson_rule(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n.is_multiple_of(2) && n > 0);
    let h = (b - a) / n as f64;
    let nodes = (0..=n).map(|i| a + h * i as f64).collect();
    let weights = (0..=n)
        .map(|i| {
            let c = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect();
    (nodes, weights)
}

pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = simpson_rule(a, b, n);
    x.iter().zip(&w).map(|(&xi, &wi)| wi * f(xi)).sum()
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let t = (x - mean) / std;
    (-0.5 * t * t).exp() / (std * (2.0 * PI).sqrt())
}

/// Density of `X + eps` for discrete `X` with `P(X = atoms[j]) = p[j]` and
/// `eps ~ N(0, sigma^2)`, by direct summation.
pub fn smoothed_density(p: &[f64], atoms: &[f64], sigma: f64, x: f64) -> f64 {
    p.iter().zip(atoms).map(|(&pj, &a)| pj * normal_pdf(x, a, sigma)).sum()
}

/// Quadrature grid for expectations under a smoothed discrete distribution:
/// one Simpson panel per atom, `+-halfwidth` around it. Panels must not
/// overlap; mass outside them is below `exp(-halfwidth^2 / 2 sigma^2)`.
pub fn atom_grid(atoms: &[f64], halfwidth: f64, per_atom: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for &a in atoms {
        let (x, w) = simpson_rule(a - halfwidth, a + halfwidth, per_atom);
        nodes.extend(x);
        weights.extend(w);
    }
    (nodes, weights)
}

/// `h(X + eps)` in nats by quadrature on `atom_grid`.
pub fn smoothed_entropy(p: &[f64], atoms: &[f64], sigma: f64, halfwidth: f64, per_atom: usize) -> f64 {
    let (x, w) = atom_grid(atoms, halfwidth, per_atom);
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| {
            let d = smoothed_density(p, atoms, sigma, xi);
            if d > 0.0 {
                -wi * d * d.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// `-E[log q]` under the smoothed distribution, given `-log q` at the
/// `atom_grid` nodes.
pub fn smoothed_cross_entropy(p: &[f64], atoms: &[f64], sigma: f64, nodes: &[f64], weights: &[f64], nll: &[f64]) -> f64 {
    nodes
        .iter()
        .zip(weights)
        .zip(nll)
        .map(|((&xi, &wi), &q)| wi * smoothed_density(p, atoms, sigma, xi) * q)
        .sum()
}

pub fn discrete_entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum()
}

/// Random distribution over `n` atoms with every entry at least `floor`.
pub fn random_distribution(n: usize, floor: f64, rng: &mut StreamRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| standard_normal(rng).exp()).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| floor + (1.0 - n as f64 * floor) * v / total).collect();
    let s: f64 = p.iter().sum();
    p.iter().map(|v| v / s).collect()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Training recipe used by every trained-model test: 20k/5k samples, lr
/// 0.002, 30 epochs with x0.1 decays at 12/21/27.
pub fn desk_config(generator: Generator, classes: usize, gamma: f64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.data.generator = generator;
    c.data.classes = classes;
    if generator == Generator::Gaussian {
        c.data.levels = None;
    }
    c.gamma = gamma;
    c.lr = 0.002;
    c.epochs = 30;
    c.milestones = vec![12, 21, 27];
    c
}

pub fn desk_data(config: &TrainConfig) -> Split {
    make_inlier(&config.data).expect("valid dataset spec")
}

pub fn small_spec(generator: Generator, classes: usize, train: usize, test: usize) -> DatasetSpec {
    DatasetSpec { generator, classes, train, test, ..DatasetSpec::default() }
}
