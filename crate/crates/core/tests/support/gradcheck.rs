//! Analytic gradients against central finite differences on random small networks.
#![allow(dead_code)]

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wfc_core::dependency::{critic_objective, shuffle_pairing};
use wfc_core::nn::{softmax_cross_entropy, Gradients};
use wfc_core::{Activation, LayerSelector, MlpParams, PairBatch};

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

/// Relative error with the denominator floored so exact zeros compare against
/// finite-difference roundoff (about 1e-10) sensibly.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn flat_grads(g: &Gradients) -> Vec<f64> {
    g.layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// A random network whose ReLU pre-activations stay clear of the kink on `x`.
fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize, act: Activation, x: &[&Array2<f64>]) -> MlpParams {
    loop {
        let depth = rng.random_range(0..=2);
        let mut dims = vec![input];
        dims.extend((0..depth).map(|_| rng.random_range(1..=6)));
        dims.push(output);
        let mut net = MlpParams::init(&dims, act, rng.random()).unwrap();
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        let safe = act == Activation::Tanh
            || x.iter().all(|b| {
                let t = net.forward(b.view()).unwrap();
                (0..net.num_layers() - 1).all(|k| t.pre_activation(k).iter().all(|v| v.abs() > 1e-3))
            });
        if safe {
            return net;
        }
    }
}

fn check_params(net: &MlpParams, analytic: &[f64], loss: impl Fn(&MlpParams) -> f64) -> f64 {
    let base = net.flat_values();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += H;
        minus[i] -= H;
        let fp = loss(&MlpParams::from_flat(net.layer_dims(), net.activation(), &plus).unwrap());
        let fm = loss(&MlpParams::from_flat(net.layer_dims(), net.activation(), &minus).unwrap());
        worst = worst.max(rel_err(g, (fp - fm) / (2.0 * H)));
    }
    worst
}

fn check_input(x: &Array2<f64>, analytic: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.raw_dim()) {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[idx] += H;
        minus[idx] -= H;
        worst = worst.max(rel_err(analytic[idx], (loss(&plus) - loss(&minus)) / (2.0 * H)));
    }
    worst
}

fn ce(net: &MlpParams, x: &Array2<f64>, labels: &[usize]) -> f64 {
    softmax_cross_entropy(net.forward(x.view()).unwrap().logits(), labels).unwrap().0
}

/// Worst relative error over parameter and input gradients of the
/// cross-entropy of one random classifier.
pub fn cross_entropy_case(rng: &mut ChaCha8Rng, act: Activation) -> f64 {
    let (n, d, c) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(2..=4));
    let x = random_matrix(n, d, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let net = random_net(rng, d, c, act, &[&x]);
    let trace = net.forward(x.view()).unwrap();
    let (_, seed) = softmax_cross_entropy(trace.logits(), &labels).unwrap();
    let g = net.backward(&trace, seed.view()).unwrap();
    let wp = check_params(&net, &flat_grads(&g), |p| ce(p, &x, &labels));
    let wi = check_input(&x, &g.input, |xx| ce(&net, xx, &labels));
    wp.max(wi)
}

/// Worst relative error of the critic objective's parameter and input
/// gradients for one random critic.
pub fn critic_case(rng: &mut ChaCha8Rng, act: Activation) -> f64 {
    let (n, dy, da) = (rng.random_range(2..=6), rng.random_range(1..=3), rng.random_range(1..=3));
    let dep = PairBatch::new(random_matrix(n, dy, rng), random_matrix(n, da, rng)).unwrap();
    let ind = shuffle_pairing(&dep, rng);
    let (xd, xi) = (dep.concatenated(), ind.concatenated());
    let critic = random_net(rng, dy + da, 1, act, &[&xd, &xi]);
    let eval = critic_objective(&critic, &dep, &ind).unwrap();
    let value = |c: &MlpParams, a: &Array2<f64>, b: &Array2<f64>| {
        c.forward(a.view()).unwrap().logits().mean().unwrap() - c.forward(b.view()).unwrap().logits().mean().unwrap()
    };
    assert!((eval.value - value(&critic, &xd, &xi)).abs() < 1e-12);
    let wp = check_params(&critic, &flat_grads(&eval.critic_grads), |c| value(c, &xd, &xi));
    let wd = check_input(&xd, &eval.dep_input_grad, |a| value(&critic, a, &xi));
    let wi = check_input(&xi, &eval.ind_input_grad, |b| value(&critic, &xd, b));
    wp.max(wd).max(wi)
}

/// Worst relative error of the classifier gradient of CE + beta * critic
/// estimate, with z_y taken from a hidden layer and a fixed pairing.
pub fn regularized_case(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d, c, da) = (rng.random_range(2..=5), rng.random_range(1..=4), 2, rng.random_range(1..=2));
    let hidden = rng.random_range(1..=4);
    let x = random_matrix(n, d, rng);
    let za = random_matrix(n, da, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.rotate_left(1);
    let net = MlpParams::init(&[d, hidden, c], Activation::Tanh, rng.random()).unwrap();
    let critic = MlpParams::init(&[hidden + da, 4, 1], Activation::Tanh, rng.random()).unwrap();
    let beta = rng.random_range(0.1..3.0);
    let layer = LayerSelector::LastHidden;

    let loss = |p: &MlpParams| {
        let t = p.forward(x.view()).unwrap();
        let zy = t.hidden_representation(layer).unwrap().to_owned();
        let dep = PairBatch::new(zy.clone(), za.clone()).unwrap();
        let shuffled = Array2::from_shape_fn(za.raw_dim(), |(i, j)| za[[perm[i], j]]);
        let ind = PairBatch::new(zy, shuffled).unwrap();
        let reg = critic_objective(&critic, &dep, &ind).unwrap().value;
        softmax_cross_entropy(t.logits(), &labels).unwrap().0 + beta * reg
    };

    let t = net.forward(x.view()).unwrap();
    let zy = t.hidden_representation(layer).unwrap().to_owned();
    let dep = PairBatch::new(zy.clone(), za.clone()).unwrap();
    let shuffled = Array2::from_shape_fn(za.raw_dim(), |(i, j)| za[[perm[i], j]]);
    let ind = PairBatch::new(zy, shuffled).unwrap();
    let eval = critic_objective(&critic, &dep, &ind).unwrap();
    let injected = eval.zy_grad(hidden) * beta;
    assert_eq!(injected.dim(), (n, hidden));
    assert_eq!(eval.dep_input_grad.slice(s![.., ..hidden]).dim(), (n, hidden));
    let (_, seed) = softmax_cross_entropy(t.logits(), &labels).unwrap();
    let g = net.backward_with(&t, Some(seed.view()), &[(layer, injected.view())]).unwrap();
    check_params(&net, &flat_grads(&g), loss)
}
