//! Finite-difference gradient oracle shared by the test targets.

use rand::Rng as _;
use resq_core::autodiff::Tape;
use resq_core::model::{build_cnn, build_mlp, Model};
use resq_core::rng::rng_from;
use resq_core::Tensor;

/// Central-difference step; roundoff in the loss is about 1e-16 / H.
pub const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely, below the
/// difference quotient's roundoff.
const FLOOR: f64 = 1e-5;

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn soft_targets(batch: usize, classes: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(batch * classes);
    for _ in 0..batch {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / total));
    }
    Tensor::new(vec![batch, classes], data).unwrap()
}

struct Analytic {
    loss: f64,
    layers: Vec<(String, Vec<f64>)>,
    input: Vec<f64>,
}

fn analytic(model: &Model, x: &Tensor, targets: &Tensor) -> Analytic {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_bound(&mut tape, &bound, xv).unwrap();
    let loss = tape.cross_entropy(logits, targets).unwrap();
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    Analytic {
        loss: value,
        layers: model.layer_grads(&bound, &grads),
        input: grads.get_or_zeros(xv, x.len()),
    }
}

fn loss_of(model: &Model, x: &Tensor, targets: &Tensor) -> f64 {
    analytic(model, x, targets).loss
}

/// Central difference of `f` at 0 with step `H`, accepted once it agrees
/// with the estimate at a tenth of the step. Disagreement means a ReLU kink
/// lies within the step, so the step shrinks until the kink is outside it.
pub fn numeric_derivative(f: impl Fn(f64) -> f64) -> f64 {
    let central = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut h = H;
    let mut d = central(h);
    while h > 1e-9 {
        let finer = central(h / 10.0);
        if (d - finer).abs() <= 1e-6 * d.abs().max(1e-3) {
            return d;
        }
        h /= 10.0;
        d = finer;
    }
    d
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error over every parameter and input coordinate.
pub fn max_gradient_error(model: &Model, x: &Tensor, targets: &Tensor) -> f64 {
    let a = analytic(model, x, targets);
    let mut worst: f64 = 0.0;
    for (name, grad) in &a.layers {
        let base = model.layer(name).unwrap().flat_params();
        for (j, &g) in grad.iter().enumerate() {
            let probe = |delta: f64| {
                let mut m = model.clone();
                let mut p = base.clone();
                p[j] += delta;
                m.layer_mut(name).unwrap().set_flat_params(&p).unwrap();
                loss_of(&m, x, targets)
            };
            let numeric = numeric_derivative(probe);
            worst = worst.max(rel_err(g, numeric));
        }
    }
    for (j, &g) in a.input.iter().enumerate() {
        let probe = |delta: f64| {
            let mut xs = x.clone();
            xs.data_mut()[j] += delta;
            loss_of(model, &xs, targets)
        };
        let numeric = numeric_derivative(probe);
        worst = worst.max(rel_err(g, numeric));
    }
    worst
}

/// Random biases keep pre-activations off the ReLU kink, where the
/// difference quotient has no derivative to approximate.
fn randomize_biases(model: &mut Model, seed: u64) {
    let mut rng = rng_from(seed);
    for name in model.param_layer_names() {
        let layer = model.layer_mut(&name).unwrap();
        let mut p = layer.flat_params();
        let wlen = p.len() - layer.bias.as_ref().unwrap().tensor.len();
        for b in &mut p[wlen..] {
            *b = rng.random_range(-0.5..0.5);
        }
        layer.set_flat_params(&p).unwrap();
    }
}

pub fn random_case(seed: u64) -> (Model, Tensor, Tensor) {
    let (mut model, x, t) = if seed.is_multiple_of(2) {
        let model = build_mlp(16, &[6, 5], 3, seed).unwrap();
        (
            model,
            random_tensor(vec![3, 1, 4, 4], 0.0, 1.0, seed ^ 0xA5),
            soft_targets(3, 3, seed),
        )
    } else {
        let model = build_cnn(1, 8, 3, seed).unwrap();
        (
            model,
            random_tensor(vec![2, 1, 8, 8], 0.0, 1.0, seed ^ 0xA5),
            soft_targets(2, 3, seed),
        )
    };
    randomize_biases(&mut model, seed ^ 0x5A);
    (model, x, t)
}
