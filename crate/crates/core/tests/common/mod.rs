#![allow(dead_code)]

use maskctc::model::{Dropout, ModelConfig};
use maskctc::numerics::{Graph, Rng, Tensor, Var};
use maskctc::training::{utterance_gradients, utterance_loss, LossWeights};
use maskctc::{Model, ModelType, Result, Vocab};

pub const STEP: f64 = 1e-3;

/// Relative error between the analytic directional derivative `grad · v`
/// and the central difference of `f` along a random unit direction `v`.
pub fn directional_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], rng: &mut Rng) -> f64 {
    let mut v: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= norm);
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
    let numeric = (f(&shifted(STEP)) - f(&shifted(-STEP))) / (2.0 * STEP);
    let analytic: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12)
}

/// Value and gradient of a scalar graph function of one input tensor.
pub fn value_and_grad(
    build: &dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
    shape: &[usize],
    x: &[f64],
) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.input(shape.to_vec(), x.to_vec(), true).unwrap();
    let loss = build(&mut g, v).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
    (g.scalar(loss), grad)
}

pub fn value(build: &dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>, shape: &[usize], x: &[f64]) -> f64 {
    let mut g = Graph::no_grad();
    let v = g.input(shape.to_vec(), x.to_vec(), false).unwrap();
    let loss = build(&mut g, v).unwrap();
    g.scalar(loss)
}

/// Worst directional error of `build` over `trials` random inputs.
pub fn check_op(
    build: &dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
    shape: &[usize],
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let (_, grad) = value_and_grad(build, shape, &x);
        let f = |y: &[f64]| value(build, shape, y);
        worst = worst.max(directional_error(&f, &x, &grad, &mut rng));
    }
    worst
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        downsample_factor: 2,
        dropout_rate: 0.0,
        feat_dim: 3,
    }
}

/// A 2-layer model with every parameter random, heads included.
pub fn toy_model(kind: ModelType, seed: u64) -> Model<f64> {
    let mut m = Model::new(toy_config(), Vocab::synthetic(4), kind, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::stream(seed, 77);
    for (name, t) in m.params.iter_mut() {
        if name.starts_with("ctc.") || name.starts_with("dec.out") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|x| *x = rng.normal() * 0.5);
        }
    }
    m
}

fn flatten(m: &Model<f64>) -> Vec<f64> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

fn with_flat(m: &Model<f64>, flat: &[f64]) -> Model<f64> {
    let mut out = m.clone();
    let mut at = 0;
    for (_, t) in out.params.iter_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    out
}

/// Worst directional error of the model's own training loss with respect
/// to all parameters, over `trials` random utterances.
pub fn check_model_loss(kind: ModelType, trials: usize, seed: u64) -> f64 {
    let weights = LossWeights {
        lambda_ar: 0.3,
        gamma_nar: 0.3,
        label_smoothing: 0.1,
    };
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < trials {
        let model = toy_model(kind, rng.uniform_int(0, 1 << 30) as u64);
        let len = rng.uniform_int(1, 4);
        let transcript: Vec<usize> = (0..len).map(|_| rng.uniform_int(1, 4)).collect();
        let frames = rng.uniform_int(4 * len + 4, 4 * len + 12);
        let x = Tensor::from_fn([frames, 3], |_| rng.normal());
        let stream = (seed, done as u64);
        let Some((_, grads)) = utterance_gradients(&model, &x, &transcript, weights, stream, false).unwrap() else {
            continue;
        };
        let grad: Vec<f64> = grads.concat();
        let f = |flat: &[f64]| {
            let m = with_flat(&model, flat);
            let mut g = Graph::no_grad();
            let b = m.bind(&mut g);
            let mut mask_rng = Rng::stream(stream.0, stream.1);
            let loss = utterance_loss(&mut g, &m, &b, &x, &transcript, weights, &mut mask_rng, &mut Dropout::off())
                .unwrap()
                .unwrap();
            g.scalar(loss)
        };
        worst = worst.max(directional_error(&f, &flatten(&model), &grad, &mut rng));
        done += 1;
    }
    worst
}
