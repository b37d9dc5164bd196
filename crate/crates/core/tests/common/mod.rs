//! Shared helpers for the integration tests: an independent f64 reference
//! of every network operation, finite-difference gradient checks and small
//! in-memory datasets.
#![allow(dead_code)]

pub mod reference;

use forensic_transfer::autodiff::{Graph, Var};
use forensic_transfer::data::SampleSet;
use forensic_transfer::losses::{loss_act, loss_rec, loss_total, LossConfig};
use forensic_transfer::model::{activations, init_model, select, ArchConfig, ClassLabel, ModelParams};
use forensic_transfer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reference::Arr;

/// Central-difference step used on the f64 reference.
pub const FD_STEP: f64 = 1e-6;
/// Below this magnitude an entry is compared absolutely.
pub const TINY: f64 = 1e-6;
pub const TINY_ABS_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_tiny_abs: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol && self.max_tiny_abs < TINY_ABS_TOL
    }
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut max_rel: f64 = 0.0;
    let mut max_tiny_abs: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale < TINY {
            max_tiny_abs = max_tiny_abs.max((a - n).abs());
        } else {
            max_rel = max_rel.max((a - n).abs() / scale);
        }
    }
    GradCheck {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel,
        max_tiny_abs,
    }
}

/// Central differences of `f` with respect to `x[i]` for each `i` in `idx`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut x = x.to_vec();
    idx.iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Like `random_tensor` but keeps every value at least `gap` away from 0,
/// so kinks at the origin are never straddled.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn arr(t: &Tensor) -> Arr {
    Arr::new(t.shape().to_vec(), to_f64(t))
}

/// Checks one operation: the graph computes `sum(r * op(inputs))` in f32
/// with reverse mode, the reference computes the same in f64 and is
/// differentiated numerically.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    graph_op: impl Fn(&mut Graph, &[Var]) -> Var,
    ref_op: impl Fn(&[Arr]) -> Arr,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = graph_op(&mut g, &vars);
    let r = random_tensor(rng, g.value(y).shape(), -1.0, 1.0);
    let rv = g.constant(r.clone());
    let weighted = g.mul(y, rv).unwrap();
    let loss = g.sum(weighted);
    g.backward(loss).unwrap();

    let r64 = to_f64(&r);
    let base: Vec<Arr> = inputs.iter().map(arr).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        analytic.extend(to_f64(g.grad(vars[k]).expect("gradient present")));
        let idx: Vec<usize> = (0..input.numel()).collect();
        let f = |x: &[f64]| {
            let mut args = base.clone();
            args[k] = Arr::new(input.shape().to_vec(), x.to_vec());
            let out = ref_op(&args);
            out.data.iter().zip(&r64).map(|(a, b)| a * b).sum::<f64>()
        };
        numeric.extend(central_diff(f, &base[k].data, &idx));
    }
    compare(name, &analytic, &numeric)
}

/// Gradient checks of every differentiable graph operation.
pub fn op_gradient_checks() -> Vec<GradCheck> {
    use reference as r;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut out = Vec::new();
    for stride in [1usize, 2] {
        let x = random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
        out.push(check_op(
            &format!("conv2d stride {stride}"),
            &[x, w, b],
            |g, v| g.conv2d(v[0], v[1], v[2], stride).unwrap(),
            |a| r::conv2d(&a[0], &a[1], &a[2], stride),
            &mut rng,
        ));
    }
    let x = random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    out.push(check_op("upsample2x", &[x], |g, v| g.upsample2x(v[0]).unwrap(), |a| r::upsample2x(&a[0]), &mut rng));
    let x = random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
    out.push(check_op(
        "upsample_conv2d",
        &[x, w, b],
        |g, v| g.upsample_conv2d(v[0], v[1], v[2]).unwrap(),
        |a| r::conv2d(&r::upsample2x(&a[0]), &a[1], &a[2], 1),
        &mut rng,
    ));

    let x = random_away_from_zero(&mut rng, &[2, 3, 4], 0.05);
    out.push(check_op("relu", &[x.clone()], |g, v| g.relu(v[0]), |a| a[0].map(|v| v.max(0.0)), &mut rng));
    out.push(check_op("tanh", &[x.clone()], |g, v| g.tanh(v[0]), |a| a[0].map(f64::tanh), &mut rng));
    out.push(check_op("abs", &[x.clone()], |g, v| g.abs(v[0]), |a| a[0].map(f64::abs), &mut rng));
    out.push(check_op("scale", &[x.clone()], |g, v| g.scale(v[0], -1.7), |a| a[0].map(|v| -1.7f32 as f64 * v), &mut rng));
    out.push(check_op("sum", &[x.clone()], |g, v| g.sum(v[0]), |a| Arr::scalar(a[0].data.iter().sum()), &mut rng));
    out.push(check_op("mean", &[x.clone()], |g, v| g.mean(v[0]), |a| Arr::scalar(a[0].mean()), &mut rng));
    out.push(check_op("l1_mean", &[x.clone()], |g, v| g.l1_mean(v[0]), |a| Arr::scalar(a[0].map(f64::abs).mean()), &mut rng));

    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let pair = [a, b];
    out.push(check_op("add", &pair, |g, v| g.add(v[0], v[1]).unwrap(), |a| a[0].zip(&a[1], |x, y| x + y), &mut rng));
    out.push(check_op("sub", &pair, |g, v| g.sub(v[0], v[1]).unwrap(), |a| a[0].zip(&a[1], |x, y| x - y), &mut rng));
    out.push(check_op("mul", &pair, |g, v| g.mul(v[0], v[1]).unwrap(), |a| a[0].zip(&a[1], |x, y| x * y), &mut rng));

    let x = random_away_from_zero(&mut rng, &[2, 4, 3, 3], 0.05);
    out.push(check_op(
        "channel_mean_abs",
        &[x.clone()],
        |g, v| g.channel_mean_abs(v[0], 1, 2).unwrap(),
        |a| r::channel_mean_abs(&a[0], 1, 2),
        &mut rng,
    ));
    out.push(check_op(
        "mask_channels",
        &[x],
        |g, v| g.mask_channels(v[0], vec![(0, 2), (2, 2)]).unwrap(),
        |a| r::mask_channels(&a[0], &[(0, 2), (2, 2)]),
        &mut rng,
    ));

    let a = random_tensor(&mut rng, &[3], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[3], -2.0, 2.0);
    out.push(check_op(
        "pair_cross_entropy",
        &[a, b],
        |g, v| g.pair_cross_entropy(v[0], v[1], vec![0, 1, 1]).unwrap(),
        |a| r::pair_cross_entropy(&a[0], &a[1], &[0, 1, 1]),
        &mut rng,
    ));
    out
}

/// `gamma * L_rec + L_act` on the graph, returning the loss, the input
/// variable and every parameter variable in declaration order.
fn graph_full_loss(
    g: &mut Graph,
    model: &ModelParams,
    x: &Tensor,
    labels: &[ClassLabel],
    cfg: &LossConfig,
) -> (Var, Var, Vec<Var>) {
    let bound = model.bind(g, true);
    let params: Vec<Var> = (0..model.layers.len() * 2).map(|i| bound.param_var(i)).collect();
    let xv = g.param(x.clone());
    let latent = bound.encode(g, xv).unwrap();
    let (a0, a1) = activations(g, latent).unwrap();
    let act = loss_act(g, a0, a1, labels).unwrap();
    let z = select(g, latent, labels).unwrap();
    let x_hat = bound.decode(g, z).unwrap();
    let rec = loss_rec(g, xv, x_hat).unwrap();
    let loss = loss_total(g, Some(rec), act, cfg).unwrap();
    (loss, xv, params)
}

/// Full-objective gradient check on a random two-sample batch, sampling
/// `per_tensor` entries of the input and of every parameter tensor.
pub fn full_loss_gradient_check(arch: &ArchConfig, per_tensor: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_model(arch).unwrap();
    for layer in &mut model.layers {
        layer.bias.value = random_tensor(&mut rng, layer.bias.value.shape(), -0.05, 0.05);
    }
    let s = arch.input_size;
    let x = random_tensor(&mut rng, &[2, arch.input_channels, s, s], -1.0, 1.0);
    let labels = [ClassLabel::Real, ClassLabel::Fake];
    let cfg = LossConfig::default();

    let mut g = Graph::new();
    let (loss, xv, params) = graph_full_loss(&mut g, &model, &x, &labels, &cfg);
    g.backward(loss).unwrap();

    let ref_model = reference::RefModel::from_params(&model);
    let x64 = arr(&x);
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let gamma = cfg.gamma as f64;

    let mut tensors: Vec<(String, Var, Tensor)> = vec![("input".into(), xv, x.clone())];
    for (i, layer) in model.layers.iter().enumerate() {
        tensors.push((format!("{}.w", layer.name), params[2 * i], layer.weight.value.clone()));
        tensors.push((format!("{}.b", layer.name), params[2 * i + 1], layer.bias.value.clone()));
    }

    let mut out = Vec::new();
    for (k, (name, var, value)) in tensors.iter().enumerate() {
        let n = value.numel();
        let mut idx: Vec<usize> = (0..per_tensor.min(n)).map(|_| rng.random_range(0..n)).collect();
        idx.sort_unstable();
        idx.dedup();
        let grad = g.grad(*var).expect("gradient present");
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i] as f64).collect();
        let f = |v: &[f64]| {
            let mut m = ref_model.clone();
            let mut input = x64.clone();
            if k == 0 {
                input.data = v.to_vec();
            } else {
                m.set_tensor(k - 1, v.to_vec());
            }
            m.loss(&input, &targets, gamma)
        };
        let numeric = central_diff(f, &to_f64(value), &idx);
        out.push(compare(name, &analytic, &numeric));
    }
    out
}

/// Reals are white noise in `[0, 1]`; fakes are the same kind of noise with
/// every other column duplicated, a purely high-frequency difference.
pub fn toy_images(n_per_class: usize, size: usize, seed: u64) -> (Tensor, Vec<ClassLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * size * size;
    let mut data = Vec::with_capacity(2 * n_per_class * per);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let fake = i % 2 == 1;
        let base: f32 = rng.random_range(0.3..0.7);
        let img: Vec<f32> = (0..per).map(|_| base + rng.random_range(-0.2..0.2f32)).collect();
        for k in 0..per {
            let x = k % size;
            data.push(if fake && x % 2 == 1 { img[k - 1] } else { img[k] });
        }
        labels.push(if fake { ClassLabel::Fake } else { ClassLabel::Real });
    }
    (Tensor::new(vec![labels.len(), 3, size, size], data).unwrap(), labels)
}

/// Preprocessed toy samples.
pub fn toy_set(n_per_class: usize, size: usize, seed: u64) -> SampleSet {
    let (images, labels) = toy_images(n_per_class, size, seed);
    let inputs = forensic_transfer::residual::residual_batch(&images, &Default::default()).unwrap();
    let n = labels.len();
    SampleSet {
        inputs,
        labels,
        ids: (0..n).map(|i| format!("toy/{seed}/{i:04}")).collect(),
        domains: vec!["toy".into(); n],
    }
}

pub fn toy_arch(size: usize) -> ArchConfig {
    ArchConfig {
        input_size: size,
        encoder_channels: vec![8, 16, 16, 16, 16],
        latent_maps: 16,
        ..ArchConfig::default()
    }
}
