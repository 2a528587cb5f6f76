//! Central finite-difference gradient checking in `f64`.
//!
//! The numeric side only ever evaluates the forward pass, so it is independent
//! of every backward kernel it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

/// Builds a scalar loss from the bound inputs.
pub trait LossFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> LossFn for F {}

fn eval(inputs: &[Tensor<f64>], f: &impl LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic(inputs: &[Tensor<f64>], f: &impl LossFn) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every input element.
pub fn numeric(inputs: &[Tensor<f64>], f: &impl LossFn, step: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, f)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, f)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max|a - n| / max(max|a|, max|n|)` for one gradient tensor; 0 when both vanish.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.data().iter().zip(numeric.data()).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error across all inputs of `f`.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &impl LossFn, step: f64) -> Result<f64> {
    let a = analytic(inputs, f)?;
    let n = numeric(inputs, f, step)?;
    Ok(a.iter().zip(&n).map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

pub type CaseLoss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable op under test: random inputs plus a scalar loss built on them.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: CaseLoss,
}

impl GradCase {
    pub fn max_relative_error(&self, step: f64) -> Result<f64> {
        max_relative_error(&self.inputs, &self.loss, step)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values bounded away from zero so kinks never sit inside the FD stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

/// `sum(out * r)` for a fixed random projection `r`, so every output element matters.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.input(r.clone());
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

macro_rules! case {
    ($name:expr, $inputs:expr, $rng:expr, $out_shape:expr, |$g:ident, $v:ident| $body:expr) => {{
        let inputs: Vec<Tensor<f64>> = $inputs;
        let r = rand_t($rng, &$out_shape);
        GradCase {
            name: $name,
            inputs,
            loss: Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| {
                let out = $body?;
                project($g, out, &r)
            }),
        }
    }};
}

/// Every differentiable op on small random shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let h = rng.random_range(3..=5);
    let w = rng.random_range(3..=5);
    let (h2, w2) = (h + h % 2, w + w % 2);
    let mut cases = Vec::new();

    let ho = (h - 1) / 2 + 1;
    let wo = (w - 1) / 2 + 1;
    cases.push(case!("conv2d_k3_s1", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[o, c, 3, 3]), rand_t(rng, &[o])], rng, [n, o, h, w], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)));
    cases.push(case!("conv2d_k3_s2", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[o, c, 3, 3]), rand_t(rng, &[o])], rng, [n, o, ho, wo], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2)));
    cases.push(case!("conv2d_k1", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[o, c, 1, 1]), rand_t(rng, &[o])], rng, [n, o, h, w], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)));
    cases.push(case!("conv2d_k2_s2", vec![rand_t(rng, &[n, c, h2, w2]), rand_t(rng, &[o, c, 2, 2])], rng, [n, o, h2 / 2, w2 / 2], |g, v| g.conv2d(v[0], v[1], None, 2)));
    cases.push(case!("conv_transpose2d", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[c, o, 2, 2]), rand_t(rng, &[o])], rng, [n, o, 2 * h, 2 * w], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]))));
    cases.push(case!("instance_norm", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[c]), rand_t(rng, &[c])], rng, [n, c, h, w], |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)));
    cases.push(case!("leaky_relu", vec![rand_away_from_zero(rng, &[n, c, h, w])], rng, [n, c, h, w], |g, v| g.leaky_relu(v[0], 0.01)));
    cases.push(case!("sigmoid", vec![Tensor::uniform(vec![n, c, h, w], -4.0, 4.0, rng)], rng, [n, c, h, w], |g, v| g.sigmoid(v[0])));
    cases.push(case!("add", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[n, c, h, w])], rng, [n, c, h, w], |g, v| g.add(v[0], v[1])));
    cases.push(case!("mul", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[n, c, h, w])], rng, [n, c, h, w], |g, v| g.mul(v[0], v[1])));
    cases.push(case!("scale", vec![rand_t(rng, &[n, c, h, w])], rng, [n, c, h, w], |g, v| g.scale(v[0], -0.7)));
    cases.push(case!("concat_channels", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[n, o, h, w])], rng, [n, c + o, h, w], |g, v| g.concat_channels(&[v[0], v[1]])));
    cases.push(case!("concat_narrow_batch", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[2, c, h, w])], rng, [2, c, h, w], |g, v| {
        let cat = g.concat_batch(&[v[0], v[1]])?;
        g.narrow_batch(cat, n - 1, 2)
    }));
    cases.push(case!("flatten_unflatten", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[n * h * w, c])], rng, [n, c, h, w], |g, v| {
        let tokens = g.flatten_tokens(v[0])?;
        let mixed = g.mul(tokens, v[1])?;
        g.unflatten_tokens(mixed, n, h, w)
    }));
    cases.push(case!("matmul", vec![rand_t(rng, &[h, c]), rand_t(rng, &[c, w])], rng, [h, w], |g, v| g.matmul(v[0], v[1])));
    cases.push(case!("matmul_nt", vec![rand_t(rng, &[h, c]), rand_t(rng, &[w, c])], rng, [h, w], |g, v| g.matmul_nt(v[0], v[1])));
    cases.push(case!("softmax_rows", vec![Tensor::uniform(vec![h, w], -3.0, 3.0, rng)], rng, [h, w], |g, v| g.softmax_rows(v[0])));
    cases.push(case!("resize_bilinear_up", vec![rand_t(rng, &[n, c, h, w])], rng, [n, c, 2 * h + 1, w + 2], |g, v| g.resize_bilinear(v[0], 2 * h + 1, w + 2)));
    cases.push(case!("resize_bilinear_down", vec![rand_t(rng, &[n, c, 2 * h, 2 * w])], rng, [n, c, h, w - 1], |g, v| g.resize_bilinear(v[0], h, w - 1)));
    cases.push(case!("resize_nearest", vec![rand_t(rng, &[n, c, h, w])], rng, [n, c, 2 * h, w + 1], |g, v| g.resize_nearest(v[0], 2 * h, w + 1)));
    cases.push(case!("sum", vec![rand_t(rng, &[n, c, h, w])], rng, [0usize; 0], |g, v| {
        let s = g.sum(v[0])?;
        g.scale(s, 1.0)
    }));
    cases.push(case!("mean", vec![rand_t(rng, &[n, c, h, w])], rng, [0usize; 0], |g, v| g.mean(v[0])));
    cases.push(case!("soft_dice", vec![Tensor::uniform(vec![n, 1, h, w], 0.05, 0.95, rng), Tensor::uniform(vec![n, 1, h, w], 0.0, 1.0, rng)], rng, [0usize; 0], |g, v| g.soft_dice(v[0], v[1], 1e-6)));
    let tokens = rng.random_range(1..=4);
    cases.push(case!("attention_block", vec![rand_t(rng, &[1, c, tokens, 2]), rand_t(rng, &[n, c, tokens, 2]), rand_t(rng, &[1, c, tokens, 2])], rng, [n, c, tokens, 2], |g, v| {
        let k = g.flatten_tokens(v[0])?;
        let q = g.flatten_tokens(v[1])?;
        let val = g.flatten_tokens(v[2])?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
        let attn = g.softmax_rows(logits)?;
        let out = g.matmul(attn, val)?;
        g.unflatten_tokens(out, n, tokens, 2)
    }));
    cases.push(case!("reshape", vec![rand_t(rng, &[n, c, h, w]), rand_t(rng, &[c * h, n * w])], rng, [c * h, n * w], |g, v| {
        let flat = g.reshape(v[0], [c * h, n * w])?;
        g.mul(flat, v[1])
    }));
    cases.push(case!("pooled_soft_dice", vec![Tensor::uniform(vec![n + 1, 1, h, w], 0.05, 0.95, rng), Tensor::uniform(vec![n + 1, 1, h, w], 0.0, 1.0, rng)], rng, [0usize; 0], |g, v| {
        let p = g.reshape(v[0], [1, n + 1, h, w])?;
        let m = g.reshape(v[1], [1, n + 1, h, w])?;
        g.soft_dice(p, m, 1e-6)
    }));
    cases
}
