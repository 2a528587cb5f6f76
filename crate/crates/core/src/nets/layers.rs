use pam_tensor::{he_uniform, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use super::NORM_EPS;
use crate::error::Result;

/// 3x3 convolution, instance norm, LeakyReLU. The convolution has no bias:
/// the norm's mean subtraction would cancel it.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
}

impl ConvNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), he_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng)),
            gamma: store.add(format!("{name}.gamma"), Tensor::full([c_out], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([c_out])),
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, slope: T) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], None, self.stride)?;
        let y = g.instance_norm(y, p[self.gamma], p[self.beta], T::from_f64_lossy(NORM_EPS))?;
        Ok(g.leaky_relu(y, slope)?)
    }
}

/// Two [`ConvNorm`] layers; the first may downsample.
#[derive(Clone, Debug)]
pub struct Stage {
    pub first: ConvNorm,
    pub second: ConvNorm,
}

impl Stage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: ConvNorm::new(store, &format!("{name}.conv1"), c_in, c_out, stride, rng),
            second: ConvNorm::new(store, &format!("{name}.conv2"), c_out, c_out, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, slope: T) -> Result<Var> {
        let y = self.first.forward(g, p, x, slope)?;
        self.second.forward(g, p, y, slope)
    }
}

/// Encoder whose stage `s > 0` enters with a stride-2 convolution, so level
/// `s` sits at `R / 2^s`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut c_in = in_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let stage = Stage::new(store, &format!("{name}.s{s}"), c_in, c, if s == 0 { 1 } else { 2 }, rng);
                c_in = c;
                stage
            })
            .collect();
        Self { stages }
    }

    /// Feature maps of every level, finest first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, slope: T) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(g, p, cur, slope)?;
            levels.push(cur);
        }
        Ok(levels)
    }
}

/// Transposed-conv upsampling, concatenation with a skip map, then a [`Stage`].
#[derive(Clone, Debug)]
pub struct UpStage {
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub block: Stage,
}

impl UpStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_skip: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up_weight: store.add(format!("{name}.up.w"), he_uniform(&[c_in, c_out, 2, 2], c_in, rng)),
            up_bias: store.add(format!("{name}.up.b"), Tensor::zeros([c_out])),
            block: Stage::new(store, name, c_out + c_skip, c_out, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, skip: Var, slope: T) -> Result<Var> {
        let up = g.conv_transpose2d(x, p[self.up_weight], Some(p[self.up_bias]))?;
        let cat = g.concat_channels(&[up, skip])?;
        self.block.forward(g, p, cat, slope)
    }
}

/// 1x1 convolution to a single channel followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c_in: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), he_uniform(&[1, c_in, 1, 1], c_in, rng)),
            bias: store.add(format!("{name}.b"), Tensor::zeros([1])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = g.conv2d(x, p[self.weight], Some(p[self.bias]), 1)?;
        Ok(g.sigmoid(logits)?)
    }
}

/// Single-head cross-attention between feature maps of one level.
///
/// `q` is `[B, C, H, W]`; `k` and `v` are `[1, C, H, W]` and shared by every
/// query map, so the whole batch is one `[B*HW, HW]` logit matrix.
pub fn cross_attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(q).dims4("cross_attend")?;
    let qt = g.flatten_tokens(q)?;
    let kt = g.flatten_tokens(k)?;
    let vt = g.flatten_tokens(v)?;
    let logits = g.matmul_nt(qt, kt)?;
    let logits = g.scale(logits, T::from_f64_lossy(1.0 / (c as f64).sqrt()))?;
    let attn = g.softmax_rows(logits)?;
    let out = g.matmul(attn, vt)?;
    Ok(g.unflatten_tokens(out, b, h, w)?)
}
