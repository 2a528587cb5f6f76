//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node `i` only
//! ever reads nodes `j < i`. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into every leaf that asked for them.

use crate::kernels::{self, ConvGeom};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    ConcatChannels { xs: Vec<Var> },
    ConcatBatch { xs: Vec<Var> },
    NarrowBatch { x: Var, start: usize },
    Reshape { x: Var },
    FlattenTokens { x: Var },
    UnflattenTokens { x: Var },
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    SoftmaxRows { x: Var },
    ResizeBilinear { x: Var },
    ResizeNearest { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SoftDice { pred: Var, target: Var, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, expected: impl Into<String>, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, expected: expected.into(), got: got.to_vec() }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2D convolution, NCHW input and `[O, I, K, K]` weights, padding `(K-1)/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        self.check(x)?;
        self.check(w)?;
        let (n, c_in, h, wd) = self.value(x).dims4(OP)?;
        let (c_out, wi, k, k2) = self.value(w).dims4(OP)?;
        if wi != c_in || k != k2 || !(1..=3).contains(&k) {
            return Err(mismatch(OP, format!("[O, {c_in}, K, K] with K in 1..=3"), self.shape(w)));
        }
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::Unsupported { op: OP, detail: format!("stride {stride}") });
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [c_out] {
                return Err(mismatch(OP, format!("bias [{c_out}]"), self.shape(b)));
            }
        }
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::NonPositiveSize { op: OP });
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k, stride, pad, ho, wo };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new([n, c_out, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(OP, value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Exact x2 upsampling: 2x2 kernel, stride 2, weights `[I, O, 2, 2]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        self.check(x)?;
        self.check(w)?;
        let (n, c_in, h, wd) = self.value(x).dims4(OP)?;
        let (wi, c_out, k1, k2) = self.value(w).dims4(OP)?;
        if wi != c_in || k1 != 2 || k2 != 2 {
            return Err(mismatch(OP, format!("[{c_in}, O, 2, 2]"), self.shape(w)));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [c_out] {
                return Err(mismatch(OP, format!("bias [{c_out}]"), self.shape(b)));
            }
        }
        let mut out = kernels::conv_t2_forward(self.value(x).data(), self.value(w).data(), n, c_in, h, wd, c_out);
        if let Some(b) = b {
            let plane = 4 * h * wd;
            for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let bo = self.value(b).data()[i % c_out];
                chunk.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
        let value = Tensor::new([n, c_out, 2 * h, 2 * wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(OP, value, Op::ConvTranspose2d { x, w, b }, &inputs)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        const OP: &str = "instance_norm";
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        for p in [gamma, beta] {
            self.check(p)?;
            if self.shape(p) != [c] {
                return Err(mismatch(OP, format!("[{c}]"), self.shape(p)));
            }
        }
        let (y, mean, inv_std) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            eps,
        );
        let value = Tensor::new([n, c, h, w], y)?;
        self.push(OP, value, Op::InstanceNorm { x, gamma, beta, mean, inv_std }, &[x, gamma, beta])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push("leaky_relu", value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale { x, s }, &[x])
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *xs.first().ok_or(TensorError::Unsupported { op: OP, detail: "no inputs".into() })?;
        self.check(first)?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut total_c = 0;
        for &x in xs {
            self.check(x)?;
            let (nx, c, hx, wx) = self.value(x).dims4(OP)?;
            if (nx, hx, wx) != (n, h, w) {
                return Err(mismatch(OP, format!("[{n}, C, {h}, {w}]"), self.shape(x)));
            }
            total_c += c;
        }
        let p = h * w;
        let mut data = Vec::with_capacity(n * total_c * p);
        for ni in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                data.extend_from_slice(&self.value(x).data()[ni * c * p..(ni + 1) * c * p]);
            }
        }
        let value = Tensor::new([n, total_c, h, w], data)?;
        self.push(OP, value, Op::ConcatChannels { xs: xs.to_vec() }, xs)
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_batch";
        let first = *xs.first().ok_or(TensorError::Unsupported { op: OP, detail: "no inputs".into() })?;
        self.check(first)?;
        let tail = self.shape(first).get(1..).map(<[usize]>::to_vec).unwrap_or_default();
        let mut n = 0;
        let mut data = Vec::new();
        for &x in xs {
            self.check(x)?;
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch(OP, format!("[N, {tail:?}]"), s));
            }
            n += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![n];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        self.push(OP, value, Op::ConcatBatch { xs: xs.to_vec() }, xs)
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "narrow_batch";
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] || len == 0 {
            return Err(mismatch(OP, format!("leading extent >= {}", start + len), &s));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        self.push(OP, value, Op::NarrowBatch { x, start }, &[x])
    }

    /// NCHW -> `[N*H*W, C]`: one row per spatial position.
    pub fn flatten_tokens(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "flatten_tokens";
        self.check(x)?;
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let p = h * w;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * p];
        for ni in 0..n {
            for ci in 0..c {
                for pi in 0..p {
                    data[(ni * p + pi) * c + ci] = src[(ni * c + ci) * p + pi];
                }
            }
        }
        let value = Tensor::new([n * p, c], data)?;
        self.push(OP, value, Op::FlattenTokens { x }, &[x])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        const OP: &str = "reshape";
        self.check(x)?;
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(mismatch(OP, format!("{} elements", shape.iter().product::<usize>()), self.shape(x)));
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push(OP, value, Op::Reshape { x }, &[x])
    }

    /// `[N*H*W, C]` -> NCHW; inverse of [`Graph::flatten_tokens`].
    pub fn unflatten_tokens(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "unflatten_tokens";
        self.check(x)?;
        let (rows, c) = self.value(x).dims2(OP)?;
        let p = h * w;
        if rows != n * p || p == 0 {
            return Err(mismatch(OP, format!("[{}, C]", n * p), self.shape(x)));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * p];
        for ni in 0..n {
            for pi in 0..p {
                for ci in 0..c {
                    data[(ni * c + ci) * p + pi] = src[(ni * p + pi) * c + ci];
                }
            }
        }
        let value = Tensor::new([n, c, h, w], data)?;
        self.push(OP, value, Op::UnflattenTokens { x }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        self.check(a)?;
        self.check(b)?;
        let (n, k) = self.value(a).dims2(OP)?;
        let (kb, m) = self.value(b).dims2(OP)?;
        if k != kb {
            return Err(mismatch(OP, format!("[{k}, M]"), self.shape(b)));
        }
        let data = kernels::matmul(MatRef::new(self.value(a).data(), n, k), MatRef::new(self.value(b).data(), k, m));
        let value = Tensor::new([n, m], data)?;
        self.push(OP, value, Op::Matmul { a, b }, &[a, b])
    }

    /// `a * b^T` for `a: [N, K]`, `b: [M, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul_nt";
        self.check(a)?;
        self.check(b)?;
        let (n, k) = self.value(a).dims2(OP)?;
        let (m, kb) = self.value(b).dims2(OP)?;
        if k != kb {
            return Err(mismatch(OP, format!("[M, {k}]"), self.shape(b)));
        }
        let data = kernels::matmul(MatRef::new(self.value(a).data(), n, k), MatRef::t(self.value(b).data(), m, k));
        let value = Tensor::new([n, m], data)?;
        self.push(OP, value, Op::MatmulNt { a, b }, &[a, b])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "softmax_rows";
        self.check(x)?;
        let (rows, cols) = self.value(x).dims2(OP)?;
        let data = kernels::softmax_rows(self.value(x).data(), rows, cols);
        let value = Tensor::new([rows, cols], data)?;
        self.push(OP, value, Op::SoftmaxRows { x }, &[x])
    }

    fn resize_planes(&self, op: &'static str, x: Var, oh: usize, ow: usize) -> Result<(usize, usize, usize, usize)> {
        self.check(x)?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::NonPositiveSize { op });
        }
        self.value(x).dims4(op)
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        const OP: &str = "resize_bilinear";
        let (n, c, h, w) = self.resize_planes(OP, x, oh, ow)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(data.chunks_exact_mut(oh * ow)) {
            kernels::resize_bilinear_plane(plane, h, w, oh, ow, dst);
        }
        let value = Tensor::new([n, c, oh, ow], data)?;
        self.push(OP, value, Op::ResizeBilinear { x }, &[x])
    }

    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        const OP: &str = "resize_nearest";
        let (n, c, h, w) = self.resize_planes(OP, x, oh, ow)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(data.chunks_exact_mut(oh * ow)) {
            kernels::resize_nearest_plane(plane, h, w, oh, ow, dst);
        }
        let value = Tensor::new([n, c, oh, ow], data)?;
        self.push(OP, value, Op::ResizeNearest { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let total = v.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(v.numel().max(1)).unwrap();
        self.push("mean", Tensor::scalar(total), Op::Mean { x }, &[x])
    }

    /// Soft dice loss averaged over the leading axis:
    /// `1 - 2 sum(p m) / (sum(p^2) + sum(m^2) + eps)` per sample.
    pub fn soft_dice(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        const OP: &str = "soft_dice";
        self.same_shape(OP, pred, target)?;
        let s = self.shape(pred);
        if s.is_empty() {
            return Err(mismatch(OP, "[N, ...]", s));
        }
        let n = s[0];
        let inner = self.value(pred).numel() / n.max(1);
        let (p, m) = (self.value(pred).data(), self.value(target).data());
        let mut total = T::zero();
        for i in 0..n {
            let (inter, pp, mm) = kernels::dice_terms(&p[i * inner..(i + 1) * inner], &m[i * inner..(i + 1) * inner]);
            total = total + (T::one() - (inter + inter) / (pp + mm + eps));
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(OP, Tensor::scalar(loss), Op::SoftDice { pred, target, eps }, &[pred, target])
    }

    /// Reverse pass from a scalar `loss`. Leaves fed by several nodes accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, g: Vec<T>| match &mut grads[v.0] {
            Some(existing) => add_into(existing, &g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let g = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dy, geom, need);
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = g.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let c_out = self.shape(*w)[1];
                    let plane = dy.len() / (self.shape(*x)[0] * c_out);
                    let mut db = vec![T::zero(); c_out];
                    for (i, chunk) in dy.chunks_exact(plane).enumerate() {
                        db[i % c_out] = chunk.iter().fold(db[i % c_out], |a, &v| a + v);
                    }
                    acc(b, db);
                }
                let [n, c_in, h, wd] = self.shape(*x) else { unreachable!() };
                let c_out = self.shape(*w)[1];
                let (dx, dw) = kernels::conv_t2_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    *n,
                    *c_in,
                    *h,
                    *wd,
                    c_out,
                    (self.wants(*x), self.wants(*w)),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                let [n, c, h, w] = self.shape(*x) else { unreachable!() };
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                    dy,
                    *n,
                    *c,
                    h * w,
                );
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let g = self.value(*x).data().iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { g * *slope }).collect();
                acc(*x, g);
            }
            Op::Sigmoid { x: input } => {
                let g = node.value.data().iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                acc(*input, g);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, dy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    acc(*a, self.value(*b).data().iter().zip(dy).map(|(&v, &g)| v * g).collect());
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).data().iter().zip(dy).map(|(&v, &g)| v * g).collect());
                }
            }
            Op::Scale { x, s } => acc(*x, dy.iter().map(|&g| g * *s).collect()),
            Op::ConcatChannels { xs } => {
                let [n, total_c, h, w] = node.value.shape() else { unreachable!() };
                let p = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.wants(x) {
                        let mut g = Vec::with_capacity(n * c * p);
                        for ni in 0..*n {
                            let base = (ni * total_c + offset) * p;
                            g.extend_from_slice(&dy[base..base + c * p]);
                        }
                        acc(x, g);
                    }
                    offset += c;
                }
            }
            Op::ConcatBatch { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.wants(x) {
                        acc(x, dy[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::NarrowBatch { x, start } => {
                let src = self.value(*x);
                let inner = src.numel() / src.shape()[0];
                let mut g = vec![T::zero(); src.numel()];
                g[start * inner..start * inner + dy.len()].copy_from_slice(dy);
                acc(*x, g);
            }
            Op::Reshape { x } => acc(*x, dy.to_vec()),
            Op::FlattenTokens { x } => {
                let [n, c, h, w] = self.shape(*x) else { unreachable!() };
                let p = h * w;
                let mut g = vec![T::zero(); dy.len()];
                for ni in 0..*n {
                    for ci in 0..*c {
                        for pi in 0..p {
                            g[(ni * c + ci) * p + pi] = dy[(ni * p + pi) * c + ci];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::UnflattenTokens { x } => {
                let [n, c, h, w] = node.value.shape() else { unreachable!() };
                let p = h * w;
                let mut g = vec![T::zero(); dy.len()];
                for ni in 0..*n {
                    for pi in 0..p {
                        for ci in 0..*c {
                            g[(ni * p + pi) * c + ci] = dy[(ni * c + ci) * p + pi];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Matmul { a, b } => {
                let [n, k] = self.shape(*a) else { unreachable!() };
                let m = self.shape(*b)[1];
                if self.wants(*a) {
                    acc(*a, kernels::matmul(MatRef::new(dy, *n, m), MatRef::t(self.value(*b).data(), *k, m)));
                }
                if self.wants(*b) {
                    acc(*b, kernels::matmul(MatRef::t(self.value(*a).data(), *n, *k), MatRef::new(dy, *n, m)));
                }
            }
            Op::MatmulNt { a, b } => {
                let [n, k] = self.shape(*a) else { unreachable!() };
                let m = self.shape(*b)[0];
                if self.wants(*a) {
                    acc(*a, kernels::matmul(MatRef::new(dy, *n, m), MatRef::new(self.value(*b).data(), m, *k)));
                }
                if self.wants(*b) {
                    acc(*b, kernels::matmul(MatRef::t(dy, *n, m), MatRef::new(self.value(*a).data(), *n, *k)));
                }
            }
            Op::SoftmaxRows { x } => {
                let [rows, cols] = node.value.shape() else { unreachable!() };
                acc(*x, kernels::softmax_rows_backward(node.value.data(), dy, *rows, *cols));
            }
            Op::ResizeBilinear { x } | Op::ResizeNearest { x } => {
                let [_, _, h, w] = self.shape(*x) else { unreachable!() };
                let [_, _, oh, ow] = node.value.shape() else { unreachable!() };
                let mut g = vec![T::zero(); self.value(*x).numel()];
                for (dst, src) in g.chunks_exact_mut(h * w).zip(dy.chunks_exact(oh * ow)) {
                    if matches!(node.op, Op::ResizeBilinear { .. }) {
                        kernels::resize_bilinear_plane_backward(src, *h, *w, *oh, *ow, dst);
                    } else {
                        kernels::resize_nearest_plane_backward(src, *h, *w, *oh, *ow, dst);
                    }
                }
                acc(*x, g);
            }
            Op::Sum { x } => acc(*x, vec![dy[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![dy[0] / T::from_usize(n.max(1)).unwrap(); n]);
            }
            Op::SoftDice { pred, target, eps } => {
                let n = self.shape(*pred)[0];
                let inner = self.value(*pred).numel() / n;
                let (p, m) = (self.value(*pred).data(), self.value(*target).data());
                let scale = dy[0] / T::from_usize(n).unwrap();
                let two = T::one() + T::one();
                let mut gp = self.wants(*pred).then(|| vec![T::zero(); p.len()]);
                let mut gm = self.wants(*target).then(|| vec![T::zero(); m.len()]);
                for i in 0..n {
                    let r = i * inner..(i + 1) * inner;
                    let (inter, pp, mm) = kernels::dice_terms(&p[r.clone()], &m[r.clone()]);
                    let denom = pp + mm + *eps;
                    let d2 = denom * denom;
                    // d/dp_j [-2 I / D] = -2 (m_j D - 2 I p_j) / D^2, symmetric for m.
                    if let Some(gp) = gp.as_mut() {
                        for j in r.clone() {
                            gp[j] = scale * (-two * (m[j] * denom - two * inter * p[j]) / d2);
                        }
                    }
                    if let Some(gm) = gm.as_mut() {
                        for j in r.clone() {
                            gm[j] = scale * (-two * (p[j] * denom - two * inter * m[j]) / d2);
                        }
                    }
                }
                if let Some(gp) = gp {
                    acc(*pred, gp);
                }
                if let Some(gm) = gm {
                    acc(*target, gm);
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
