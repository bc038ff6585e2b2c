use std::collections::HashMap;

use super::conv::{col2im, conv_out, conv_transpose_out, im2col, ConvGeom};
use super::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Index of a parameter inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Backward rule for an op defined outside the engine.
///
/// `backward` receives the values of the op's inputs and output together with
/// the upstream gradient, and returns one gradient per input (`None` when the
/// input is not differentiable).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    SumAll(Var),
    SumTrailing(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter that was inserted into the graph. Parameters
    /// unreachable from the loss get an all-zero gradient.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.params.get_mut(&id)
    }

    /// Gradient with respect to any node, `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Pending update of a non-trainable buffer (batch-norm running statistics).
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

/// Define-by-run computation graph with reverse-mode differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    buffer_updates: Vec<BufferUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            buffer_updates: Vec::new(),
        }
    }

    /// Graph in training mode: batch norm uses batch statistics and records
    /// running-statistic updates.
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push(BufferUpdate { id, value });
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free input, used for gradient checks against inputs.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums over every axis after the first `keep`, e.g. `[N,C,H,W] -> [N,C]`
    /// with `keep = 2`.
    pub fn sum_trailing(&mut self, a: Var, keep: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(keep <= shape.len(), "sum_trailing: keep > rank");
        let outer: usize = shape[..keep].iter().product();
        let inner: usize = shape[keep..].iter().product();
        let src = self.value(a).data();
        let data: Vec<T> = (0..outer)
            .map(|o| src[o * inner..(o + 1) * inner].iter().copied().sum())
            .collect();
        let out = Tensor::from_vec(&shape[..keep], data);
        let rg = self.rg(&[a]);
        self.push(out, Op::SumTrailing(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, c1, h, w) = self.value(a).dims4();
        let (n2, c2, h2, w2) = self.value(b).dims4();
        assert_eq!((n, h, w), (n2, h2, w2), "concat: incompatible shapes");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * hw);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for s in 0..n {
            data.extend_from_slice(&da[s * c1 * hw..(s + 1) * c1 * hw]);
            data.extend_from_slice(&db[s * c2 * hw..(s + 1) * c2 * hw]);
        }
        let out = Tensor::from_vec(&[n, c1 + c2, h, w], data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatChannels(a, b), rg)
    }

    /// 2-D convolution. `w` is `[O, C, k, k]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, c2, k, k2) = self.value(w).dims4();
        assert_eq!(c, c2, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        assert!(ho > 0 && wo > 0, "conv2d: kernel larger than input");
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * o * ho * wo];
        let xd = self.value(x).data();
        let wm = MatRef::new(self.value(w).data(), o, rows);
        for s in 0..n {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            im2col(&xd[s * c * h * wd..(s + 1) * c * h * wd], &geom, col);
            gemm(
                wm,
                MatRef::new(col, rows, ncols),
                T::zero(),
                &mut out[s * o * ncols..(s + 1) * o * ncols],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, ncols);
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Transposed convolution. `w` is `[C_in, O, k, k]`, `b` is `[O]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (c2, o, k, k2) = self.value(w).dims4();
        assert_eq!(c, c2, "conv_transpose2d: channel mismatch");
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        let (ho, wo) = (
            conv_transpose_out(h, k, stride, pad),
            conv_transpose_out(wd, k, stride, pad),
        );
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom {
            channels: o,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let rows = geom.col_rows();
        let hw = h * wd;
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); n * o * ho * wo];
        let xd = self.value(x).data();
        let wm = MatRef::new(self.value(w).data(), c, rows).t();
        for s in 0..n {
            gemm(
                wm,
                MatRef::new(&xd[s * c * hw..(s + 1) * c * hw], c, hw),
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &geom, &mut out[s * o * ho * wo..(s + 1) * o * ho * wo]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, ho * wo);
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(&[n, o, ho, wo], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// With `running = None` batch statistics are used; otherwise the given
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = n * hw;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        acc += xd[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        sq += xd[base..base + hw]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(sq / m as f64);
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let stats = batch_stats.then(|| (mean, var));
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::from_vec(&[n, c, h, w], out);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (v, stats)
    }

    /// `x @ w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear expects [N, in]");
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        gemm(
            MatRef::new(self.value(x).data(), n, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(Tensor::from_vec(&[n, fout], out), Op::Linear { x, w, b }, rg)
    }

    /// Inserts the output of an externally defined op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, |d, y| d * y));
                self.accumulate(grads, *b, g.zip_map(va, |d, x| d * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(vb, |d, y| d / y));
                // d(a/b)/db = -out/b
                let gb = g.zip_map(&node.value, |d, o| d * o).zip_map(vb, |t, y| -t / y);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|d| d * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| two * d * x));
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { d * s });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |d, y| d * y * (T::one() - y));
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let d = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), d));
            }
            Op::SumTrailing(a) => {
                let shape = self.shape(*a);
                let inner = self.value(*a).numel() / g.numel().max(1);
                let mut data = Vec::with_capacity(self.value(*a).numel());
                for &d in g.data() {
                    data.extend(std::iter::repeat_n(d, inner));
                }
                self.accumulate(grads, *a, Tensor::from_vec(shape, data));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a)));
            }
            Op::ConcatChannels(a, b) => {
                let (n, c1, h, w) = self.value(*a).dims4();
                let c2 = self.value(*b).dims4().1;
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * c1 * hw);
                let mut gb = Vec::with_capacity(n * c2 * hw);
                let gd = g.data();
                for s in 0..n {
                    let base = s * (c1 + c2) * hw;
                    ga.extend_from_slice(&gd[base..base + c1 * hw]);
                    gb.extend_from_slice(&gd[base + c1 * hw..base + (c1 + c2) * hw]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, c1, h, w], ga));
                self.accumulate(grads, *b, Tensor::from_vec(&[n, c2, h, w], gb));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                self.conv2d_backward(*x, *w, *b, geom, cols, g, grads)
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_transpose2d_backward(*x, *w, *b, geom, g, grads)
            }
            Op::MaxPool2 { x, argmax } => {
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let gxd = gx.data_mut();
                    for (&idx, &d) in argmax.iter().zip(g.data()) {
                        gxd[idx] += d;
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *batch_stats, g, grads),
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                let gm = MatRef::new(g.data(), n, fout);
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); n * fin];
                    gemm(gm, MatRef::new(self.value(*w).data(), fout, fin), T::zero(), &mut gx);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, fin], gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(gm.t(), MatRef::new(self.value(*x).data(), n, fin), T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::from_vec(&[fout, fin], gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (acc, &d) in gb.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[fout], gb));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                assert_eq!(gs.len(), inputs.len(), "{}: wrong gradient count", op.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, o, _, _) = g.dims4();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let gd = g.data();
        let chw = geom.channels * geom.height * geom.width;
        if self.requires_grad(w) {
            let mut gw = vec![T::zero(); o * rows];
            for s in 0..n {
                gemm(
                    MatRef::new(&gd[s * o * ncols..(s + 1) * o * ncols], o, ncols),
                    MatRef::new(&cols[s * rows * ncols..(s + 1) * rows * ncols], rows, ncols).t(),
                    T::one(),
                    &mut gw,
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), gw));
        }
        if self.requires_grad(x) {
            let mut gx = vec![T::zero(); n * chw];
            let mut dcols = vec![T::zero(); rows * ncols];
            let wm = MatRef::new(self.value(w).data(), o, rows).t();
            for s in 0..n {
                gemm(
                    wm,
                    MatRef::new(&gd[s * o * ncols..(s + 1) * o * ncols], o, ncols),
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, geom, &mut gx[s * chw..(s + 1) * chw]);
            }
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), gx));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, n, o, ncols));
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, wd) = self.value(x).dims4();
        let hw = h * wd;
        let o = geom.channels;
        let rows = geom.col_rows();
        let ohw = geom.height * geom.width;
        let gd = g.data();
        let xd = self.value(x).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut gx = vec![T::zero(); if need_x { n * c * hw } else { 0 }];
        let mut gw = vec![T::zero(); if need_w { c * rows } else { 0 }];
        let mut gcols = vec![T::zero(); rows * hw];
        let wm = MatRef::new(self.value(w).data(), c, rows);
        if need_x || need_w {
            for s in 0..n {
                im2col(&gd[s * o * ohw..(s + 1) * o * ohw], geom, &mut gcols);
                let gc = MatRef::new(&gcols, rows, hw);
                if need_x {
                    gemm(wm, gc, T::zero(), &mut gx[s * c * hw..(s + 1) * c * hw]);
                }
                if need_w {
                    gemm(
                        MatRef::new(&xd[s * c * hw..(s + 1) * c * hw], c, hw),
                        gc.t(),
                        T::one(),
                        &mut gw,
                    );
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), gx));
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), gw));
        }
        if let Some(b) = b {
            self.accumulate(grads, b, channel_sums(gd, n, o, ohw));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        batch_stats: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, w) = g.dims4();
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let gd = g.data();
        let gam = self.value(gamma).data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    sum_g[ch] += gd[i];
                    sum_gx[ch] += gd[i] * xhat[i];
                }
            }
        }
        if self.requires_grad(x) {
            let mut gx = vec![T::zero(); gd.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let k = gam[ch] * inv_std[ch];
                    for i in base..base + hw {
                        gx[i] = if batch_stats {
                            k / m * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                        } else {
                            k * gd[i]
                        };
                    }
                }
            }
            self.accumulate(grads, x, Tensor::from_vec(&[n, c, h, w], gx));
        }
        self.accumulate(grads, gamma, Tensor::from_vec(&[c], sum_gx));
        self.accumulate(grads, beta, Tensor::from_vec(&[c], sum_g));
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, hw: usize) {
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * hw;
            for v in &mut out[base..base + hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, hw: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * hw;
            *acc += g[base..base + hw].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out)
}

/// Output spatial size of [`Graph::conv2d`], exposed for shape planning.
pub fn conv2d_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    conv_out(size, kernel, stride, pad)
}
