//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value recorded during one forward pass. Operations
//! are methods on the tape that take [`Var`] handles and return a new handle;
//! [`Tape::backward`] replays the record in reverse and leaves
//! `d(loss)/d(leaf)` on every tracked leaf.
//!
//! Nodes created only from constants are not differentiated, so a forward
//! pass over frozen weights costs only the input-gradient half of backward.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Ids are dense and unique per tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar { x: Var, s: Var },
    Abs(Var),
    Pow(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv3d { x: Var, w: Var, geom: ConvGeometry },
    ChannelBias { x: Var, b: Var },
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    Upsample(Var),
    Diff { x: Var, axis: usize },
    FrameSlice { x: Var, t: usize },
    StackFrames(Vec<Var>),
    ExpandLeading { x: Var, n: usize },
    Select { x: Var, index: usize },
    CrossEntropy { logits: Var, label: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::Conv3d { x, w, .. } => vec![*x, *w],
            Op::ChannelBias { x, b } => vec![*x, *b],
            Op::StackFrames(v) => v.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Abs(x)
            | Op::Pow(x, _)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::SoftmaxRows(x)
            | Op::ChannelMean(x)
            | Op::ChannelMax { x, .. }
            | Op::Upsample(x)
            | Op::Diff { x, .. }
            | Op::FrameSlice { x, .. }
            | Op::ExpandLeading { x, .. }
            | Op::Select { x, .. }
            | Op::CrossEntropy { logits: x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Single writer; distinct tapes are independent.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tracked leaf; its gradient is available after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, true)
    }

    /// Records an untracked value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn record(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn derived(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.record(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.derived(v, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let v = self.value(x).map(|e| e + offset);
        self.derived(v, Op::AddScalar(x))
    }

    /// `s · x` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                reason: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| sv * e);
        Ok(self.derived(v, Op::MulScalar { x, s }))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.derived(v, Op::Abs(x))
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let v = self.value(x).map(|e| e.powf(p));
        self.derived(v, Op::Pow(x, p))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > 0.0 { e } else { 0.0 });
        self.derived(v, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.derived(v, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(x)))
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                reason: format!("expected a matrix, got {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, p) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, p],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        let v = Tensor::new(&[m, p], data)?;
        Ok(self.derived(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let v = Tensor::new(&[c, r], kernels::transpose(self.value(x).data(), r, c))?;
        Ok(self.derived(v, Op::Transpose(x)))
    }

    /// Row-wise softmax of a matrix, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", x)?;
        let v = softmax_rows_value(self.value(x).data(), r, c)?;
        Ok(self.derived(Tensor::new(&[r, c], v)?, Op::SoftmaxRows(x)))
    }

    /// Cross-correlation of `x[C×T×H×W]` with `kernel[C'×C×kT×kH×kW]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = conv_dims(self.shape(x), self.shape(kernel), geom)?;
        let data = kernels::conv3d_forward(self.value(x).data(), self.value(kernel).data(), &dims);
        let [ot, oh, ow] = dims.output;
        let v = Tensor::new(&[dims.cout, ot, oh, ow], data)?;
        Ok(self.derived(v, Op::Conv3d { x, w: kernel, geom }))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x[C×…]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.is_empty() || bs != [xs[0]] {
            return Err(Error::Dimension {
                op: "channel_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let plane = self.value(x).numel() / xs[0];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += b[i / plane];
        }
        Ok(self.derived(v, Op::ChannelBias { x, b: bias }))
    }

    /// Mean over every axis but the first: `[C×…] → [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(Error::Shape {
                op: "channel_mean",
                reason: "rank-0 input".into(),
            });
        }
        let c = xs[0];
        let plane = self.value(x).numel() / c;
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(&[c], data)?;
        Ok(self.derived(v, Op::ChannelMean(x)))
    }

    /// Per-channel maximum over every trailing axis, `[C, ...] → [C]`; the
    /// gradient goes to the first maximal element.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.value(x).numel() == 0 {
            return Err(Error::Shape {
                op: "channel_max",
                reason: format!("cannot reduce shape {xs:?}"),
            });
        }
        let c = xs[0];
        let plane = self.value(x).numel() / c;
        let mut argmax = Vec::with_capacity(c);
        let mut data = Vec::with_capacity(c);
        for (k, ch) in self.value(x).data().chunks_exact(plane).enumerate() {
            let (i, v) = ch
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
            argmax.push(k * plane + i);
            data.push(v);
        }
        let v = Tensor::new(&[c], data)?;
        Ok(self.derived(v, Op::ChannelMax { x, argmax }))
    }

    /// Corner-aligned trilinear resampling of `x[T×H×W]` up to `target`.
    pub fn upsample_trilinear(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let src: [usize; 3] = match *self.shape(x) {
            [t, h, w] => [t, h, w],
            ref s => {
                return Err(Error::Shape {
                    op: "upsample_trilinear",
                    reason: format!("expected rank 3, got {s:?}"),
                })
            }
        };
        if target.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "upsample_trilinear",
                reason: format!("zero target extent in {target:?}"),
            });
        }
        if target.iter().zip(&src).any(|(d, s)| d < s) {
            return Err(Error::Shape {
                op: "upsample_trilinear",
                reason: format!("target {target:?} smaller than source {src:?}"),
            });
        }
        let data = trilinear_forward(self.value(x).data(), src, target);
        let v = Tensor::new(&target, data)?;
        Ok(self.derived(v, Op::Upsample(x)))
    }

    /// Forward difference along `axis`, zero at the far boundary.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "diff",
                reason: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for k in 0..len.saturating_sub(1) {
                for i in 0..inner {
                    let at = (o * len + k) * inner + i;
                    out[at] = xd[at + inner] - xd[at];
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.derived(v, Op::Diff { x, axis }))
    }

    /// Frame `t` of `x[C×T×H×W]` as a `[C×(H·W)]` matrix.
    pub fn frame_slice(&mut self, x: Var, t: usize) -> Result<Var> {
        let [c, tt, h, w] = volume_dims("frame_slice", self.shape(x))?;
        if t >= tt {
            return Err(Error::Shape {
                op: "frame_slice",
                reason: format!("frame {t} out of range for {tt} frames"),
            });
        }
        let n = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            out.extend_from_slice(&xd[(ch * tt + t) * n..][..n]);
        }
        let v = Tensor::new(&[c, n], out)?;
        Ok(self.derived(v, Op::FrameSlice { x, t }))
    }

    /// Stacks `[C×(H·W)]` frames in order into a `[C×T×H×W]` volume.
    pub fn stack_frames(&mut self, frames: &[Var], height: usize, width: usize) -> Result<Var> {
        let first = *frames.first().ok_or_else(|| Error::Shape {
            op: "stack_frames",
            reason: "no frames".into(),
        })?;
        let (c, n) = self.matrix_dims("stack_frames", first)?;
        if n != height * width {
            return Err(Error::Dimension {
                op: "stack_frames",
                lhs: vec![c, n],
                rhs: vec![height, width],
            });
        }
        for &f in frames {
            self.same_shape("stack_frames", first, f)?;
        }
        let tt = frames.len();
        let mut out = vec![0.0; c * tt * n];
        for (t, &f) in frames.iter().enumerate() {
            let fd = self.value(f).data();
            for ch in 0..c {
                out[(ch * tt + t) * n..][..n].copy_from_slice(&fd[ch * n..][..n]);
            }
        }
        let v = Tensor::new(&[c, tt, height, width], out)?;
        Ok(self.derived(v, Op::StackFrames(frames.to_vec())))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let xd = self.value(x).data();
        let data = (0..n).flat_map(|_| xd.iter().copied()).collect();
        let v = Tensor::new(&shape, data)?;
        Ok(self.derived(v, Op::ExpandLeading { x, n }))
    }

    /// The element at flat `index`, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.numel() {
            return Err(Error::Contract(format!(
                "select index {index} out of range for {:?}",
                xv.shape()
            )));
        }
        let v = Tensor::scalar(xv.data()[index]);
        Ok(self.derived(v, Op::Select { x, index }))
    }

    /// `-log softmax(logits)[label]` for a `[K]` logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                reason: format!("expected logits of rank 1, got {:?}", lv.shape()),
            });
        }
        if label >= lv.numel() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                lv.numel()
            )));
        }
        let d = lv.data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - d[label]);
        Ok(self.derived(v, Op::CrossEntropy { logits, label }))
    }

    /// Populates gradients of `loss` with respect to every tracked leaf.
    ///
    /// Gradients from a previous pass are discarded. Fan-out accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (input, contribution) in self.input_grads(id, &g) {
                accumulate(&mut grads[input.0], contribution);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Backward rule: contributions to each differentiable input of node `id`.
    fn input_grads(&self, id: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape(), data).expect("grad shape");
        let mut res: Vec<(Var, Tensor)> = Vec::new();
        let mut push = |v: Var, t: Tensor| {
            if needs(&v) {
                res.push((v, t));
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(*a, g.clone());
                push(*b, g.clone());
            }
            Op::Sub(a, b) => {
                push(*a, g.clone());
                push(*b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    push(*a, like(*a, d));
                }
                if needs(b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    push(*b, like(*b, d));
                }
            }
            Op::Scale(x, f) => push(*x, g.map(|e| e * f)),
            Op::AddScalar(x) => push(*x, g.clone()),
            Op::MulScalar { x, s } => {
                let sv = val(*s).item();
                if needs(x) {
                    push(*x, g.map(|e| e * sv));
                }
                if needs(s) {
                    let ds: f64 = gd.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    push(*s, like(*s, vec![ds]));
                }
            }
            Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                push(*x, like(*x, d));
            }
            Op::Pow(x, p) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| {
                        // subgradient 0 where x^(p-1) is singular
                        if x == 0.0 && *p < 1.0 {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                push(*x, like(*x, d));
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                push(*x, like(*x, d));
            }
            Op::Sum(x) => push(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                push(*x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::Reshape(x) => push(*x, like(*x, gd.to_vec())),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let p = val(*b).shape()[1];
                if needs(a) {
                    let bt = kernels::transpose(val(*b).data(), k, p);
                    push(*a, like(*a, kernels::matmul(gd, &bt, m, p, k)));
                }
                if needs(b) {
                    let at = kernels::transpose(val(*a).data(), m, k);
                    push(*b, like(*b, kernels::matmul(&at, gd, k, m, p)));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                push(*x, like(*x, kernels::transpose(gd, c, r)));
            }
            Op::SoftmaxRows(x) => {
                let c = out.shape()[1];
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(y.chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                push(*x, like(*x, d));
            }
            Op::Conv3d { x, w, geom } => {
                let dims =
                    conv_dims(val(*x).shape(), val(*w).shape(), *geom).expect("checked in forward");
                if needs(x) {
                    push(
                        *x,
                        like(
                            *x,
                            kernels::conv3d_backward_input(gd, val(*w).data(), &dims),
                        ),
                    );
                }
                if needs(w) {
                    push(
                        *w,
                        like(
                            *w,
                            kernels::conv3d_backward_kernel(gd, val(*x).data(), &dims),
                        ),
                    );
                }
            }
            Op::ChannelBias { x, b } => {
                push(*x, g.clone());
                if needs(b) {
                    let c = val(*b).numel();
                    let plane = gd.len() / c;
                    let d = gd.chunks_exact(plane).map(|ch| ch.iter().sum()).collect();
                    push(*b, like(*b, d));
                }
            }
            Op::ChannelMean(x) => {
                let xv = val(*x);
                let plane = xv.numel() / xv.shape()[0];
                let d = (0..xv.numel())
                    .map(|i| gd[i / plane] / plane as f64)
                    .collect();
                push(*x, like(*x, d));
            }
            Op::ChannelMax { x, argmax } => {
                let mut d = vec![0.0; val(*x).numel()];
                for (k, &i) in argmax.iter().enumerate() {
                    d[i] = gd[k];
                }
                push(*x, like(*x, d));
            }
            Op::Upsample(x) => {
                let s = val(*x).shape();
                let src = [s[0], s[1], s[2]];
                let o = out.shape();
                push(*x, like(*x, trilinear_adjoint(gd, src, [o[0], o[1], o[2]])));
            }
            Op::Diff { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let mut d = vec![0.0; gd.len()];
                for o in 0..outer {
                    for k in 0..len.saturating_sub(1) {
                        for i in 0..inner {
                            let at = (o * len + k) * inner + i;
                            d[at + inner] += gd[at];
                            d[at] -= gd[at];
                        }
                    }
                }
                push(*x, like(*x, d));
            }
            Op::FrameSlice { x, t } => {
                let s = val(*x).shape();
                let (c, tt, n) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![0.0; val(*x).numel()];
                for ch in 0..c {
                    d[(ch * tt + t) * n..][..n].copy_from_slice(&gd[ch * n..][..n]);
                }
                push(*x, like(*x, d));
            }
            Op::StackFrames(frames) => {
                let s = out.shape();
                let (c, tt, n) = (s[0], s[1], s[2] * s[3]);
                for (t, &f) in frames.iter().enumerate() {
                    if !needs(&f) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(c * n);
                    for ch in 0..c {
                        d.extend_from_slice(&gd[(ch * tt + t) * n..][..n]);
                    }
                    push(f, like(f, d));
                }
            }
            Op::ExpandLeading { x, n } => {
                let m = val(*x).numel();
                let mut d = vec![0.0; m];
                for k in 0..*n {
                    for (dv, &gv) in d.iter_mut().zip(&gd[k * m..][..m]) {
                        *dv += gv;
                    }
                }
                push(*x, like(*x, d));
            }
            Op::Select { x, index } => {
                let mut d = vec![0.0; val(*x).numel()];
                d[*index] = g.item();
                push(*x, like(*x, d));
            }
            Op::CrossEntropy { logits, label } => {
                let z = val(*logits).data();
                let p = softmax_rows_value(z, 1, z.len()).expect("finite logits");
                let gs = g.item();
                let d = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| gs * (pk - if k == *label { 1.0 } else { 0.0 }))
                    .collect();
                push(*logits, like(*logits, d));
            }
        }
        res
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

pub(crate) fn softmax_rows_value(x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric { op: "softmax_rows" });
    }
    let mut out = vec![0.0; rows * cols];
    for (orow, xrow) in out.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
        let max = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn volume_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(Error::Shape {
            op,
            reason: format!("expected a C×T×H×W volume, got {shape:?}"),
        }),
    }
}

fn conv_dims(xs: &[usize], ks: &[usize], geom: ConvGeometry) -> Result<ConvDims> {
    let [cin, t, h, w] = volume_dims("conv3d", xs)?;
    let [cout, kc, kt, kh, kw] = match *ks {
        [a, b, c, d, e] => [a, b, c, d, e],
        _ => {
            return Err(Error::Shape {
                op: "conv3d",
                reason: format!("expected a rank-5 kernel, got {ks:?}"),
            })
        }
    };
    if kc != cin {
        return Err(Error::Dimension {
            op: "conv3d",
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let input = [t, h, w];
    let kernel = [kt, kh, kw];
    let mut output = [0; 3];
    for axis in 0..3 {
        output[axis] = geom
            .out_extent(axis, input[axis], kernel[axis])
            .ok_or_else(|| Error::Shape {
                op: "conv3d",
                reason: format!(
                    "kernel {kernel:?} larger than padded input {input:?} (padding {:?})",
                    geom.padding
                ),
            })?;
    }
    Ok(ConvDims {
        cin,
        cout,
        input,
        kernel,
        output,
        geom,
    })
}

fn trilinear_forward(x: &[f64], src: [usize; 3], dst: [usize; 3]) -> Vec<f64> {
    let [st, sh, sw] = src;
    let [dt, dh, _] = dst;
    // width, then height, then time
    let a = kernels::lerp_axis(x, st * sh, 1, &kernels::linear_taps(sw, dst[2]), sw);
    let b = kernels::lerp_axis(&a, st, dst[2], &kernels::linear_taps(sh, dh), sh);
    kernels::lerp_axis(&b, 1, dh * dst[2], &kernels::linear_taps(st, dt), st)
}

fn trilinear_adjoint(g: &[f64], src: [usize; 3], dst: [usize; 3]) -> Vec<f64> {
    let [st, sh, sw] = src;
    let [dt, dh, dw] = dst;
    let b = kernels::lerp_axis_adjoint(g, 1, dh * dw, &kernels::linear_taps(st, dt), st);
    let a = kernels::lerp_axis_adjoint(&b, st, dw, &kernels::linear_taps(sh, dh), sh);
    kernels::lerp_axis_adjoint(&a, st * sh, 1, &kernels::linear_taps(sw, dw), sw)
}

/// Trilinear resampling without recording, for callers outside a tape.
pub fn upsample_trilinear(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.upsample_trilinear(v, target)?;
    Ok(tape.value(out).clone())
}

/// Row-wise softmax without recording.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [r, c] => Tensor::new(&[r, c], softmax_rows_value(x.data(), r, c)?),
        _ => Err(Error::Shape {
            op: "softmax_rows",
            reason: format!("expected a matrix, got {:?}", x.shape()),
        }),
    }
}
