//! Define-by-run tape.
//!
//! Nodes are appended in creation order, which is a valid topological order,
//! so backward is a single reverse sweep. Ops are coarse (whole convolutions,
//! normalizations, losses) and each carries the activations its
//! vector-Jacobian product needs.

use super::{gemm, DType, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
    SoftmaxLast,
    LogSoftmaxLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Source of the border ring values when padding a feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PadFill {
    Zero,
    Constant(f64),
    Reflect,
    /// Learnable ring of shape `[C, ring_len]`, shared by every item in the batch.
    User(Var),
}

/// Which operand of a binary op is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    o: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct PadGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var, Bcast),
    Scale(Var, f64),
    Unary(UnaryOp, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AddRow {
        x: Var,
        v: Var,
    },
    Pad {
        x: Var,
        fill: PadFill,
        geom: PadGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SpatialMean(Var),
    TimeMean(Var),
    TemporalConv {
        x: Var,
        w: Var,
        b: Var,
        col: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    External {
        x: Var,
        grad: Vec<f64>,
    },
    GradReverse {
        x: Var,
        weight: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape; rebuilt for every forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of border cells around an `h × w` map padded by `p` on each edge.
pub fn ring_len(h: usize, w: usize, p: usize) -> usize {
    (h + 2 * p) * (w + 2 * p) - h * w
}

/// Padded-grid coordinates of the ring cells in row-major scan order.
pub fn ring_cells(h: usize, w: usize, p: usize) -> Vec<(usize, usize)> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut cells = Vec::with_capacity(ring_len(h, w, p));
    for i in 0..hp {
        for j in 0..wp {
            let inside = i >= p && i < p + h && j >= p && j < p + w;
            if !inside {
                cells.push((i, j));
            }
        }
    }
    cells
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated into a tracked leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Leaves that currently hold a gradient.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        (0..self.grads.len())
            .filter(|&i| self.grads[i].is_some())
            .map(Var)
            .collect()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        let dtype = if inputs
            .iter()
            .any(|v| self.nodes[v.0].value.dtype() == DType::F32)
        {
            DType::F32
        } else {
            DType::F64
        };
        let value = value.with_dtype(dtype);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} produced a non-finite value"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved activations are only kept when a gradient can flow through the node.
        let op = if requires_grad { op } else { strip_saved(op) };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── dense algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} @ {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = if ta.shape() == tb.shape() {
            Bcast::None
        } else if ta.rank() == 0 {
            Bcast::Left
        } else if tb.rank() == 0 {
            Bcast::Right
        } else {
            return dim_err(format!(
                "{op:?} of {:?} and {:?} (only equal shapes or a rank-0 operand)",
                ta.shape(),
                tb.shape()
            ));
        };
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
            Bcast::None => (
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::Left => {
                let s = ta.item();
                (
                    tb.shape().to_vec(),
                    tb.data().iter().map(|&y| f(s, y)).collect(),
                )
            }
            Bcast::Right => {
                let s = tb.item();
                (
                    ta.shape().to_vec(),
                    ta.data().iter().map(|&x| f(x, s)).collect(),
                )
            }
        };
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Binary(op, a, b, bcast), &[a, b], "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplies by a non-tracked constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(t.shape(), data)?;
        self.push(t, Op::Scale(a, c), &[a], "scale")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = match op {
            UnaryOp::Relu => t.data().iter().map(|&x| x.max(0.0)).collect(),
            UnaryOp::Exp => t.data().iter().map(|x| x.exp()).collect(),
            UnaryOp::Log => {
                if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain(format!("log of nonpositive value {bad}")));
                }
                t.data().iter().map(|x| x.ln()).collect()
            }
            UnaryOp::SoftmaxLast | UnaryOp::LogSoftmaxLast => {
                let d = *t.shape().last().ok_or_else(|| {
                    Error::Dimension("softmax over the last axis of a scalar".into())
                })?;
                let mut out = t.data().to_vec();
                if d > 0 {
                    for row in out.chunks_mut(d) {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        if op == UnaryOp::SoftmaxLast {
                            for x in row.iter_mut() {
                                *x = (*x - m).exp() / z;
                            }
                        } else {
                            let lz = m + z.ln();
                            for x in row.iter_mut() {
                                *x -= lz;
                            }
                        }
                    }
                }
                out
            }
        };
        let t = Tensor::new(t.shape(), data)?;
        self.push(t, Op::Unary(op, a), &[a], "unary")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::SoftmaxLast, a)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::LogSoftmaxLast, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return dim_err("mean of an empty tensor".into());
        }
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// `x @ wᵀ + b` for `x: [N, K]`, `w: [O, K]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return dim_err(format!("linear {sx:?} with weight {sw:?}"));
        }
        let (n, k, o) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return dim_err(format!("linear bias {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            k,
            o,
            1.0,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            1.0,
            &mut out,
        );
        let t = Tensor::new(&[n, o], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// Adds the vector `v: [C]` to every row of `x: [N, C]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 2 || sv != [sx[1]] {
            return dim_err(format!("add_row {sx:?} + {sv:?}"));
        }
        let c = sx[1];
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for row in out.chunks_mut(c.max(1)) {
            add_into(row, vv);
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(t, Op::AddRow { x, v }, &[x, v], "add_row")
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `-weight`.
    pub fn grad_reverse(&mut self, x: Var, weight: f64) -> Result<Var> {
        let t = self.value(x).clone();
        self.push(t, Op::GradReverse { x, weight }, &[x], "grad_reverse")
    }

    /// Scalar whose value and gradient with respect to `x` were computed outside the tape.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "external gradient has {} values for input of {}",
                grad.len(),
                self.value(x).numel()
            )));
        }
        self.push(
            Tensor::scalar(value),
            Op::External { x, grad },
            &[x],
            "external",
        )
    }

    // ── convolution stack ──────────────────────────────────────────────

    /// Surrounds each `[H, W]` plane of `x: [N, C, H, W]` with a ring of width `p`.
    pub fn pad2d(&mut self, x: Var, p: usize, fill: PadFill) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return dim_err(format!("pad2d expects [N, C, H, W], got {sx:?}"));
        }
        let geom = PadGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            p,
        };
        let PadGeom { n, c, h, w, p } = geom;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let cells = ring_cells(h, w, p);
        if let PadFill::User(ring) = fill {
            let expect = [c, cells.len()];
            if self.shape(ring) != expect {
                return Err(Error::Shape(format!(
                    "ring {:?} does not match [C, ring_len] = {expect:?}",
                    self.shape(ring)
                )));
            }
        }
        if fill == PadFill::Reflect && p > 0 && (p >= h || p >= w) {
            return dim_err(format!(
                "reflect padding {p} needs a map wider than {p}, got {h}x{w}"
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * hp * wp];
        let ring_vals = match fill {
            PadFill::User(r) => Some(self.value(r).data()),
            _ => None,
        };
        for ni in 0..n {
            for ci in 0..c {
                let src = &xv[(ni * c + ci) * h * w..][..h * w];
                let dst = &mut out[(ni * c + ci) * hp * wp..][..hp * wp];
                for i in 0..h {
                    dst[(i + p) * wp + p..][..w].copy_from_slice(&src[i * w..][..w]);
                }
                match fill {
                    PadFill::Zero => {}
                    PadFill::Constant(v) => {
                        for &(i, j) in &cells {
                            dst[i * wp + j] = v;
                        }
                    }
                    PadFill::Reflect => {
                        for &(i, j) in &cells {
                            let si = reflect_index(i as isize - p as isize, h);
                            let sj = reflect_index(j as isize - p as isize, w);
                            dst[i * wp + j] = src[si * w + sj];
                        }
                    }
                    PadFill::User(_) => {
                        let r = &ring_vals.unwrap()[ci * cells.len()..][..cells.len()];
                        for (&(i, j), &v) in cells.iter().zip(r) {
                            dst[i * wp + j] = v;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, c, hp, wp], out)?;
        let inputs: Vec<Var> = match fill {
            PadFill::User(r) => vec![x, r],
            _ => vec![x],
        };
        self.push(t, Op::Pad { x, fill, geom }, &inputs, "pad2d")
    }

    /// Unpadded cross-correlation of `x: [N, C, Hp, Wp]` with `w: [O, C, k, k]` plus bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return dim_err(format!("conv2d input {sx:?}, weight {sw:?}, bias {sb:?}"));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (n, c, hp, wp, o, k) = (sx[0], sx[1], sx[2], sx[3], sw[0], sw[2]);
        if hp < k || wp < k {
            return dim_err(format!("conv2d kernel {k} larger than input {hp}x{wp}"));
        }
        let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
        let geom = Conv2dGeom {
            n,
            c,
            hp,
            wp,
            o,
            k,
            stride,
            ho,
            wo,
        };
        let (p, ckk) = (ho * wo, c * k * k);
        let (xv, wv, bias) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let group = geom.group();
        let mut out = vec![0.0; n * o * p];
        self.exec
            .for_each_chunk(&mut out, group * o * p, |gi, dst| {
                let frames = dst.len() / (o * p);
                let gp = frames * p;
                let col = group_im2col(xv, &geom, gi * group, frames);
                let mut mat = vec![0.0; o * gp];
                gemm(o, ckk, gp, 1.0, wv, (ckk, 1), &col, (gp, 1), 0.0, &mut mat);
                for (f, frame) in dst.chunks_mut(o * p).enumerate() {
                    for (oi, plane) in frame.chunks_mut(p).enumerate() {
                        for (d, s) in plane.iter_mut().zip(&mat[oi * gp + f * p..][..p]) {
                            *d = s + bias[oi];
                        }
                    }
                }
            });
        let t = Tensor::new(&[n, o, ho, wo], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Per-channel normalization of `x: [N, C, ...]` using batch statistics.
    ///
    /// Returns the output and the biased batch mean and variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, inner) = self.norm_layout(x, gamma, beta)?;
        let xv = self.value(x).data();
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xv[(ni * c + ci) * inner..][..inner].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                v += xv[(ni * c + ci) * inner..][..inner]
                    .iter()
                    .map(|x| (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = v / m;
        }
        let out = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.norm_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return dim_err(format!(
                "running statistics for {} channels, input has {c}",
                mean.len()
            ));
        }
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    fn norm_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return dim_err(format!("batch_norm expects [N, C, ...], got {sx:?}"));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!("batch_norm affine parameters must be [{c}]"));
        }
        Ok((n, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.norm_layout(x, gamma, beta)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batch_norm",
        )
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] * sx[3] == 0 {
            return dim_err(format!(
                "spatial_mean expects non-empty [N, C, H, W], got {sx:?}"
            ));
        }
        let hw = sx[2] * sx[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&sx[..2], data)?;
        self.push(t, Op::SpatialMean(x), &[x], "spatial_mean")
    }

    /// Mean over time: `[B, T, C] -> [B, C]`.
    pub fn time_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] == 0 {
            return dim_err(format!("time_mean expects non-empty [B, T, C], got {sx:?}"));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                add_into(&mut out[bi * c..][..c], &xv[(bi * t + ti) * c..][..c]);
            }
        }
        for v in &mut out {
            *v /= t as f64;
        }
        let t = Tensor::new(&[b, c], out)?;
        self.push(t, Op::TimeMean(x), &[x], "time_mean")
    }

    /// Zero-padded, stride-1 convolution along time: `[B, T, C]` with `w: [O, C, k]` (odd `k`).
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sw[2] % 2 == 0 || sb != [sw[0]] {
            return dim_err(format!(
                "temporal_conv input {sx:?}, weight {sw:?}, bias {sb:?}"
            ));
        }
        let (bn, t, c, o, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        let col = temporal_im2col(self.value(x).data(), bn, t, c, k);
        let ck = c * k;
        let mut out = vec![0.0; bn * t * o];
        let bias = self.value(b).data();
        for row in out.chunks_mut(o.max(1)) {
            row.copy_from_slice(bias);
        }
        gemm(
            bn * t,
            ck,
            o,
            1.0,
            &col,
            (ck, 1),
            self.value(w).data(),
            (1, ck),
            1.0,
            &mut out,
        );
        let tt = Tensor::new(&[bn, t, o], out)?;
        let col = if self.needs(w) { col } else { Vec::new() };
        self.push(
            tt,
            Op::TemporalConv { x, w, b, col },
            &[x, w, b],
            "temporal_conv",
        )
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Mean over the batch of `-log softmax(logits)[target]` for `logits: [B, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return dim_err(format!(
                "cross_entropy logits {s:?} with {} targets",
                targets.len()
            ));
        }
        let (bn, v) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!(
                "target {t} outside vocabulary of {v}"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; bn * v];
        let mut loss = 0.0;
        for (bi, &tgt) in targets.iter().enumerate() {
            let row = &lv[bi * v..][..v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lz = m + z.ln();
            loss += lz - row[tgt];
            for (p, x) in probs[bi * v..][..v].iter_mut().zip(row) {
                *p = (x - lz).exp();
            }
        }
        let t = Tensor::scalar(loss / bn as f64);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Contract(
                "loss does not depend on any tracked leaf".into(),
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![1.0]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.grads[id] {
                        Some(acc) => add_into(acc.data_mut(), &g),
                        slot @ None => *slot = Some(Tensor::new(node.value.shape(), g)?),
                    }
                }
                continue;
            }
            for (input, grad) in self.vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => add_into(acc, &grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for each input that needs a gradient.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, (n, 1), val(*b), (1, n), 0.0, &mut ga);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(*a), (1, k), g, (n, 1), 0.0, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Binary(op, a, b, bcast) => {
                let (av, bv) = (val(*a), val(*b));
                let at = |i: usize| if *bcast == Bcast::Left { av[0] } else { av[i] };
                let bt = |i: usize| if *bcast == Bcast::Right { bv[0] } else { bv[i] };
                let (da, db): (Vec<f64>, Vec<f64>) = match op {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(i, x)| x * bt(i)).collect(),
                        g.iter().enumerate().map(|(i, x)| x * at(i)).collect(),
                    ),
                };
                let reduce = |d: Vec<f64>, scalar: bool| {
                    if scalar {
                        vec![d.iter().sum()]
                    } else {
                        d
                    }
                };
                if self.needs(*a) {
                    out.push((*a, reduce(da, *bcast == Bcast::Left)));
                }
                if self.needs(*b) {
                    out.push((*b, reduce(db, *bcast == Bcast::Right)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Unary(op, a) => {
                let (x, y) = (val(*a), node.value.data());
                let d: Vec<f64> = match op {
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryOp::SoftmaxLast | UnaryOp::LogSoftmaxLast => {
                        let d = *node.value.shape().last().unwrap();
                        let mut res = vec![0.0; g.len()];
                        for ((r, gr), yr) in res.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            if *op == UnaryOp::SoftmaxLast {
                                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for i in 0..d {
                                    r[i] = yr[i] * (gr[i] - dot);
                                }
                            } else {
                                let s: f64 = gr.iter().sum();
                                for i in 0..d {
                                    r[i] = gr[i] - yr[i].exp() * s;
                                }
                            }
                        }
                        res
                    }
                };
                out.push((*a, d));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, k, o) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * k];
                    gemm(n, o, k, 1.0, g, (o, 1), val(*w), (k, 1), 0.0, &mut gx);
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; o * k];
                    gemm(o, n, k, 1.0, g, (1, o), val(*x), (k, 1), 0.0, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, column_sums(g, o)));
                    }
                }
            }
            Op::AddRow { x, v } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*v) {
                    out.push((*v, column_sums(g, self.shape(*v)[0])));
                }
            }
            Op::GradReverse { x, weight } => {
                out.push((*x, g.iter().map(|v| -weight * v).collect()));
            }
            Op::External { x, grad } => {
                out.push((*x, grad.iter().map(|v| g[0] * v).collect()));
            }
            Op::Pad { x, fill, geom } => {
                let PadGeom { n, c, h, w, p } = *geom;
                let (hp, wp) = (h + 2 * p, w + 2 * p);
                let cells = ring_cells(h, w, p);
                let need_x = self.needs(*x);
                let mut gx = vec![0.0; if need_x { n * c * h * w } else { 0 }];
                let mut gring = match fill {
                    PadFill::User(r) if self.needs(*r) => Some(vec![0.0; c * cells.len()]),
                    _ => None,
                };
                for ni in 0..n {
                    for ci in 0..c {
                        let src = &g[(ni * c + ci) * hp * wp..][..hp * wp];
                        if need_x {
                            let dst = &mut gx[(ni * c + ci) * h * w..][..h * w];
                            for i in 0..h {
                                add_into(&mut dst[i * w..][..w], &src[(i + p) * wp + p..][..w]);
                            }
                            if *fill == PadFill::Reflect {
                                for &(i, j) in &cells {
                                    let si = reflect_index(i as isize - p as isize, h);
                                    let sj = reflect_index(j as isize - p as isize, w);
                                    dst[si * w + sj] += src[i * wp + j];
                                }
                            }
                        }
                        if let Some(gr) = gring.as_mut() {
                            let r = &mut gr[ci * cells.len()..][..cells.len()];
                            for (acc, &(i, j)) in r.iter_mut().zip(&cells) {
                                *acc += src[i * wp + j];
                            }
                        }
                    }
                }
                if need_x {
                    out.push((*x, gx));
                }
                if let (PadFill::User(r), Some(gr)) = (fill, gring) {
                    out.push((*r, gr));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let Conv2dGeom {
                    n,
                    c,
                    hp,
                    wp,
                    o,
                    k,
                    ho,
                    wo,
                    ..
                } = *geom;
                let (p, ckk, frame) = (ho * wo, c * k * k, c * hp * wp);
                if self.needs(*b) {
                    let mut gb = vec![0.0; o];
                    for gy in g.chunks(o * p) {
                        for (acc, plane) in gb.iter_mut().zip(gy.chunks(p)) {
                            *acc += plane.iter().sum::<f64>();
                        }
                    }
                    out.push((*b, gb));
                }
                let group = geom.group();
                let frames_in = |gi: usize| group.min(n - gi * group);
                if self.needs(*w) {
                    let xv = val(*x);
                    // per-group partials keep the reduction order independent of threads
                    let mut partial = vec![0.0; n.div_ceil(group) * o * ckk];
                    self.exec.for_each_chunk(&mut partial, o * ckk, |gi, acc| {
                        let frames = frames_in(gi);
                        let col = group_im2col(xv, geom, gi * group, frames);
                        let dmat = group_rows(g, o * p, p, gi * group, frames);
                        let gp = frames * p;
                        gemm(o, gp, ckk, 1.0, &dmat, (gp, 1), &col, (1, gp), 0.0, acc);
                    });
                    let mut gw = vec![0.0; o * ckk];
                    for acc in partial.chunks(o * ckk) {
                        for (d, v) in gw.iter_mut().zip(acc) {
                            *d += v;
                        }
                    }
                    out.push((*w, gw));
                }
                if self.needs(*x) {
                    let wv = val(*w);
                    let mut dx = vec![0.0; n * frame];
                    self.exec.for_each_chunk(&mut dx, group * frame, |gi, dst| {
                        let frames = frames_in(gi);
                        let gp = frames * p;
                        let dmat = group_rows(g, o * p, p, gi * group, frames);
                        let mut dcol = vec![0.0; ckk * gp];
                        gemm(
                            ckk,
                            o,
                            gp,
                            1.0,
                            wv,
                            (1, ckk),
                            &dmat,
                            (gp, 1),
                            0.0,
                            &mut dcol,
                        );
                        for (f, x) in dst.chunks_mut(frame).enumerate() {
                            frame_col2im(&dcol, geom, gp, f * p, x);
                        }
                    });
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let m = (n * inner) as f64;
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        for i in off..off + inner {
                            sum_g[ci] += g[i];
                            sum_gx[ci] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * inner;
                            let s = gv[ci] * inv_std[ci];
                            for i in off..off + inner {
                                gx[i] = if *batch_stats {
                                    s / m * (m * g[i] - sum_g[ci] - xhat[i] * sum_gx[ci])
                                } else {
                                    s * g[i]
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::SpatialMean(x) => {
                let sx = self.shape(*x);
                let hw = sx[2] * sx[3];
                let mut gx = Vec::with_capacity(g.len() * hw);
                for &v in g {
                    gx.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                out.push((*x, gx));
            }
            Op::TimeMean(x) => {
                let sx = self.shape(*x);
                let (bn, t, c) = (sx[0], sx[1], sx[2]);
                let mut gx = vec![0.0; bn * t * c];
                for bi in 0..bn {
                    for ti in 0..t {
                        for ci in 0..c {
                            gx[(bi * t + ti) * c + ci] = g[bi * c + ci] / t as f64;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::TemporalConv { x, w, b, col } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bn, t, c, o, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
                let (rows, ck) = (bn * t, c * k);
                if self.needs(*b) {
                    out.push((*b, column_sums(g, o)));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; o * ck];
                    gemm(o, rows, ck, 1.0, g, (1, o), col, (ck, 1), 0.0, &mut gw);
                    out.push((*w, gw));
                }
                if self.needs(*x) {
                    let mut dcol = vec![0.0; rows * ck];
                    gemm(
                        rows,
                        o,
                        ck,
                        1.0,
                        g,
                        (o, 1),
                        val(*w),
                        (ck, 1),
                        0.0,
                        &mut dcol,
                    );
                    out.push((*x, temporal_col2im(&dcol, bn, t, c, k)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let bn = targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / bn).collect();
                for (bi, &t) in targets.iter().enumerate() {
                    gl[bi * v + t] -= g[0] / bn;
                }
                out.push((*logits, gl));
            }
        }
        out
    }
}

fn strip_saved(op: Op) -> Op {
    match op {
        Op::BatchNorm {
            x,
            gamma,
            beta,
            batch_stats,
            ..
        } => Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            batch_stats,
        },
        Op::TemporalConv { x, w, b, .. } => Op::TemporalConv {
            x,
            w,
            b,
            col: Vec::new(),
        },
        Op::CrossEntropy {
            logits, targets, ..
        } => Op::CrossEntropy {
            logits,
            targets,
            probs: Vec::new(),
        },
        other => other,
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    if cols > 0 {
        for row in g.chunks(cols) {
            add_into(&mut s, row);
        }
    }
    s
}

/// `[C*k*k, N*Ho*Wo]` patch matrix of a padded input.
/// Output positions per conv GEMM; frames are grouped up to this width.
const GROUP_COLS: usize = 512;

impl Conv2dGeom {
    /// Frames per group, fixed by the geometry so results do not depend on threads.
    fn group(&self) -> usize {
        (GROUP_COLS / (self.ho * self.wo)).clamp(1, self.n.max(1))
    }
}

/// Unfolds `frames` consecutive `[C, Hp, Wp]` frames from `first` into a
/// `[C*K*K, frames*Ho*Wo]` patch matrix.
fn group_im2col(x: &[f64], geom: &Conv2dGeom, first: usize, frames: usize) -> Vec<f64> {
    let Conv2dGeom {
        c,
        hp,
        wp,
        k,
        stride,
        ho,
        wo,
        ..
    } = *geom;
    let (p, plane) = (ho * wo, hp * wp);
    let gp = frames * p;
    let mut col = vec![0.0; c * k * k * gp];
    for (r, row) in col.chunks_mut(gp).enumerate() {
        let (ci, ki, kj) = (r / (k * k), (r / k) % k, r % k);
        for f in 0..frames {
            let src = &x[((first + f) * c + ci) * plane..][..plane];
            for oh in 0..ho {
                let s = &src[(oh * stride + ki) * wp..][..wp];
                let d = &mut row[f * p + oh * wo..][..wo];
                if stride == 1 {
                    d.copy_from_slice(&s[kj..kj + wo]);
                } else {
                    for (ow, v) in d.iter_mut().enumerate() {
                        *v = s[ow * stride + kj];
                    }
                }
            }
        }
    }
    col
}

/// Gathers `[frames, rows, p]` blocks starting at frame `first` into a
/// `[rows, frames*p]` matrix.
fn group_rows(g: &[f64], per_frame: usize, p: usize, first: usize, frames: usize) -> Vec<f64> {
    let rows = per_frame / p;
    let gp = frames * p;
    let mut m = vec![0.0; rows * gp];
    for f in 0..frames {
        let src = &g[(first + f) * per_frame..][..per_frame];
        for (r, s) in src.chunks(p).enumerate() {
            m[r * gp + f * p..][..p].copy_from_slice(s);
        }
    }
    m
}

/// Adds the columns `off..off+Ho*Wo` of a `[C*K*K, ld]` patch-gradient matrix
/// back onto one frame.
fn frame_col2im(dcol: &[f64], geom: &Conv2dGeom, ld: usize, off: usize, frame: &mut [f64]) {
    let Conv2dGeom {
        hp,
        wp,
        k,
        stride,
        ho,
        wo,
        ..
    } = *geom;
    for (r, src) in dcol.chunks(ld).enumerate() {
        let (ci, ki, kj) = (r / (k * k), (r / k) % k, r % k);
        let plane = &mut frame[ci * hp * wp..][..hp * wp];
        for oh in 0..ho {
            let row = &mut plane[(oh * stride + ki) * wp..][..wp];
            for (ow, v) in src[off + oh * wo..][..wo].iter().enumerate() {
                row[ow * stride + kj] += v;
            }
        }
    }
}

fn temporal_im2col(x: &[f64], bn: usize, t: usize, c: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let ck = c * k;
    let mut col = vec![0.0; bn * t * ck];
    for bi in 0..bn {
        for ti in 0..t {
            let row = &mut col[(bi * t + ti) * ck..][..ck];
            for j in 0..k {
                let src_t = ti as isize + j as isize - half as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = &x[(bi * t + src_t as usize) * c..][..c];
                for ci in 0..c {
                    row[ci * k + j] = src[ci];
                }
            }
        }
    }
    col
}

fn temporal_col2im(dcol: &[f64], bn: usize, t: usize, c: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let ck = c * k;
    let mut dx = vec![0.0; bn * t * c];
    for bi in 0..bn {
        for ti in 0..t {
            let row = &dcol[(bi * t + ti) * ck..][..ck];
            for j in 0..k {
                let src_t = ti as isize + j as isize - half as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let dst = &mut dx[(bi * t + src_t as usize) * c..][..c];
                for ci in 0..c {
                    dst[ci] += row[ci * k + j];
                }
            }
        }
    }
    dx
}
