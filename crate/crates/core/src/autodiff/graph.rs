//! Define-by-run tape. Every operation appends a node whose inputs are
//! earlier nodes, so node order is a topological order and the backward
//! sweep is a single reverse scan.

use serde::{Deserialize, Serialize};

use super::kernels::{bilinear_taps, col2im, gemm, im2col, AffineMap, ConvGeom, Taps};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics. `var` tracks the unbiased batch
/// variance, normalisation uses the biased one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BnState<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    LogFloor(f64),
    Square,
    Scale(f64),
    AddScalar(f64),
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_c: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the output viewed as the input of the forward conv.
        geom: ConvGeom,
        in_c: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    LogSoftmax(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<f64>,
    },
    Pad {
        x: Var,
        pad: usize,
    },
    Resample {
        x: Var,
        taps: Vec<Vec<Taps>>,
    },
    HFlip {
        x: Var,
        flags: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Shape(format!("{what}: expected NCHW, got {s:?}"))),
    }
}

fn shape2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, c] => Ok([n, c]),
        ref s => Err(Error::Shape(format!("{what}: expected [N, C], got {s:?}"))),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a node's value out as a fresh tensor without gradient metadata.
    pub fn detach(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.clear_grad();
        t.with_requires_grad(false)
    }

    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::divergence(format!("non-finite values in {what}"), None))
        }
    }

    // ---- convolution ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = shape4(self.value(x), "conv2d input")?;
        let [o, i, k, k2] = shape4(self.value(w), "conv2d weight")?;
        if i != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, weight expects {i}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!("conv2d: non-square kernel {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d: stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::Geometry(format!(
                "conv2d: kernel {k} does not fit {h}x{wd} with padding {padding}"
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (wd + 2 * padding - k) / stride + 1,
        };
        let p = geom.col_cols();
        let rows = geom.col_rows();
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; rows * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_len = c * h * wd;
            for s in 0..n {
                let xs = &xv[s * in_len..(s + 1) * in_len];
                let os = &mut out[s * o * p..(s + 1) * o * p];
                if geom.is_pointwise() {
                    gemm(o, rows, p, wv, false, xs, false, os, 0.0);
                } else {
                    im2col(xs, &geom, &mut cols);
                    gemm(o, rows, p, wv, false, &cols, false, os, 0.0);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (oc, &bias) in bv.iter().enumerate() {
                        let base = (s * o + oc) * p;
                        out[base..base + p].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c: o,
            },
            &inputs,
        ))
    }

    /// Transposed convolution; `w` is laid out `[C_in, C_out, K, K]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, ci, h, wd] = shape4(self.value(x), "conv_transpose2d input")?;
        let [wi, co, k, k2] = shape4(self.value(w), "conv_transpose2d weight")?;
        if wi != ci {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {ci} channels, weight expects {wi}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: non-square kernel {k}x{k2}"
            )));
        }
        if stride == 0 {
            return Err(Error::Geometry("conv_transpose2d: stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: bias shape {:?}, expected [{co}]",
                    self.shape(b)
                )));
            }
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::Geometry(format!(
                "conv_transpose2d: padding {padding} leaves no output for {h}x{wd} input"
            )));
        }
        let geom = ConvGeom {
            channels: co,
            height: full_h - 2 * padding,
            width: full_w - 2 * padding,
            kernel: k,
            stride,
            padding,
            out_h: h,
            out_w: wd,
        };
        let p = h * wd;
        let rows = geom.col_rows();
        let out_len = co * geom.height * geom.width;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; rows * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * ci * p..(s + 1) * ci * p];
                gemm(rows, ci, p, wv, true, xs, false, &mut cols, 0.0);
                col2im(&cols, &geom, &mut out[s * out_len..(s + 1) * out_len]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                let plane = geom.height * geom.width;
                for s in 0..n {
                    for (oc, &bias) in bv.iter().enumerate() {
                        let base = s * out_len + oc * plane;
                        out[base..base + plane].iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, geom.height, geom.width], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_c: ci,
            },
            &inputs,
        ))
    }

    // ---- normalisation -------------------------------------------------

    /// Per-channel batch norm over `[N, C, ...]`. Train mode normalises
    /// with batch statistics and folds them into the running stats.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: BnState<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch_norm: input shape {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm: {name} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        let m = (n * spatial) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let train = matches!(state, BnState::Train(_));
        match state {
            BnState::Train(stats) => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                if stats.channels() != c {
                    return Err(Error::Shape(format!(
                        "batch_norm: running stats for {} channels, input has {c}",
                        stats.channels()
                    )));
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        mean[ch] += xv[base..base + spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        var[ch] += xv[base..base + spatial]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let mom = stats.momentum;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch] * unbias;
                }
                var.iter_mut().for_each(|v| *v += stats.eps);
            }
            BnState::Eval(stats) => {
                if stats.channels() != c {
                    return Err(Error::Shape(format!(
                        "batch_norm: running stats for {} channels, input has {c}",
                        stats.channels()
                    )));
                }
                mean.copy_from_slice(&stats.mean);
                for ch in 0..c {
                    var[ch] = stats.var[ch] + stats.eps;
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- dense ----------------------------------------------------------

    /// `x [N, I] * w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, i] = shape2(self.value(x), "linear input")?;
        let [o, wi] = shape2(self.value(w), "linear weight")?;
        if wi != i {
            return Err(Error::Shape(format!(
                "linear: input width {i}, weight expects {wi}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "linear: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::LeakyRelu(s) => Box::new(move |v: f64| if v > 0.0 { v } else { s * v }),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Softplus => Box::new(softplus),
            Unary::Exp => Box::new(f64::exp),
            Unary::LogFloor(fl) => Box::new(move |v: f64| v.max(fl).ln()),
            Unary::Square => Box::new(|v: f64| v * v),
            Unary::Scale(c) => Box::new(move |v: f64| c * v),
            Unary::AddScalar(c) => Box::new(move |v: f64| v + c),
        };
        let src = self.value(x);
        let data: Vec<f64> = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Unary::LogFloor(floor))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }


    fn binary_value(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_value(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_value(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_value(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Row-wise log-softmax over the last axis of `[N, C]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let [_, c] = shape2(self.value(x), "log_softmax")?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    // ---- reshaping and pooling ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let mut value = self.value(x).clone().reshape(shape)?;
        value.clear_grad();
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "max_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Geometry(format!("max_pool2: input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "global_avg_pool")?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.batch_len();
        let len = t.sample_len();
        let out = (0..n)
            .map(|i| t.data()[i * len..(i + 1) * len].iter().sum())
            .collect();
        let value = Tensor::new(vec![n], out).expect("vector");
        self.push(value, Op::SumPerSample(x), &[x])
    }

    /// Picks `x[n, idx[n]]` from `[N, C]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [n, c] = shape2(self.value(x), "gather")?;
        if idx.len() != n {
            return Err(Error::Shape(format!(
                "gather: {} indices for batch of {n}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Shape(format!("gather: index {bad} >= {c} classes")));
        }
        let xv = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * c + i]).collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    fn channel_layout(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Shape(format!("{what}: input shape {s:?}")));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// Per-channel mean over batch and spatial axes: `[N, C, ...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = self.channel_layout(x, "channel_mean")?;
        let mean = channel_means(self.value(x).data(), n, c, sp);
        let value = Tensor::new(vec![c], mean)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    /// Per-channel biased variance: `[N, C, ...] -> [C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, sp) = self.channel_layout(x, "channel_var")?;
        let xv = self.value(x).data();
        let mean = channel_means(xv, n, c, sp);
        let m = (n * sp) as f64;
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * sp;
                var[ch] += xv[base..base + sp]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let value = Tensor::new(vec![c], var)?;
        Ok(self.push(value, Op::ChannelVar { x, mean }, &[x]))
    }

    // ---- image transforms -----------------------------------------------

    /// Constant padding on both spatial axes.
    pub fn pad(&mut self, x: Var, pad: usize, fill: f64) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "pad")?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = vec![fill; n * c * ph * pw];
        for plane in 0..n * c {
            for i in 0..h {
                let src = &xv[(plane * h + i) * w..(plane * h + i + 1) * w];
                let dst = (plane * ph + i + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, c, ph, pw], out)?;
        Ok(self.push(value, Op::Pad { x, pad }, &[x]))
    }

    /// Bilinear resampling through per-sample affine maps (one map shared
    /// by the batch if `maps.len() == 1`), with border replication.
    pub fn resample(&mut self, x: Var, maps: &[AffineMap], out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "resample")?;
        if maps.len() != 1 && maps.len() != n {
            return Err(Error::Shape(format!(
                "resample: {} maps for batch of {n}",
                maps.len()
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Geometry("resample: empty output".into()));
        }
        let taps: Vec<Vec<Taps>> = maps
            .iter()
            .map(|m| bilinear_taps(m, h, w, out_h, out_w))
            .collect();
        let xv = self.value(x).data();
        let plane_in = h * w;
        let plane_out = out_h * out_w;
        let mut out = vec![0.0; n * c * plane_out];
        for s in 0..n {
            let t = &taps[if taps.len() == 1 { 0 } else { s }];
            for ch in 0..c {
                let src = &xv[(s * c + ch) * plane_in..(s * c + ch + 1) * plane_in];
                let dst = &mut out[(s * c + ch) * plane_out..(s * c + ch + 1) * plane_out];
                for (d, tp) in dst.iter_mut().zip(t) {
                    *d = tp.w[0] * src[tp.idx[0]]
                        + tp.w[1] * src[tp.idx[1]]
                        + tp.w[2] * src[tp.idx[2]]
                        + tp.w[3] * src[tp.idx[3]];
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Resample { x, taps }, &[x]))
    }

    /// Mirrors the width axis of every sample whose flag is set.
    pub fn hflip(&mut self, x: Var, flags: &[bool]) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "hflip")?;
        if flags.len() != n {
            return Err(Error::Shape(format!(
                "hflip: {} flags for batch of {n}",
                flags.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for (s, &f) in flags.iter().enumerate() {
            if f {
                for row in out[s * c * h * w..(s + 1) * c * h * w].chunks_mut(w) {
                    row.reverse();
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::HFlip {
                x,
                flags: flags.to_vec(),
            },
            &[x],
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar `loss`, storing gradients on every
    /// leaf that requires them. Previous leaf gradients are overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(Error::NotScalar(lnode.value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.value.clear_grad();
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                leaves.push((i, gy));
                continue;
            }
            backprop_node(&self.nodes, node, &gy, &mut grads);
        }
        for (i, g) in leaves {
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }
}

fn channel_means(xv: &[f64], n: usize, c: usize, sp: usize) -> Vec<f64> {
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (s * c + ch) * sp;
            *m += xv[base..base + sp].iter().sum::<f64>();
        }
    }
    let m = (n * sp).max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    mean
}

/// Returns the gradient buffer for `v` if it participates in backprop.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: &[f64]) {
    if let Some(g) = slot(grads, nodes, v) {
        g.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
    }
}

fn backprop_node(nodes: &[Node], node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d {
            x,
            w,
            b,
            ref geom,
            out_c,
        } => {
            let n = nodes[x.0].value.shape()[0];
            let p = geom.col_cols();
            let rows = geom.col_rows();
            let in_len = geom.channels * geom.height * geom.width;
            let xv = val(x);
            let wv = val(w);
            let mut cols = vec![0.0; rows * p];
            if needs(w) {
                let mut dw = vec![0.0; wv.len()];
                for s in 0..n {
                    let gs = &gy[s * out_c * p..(s + 1) * out_c * p];
                    let xs = &xv[s * in_len..(s + 1) * in_len];
                    if geom.is_pointwise() {
                        gemm(out_c, p, rows, gs, false, xs, true, &mut dw, 1.0);
                    } else {
                        im2col(xs, geom, &mut cols);
                        gemm(out_c, p, rows, gs, false, &cols, true, &mut dw, 1.0);
                    }
                }
                add_into(grads, nodes, w, &dw);
            }
            if needs(x) {
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    let gs = &gy[s * out_c * p..(s + 1) * out_c * p];
                    gemm(rows, out_c, p, wv, true, gs, false, &mut cols, 0.0);
                    col2im(&cols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                }
                add_into(grads, nodes, x, &dx);
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let mut db = vec![0.0; out_c];
                for (k, chunk) in gy.chunks(p).enumerate() {
                    db[k % out_c] += chunk.iter().sum::<f64>();
                }
                add_into(grads, nodes, b, &db);
            }
        }
        &Op::ConvTranspose2d {
            x,
            w,
            b,
            ref geom,
            in_c,
        } => {
            let n = nodes[x.0].value.shape()[0];
            let p = geom.col_cols();
            let rows = geom.col_rows();
            let out_len = geom.channels * geom.height * geom.width;
            let xv = val(x);
            let wv = val(w);
            if needs(x) || needs(w) {
                let mut cols = vec![0.0; rows * p];
                let mut dx = if needs(x) { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dw = if needs(w) { vec![0.0; wv.len()] } else { Vec::new() };
                for s in 0..n {
                    im2col(&gy[s * out_len..(s + 1) * out_len], geom, &mut cols);
                    if needs(x) {
                        let dxs = &mut dx[s * in_c * p..(s + 1) * in_c * p];
                        gemm(in_c, rows, p, wv, false, &cols, false, dxs, 0.0);
                    }
                    if needs(w) {
                        let xs = &xv[s * in_c * p..(s + 1) * in_c * p];
                        gemm(in_c, p, rows, xs, false, &cols, true, &mut dw, 1.0);
                    }
                }
                if needs(x) {
                    add_into(grads, nodes, x, &dx);
                }
                if needs(w) {
                    add_into(grads, nodes, w, &dw);
                }
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let plane = geom.height * geom.width;
                let co = geom.channels;
                let mut db = vec![0.0; co];
                for (k, chunk) in gy.chunks(plane).enumerate() {
                    db[k % co] += chunk.iter().sum::<f64>();
                }
                add_into(grads, nodes, b, &db);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = nodes[x.0].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let sp: usize = shape[2..].iter().product();
            let gv = val(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * sp;
                    for j in base..base + sp {
                        dgamma[ch] += gy[j] * xhat[j];
                        dbeta[ch] += gy[j];
                    }
                }
            }
            if needs(*x) {
                let mut dx = vec![0.0; gy.len()];
                if *train {
                    let m = (n * sp) as f64;
                    for ch in 0..c {
                        // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                        let sum_d = gv[ch] * dbeta[ch];
                        let sum_dx = gv[ch] * dgamma[ch];
                        for s in 0..n {
                            let base = (s * c + ch) * sp;
                            for j in base..base + sp {
                                let dxh = gy[j] * gv[ch];
                                dx[j] = inv_std[ch] / m * (m * dxh - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    }
                } else {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * sp;
                            for j in base..base + sp {
                                dx[j] = gy[j] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                add_into(grads, nodes, *x, &dx);
            }
            add_into(grads, nodes, *gamma, &dgamma);
            add_into(grads, nodes, *beta, &dbeta);
        }
        &Op::Linear { x, w, b } => {
            let [n, i] = [nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]];
            let o = nodes[w.0].value.shape()[0];
            if needs(x) {
                let mut dx = vec![0.0; n * i];
                gemm(n, o, i, gy, false, val(w), false, &mut dx, 0.0);
                add_into(grads, nodes, x, &dx);
            }
            if needs(w) {
                let mut dw = vec![0.0; o * i];
                gemm(o, n, i, gy, true, val(x), false, &mut dw, 0.0);
                add_into(grads, nodes, w, &dw);
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let mut db = vec![0.0; o];
                for row in gy.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                add_into(grads, nodes, b, &db);
            }
        }
        &Op::Unary { x, kind } => {
            let Some(dx) = slot(grads, nodes, x) else { return };
            let xv = nodes[x.0].value.data();
            let yv = node.value.data();
            for j in 0..gy.len() {
                let d = match kind {
                    Unary::Relu => {
                        if xv[j] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::LeakyRelu(s) => {
                        if xv[j] > 0.0 {
                            1.0
                        } else {
                            s
                        }
                    }
                    Unary::Sigmoid => yv[j] * (1.0 - yv[j]),
                    Unary::Tanh => 1.0 - yv[j] * yv[j],
                    Unary::Softplus => sigmoid(xv[j]),
                    Unary::Exp => yv[j],
                    Unary::LogFloor(fl) => {
                        if xv[j] > fl {
                            1.0 / xv[j]
                        } else {
                            0.0
                        }
                    }
                    Unary::Square => 2.0 * xv[j],
                    Unary::Scale(c) => c,
                    Unary::AddScalar(_) => 1.0,
                };
                dx[j] += gy[j] * d;
            }
        }
        &Op::LogSoftmax(x) => {
            let Some(dx) = slot(grads, nodes, x) else { return };
            let c = node.value.shape()[1];
            for ((drow, grow), yrow) in dx
                .chunks_mut(c)
                .zip(gy.chunks(c))
                .zip(node.value.data().chunks(c))
            {
                let total: f64 = grow.iter().sum();
                for j in 0..c {
                    drow[j] += grow[j] - yrow[j].exp() * total;
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let Some(dx) = slot(grads, nodes, *x) else { return };
            for (g, &i) in gy.iter().zip(argmax) {
                dx[i] += g;
            }
        }
        &Op::GlobalAvgPool(x) => {
            let Some(dx) = slot(grads, nodes, x) else { return };
            let plane = dx.len() / gy.len();
            for (chunk, g) in dx.chunks_mut(plane).zip(gy) {
                let d = g / plane as f64;
                chunk.iter_mut().for_each(|v| *v += d);
            }
        }
        &Op::Reshape(x) => add_into(grads, nodes, x, gy),
        &Op::Add(a, b) => {
            add_into(grads, nodes, a, gy);
            add_into(grads, nodes, b, gy);
        }
        &Op::Sub(a, b) => {
            add_into(grads, nodes, a, gy);
            if let Some(db) = slot(grads, nodes, b) {
                db.iter_mut().zip(gy).for_each(|(d, g)| *d -= g);
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let d: Vec<f64> = gy.iter().zip(val(b)).map(|(g, y)| g * y).collect();
                add_into(grads, nodes, a, &d);
            }
            if needs(b) {
                let d: Vec<f64> = gy.iter().zip(val(a)).map(|(g, x)| g * x).collect();
                add_into(grads, nodes, b, &d);
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().for_each(|v| *v += gy[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                let d = gy[0] / dx.len().max(1) as f64;
                dx.iter_mut().for_each(|v| *v += d);
            }
        }
        &Op::SumPerSample(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                let len = dx.len() / gy.len().max(1);
                for (chunk, g) in dx.chunks_mut(len.max(1)).zip(gy) {
                    chunk.iter_mut().for_each(|v| *v += g);
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let c = nodes[x.0].value.shape()[1];
                for (r, (&i, g)) in idx.iter().zip(gy).enumerate() {
                    dx[r * c + i] += g;
                }
            }
        }
        &Op::ChannelMean(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let m = (n * sp) as f64;
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * sp;
                        dx[base..base + sp].iter_mut().for_each(|v| *v += gy[ch] / m);
                    }
                }
            }
        }
        Op::ChannelVar { x, mean } => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, nodes, *x) {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let m = (n * sp) as f64;
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * sp;
                        for j in base..base + sp {
                            dx[j] += gy[ch] * 2.0 * (xv[j] - mean[ch]) / m;
                        }
                    }
                }
            }
        }
        &Op::Pad { x, pad } => {
            if let Some(dx) = slot(grads, nodes, x) {
                let shape = nodes[x.0].value.shape();
                let (h, w) = (shape[2], shape[3]);
                let pw = w + 2 * pad;
                let ph = h + 2 * pad;
                for plane in 0..shape[0] * shape[1] {
                    for i in 0..h {
                        let src = (plane * ph + i + pad) * pw + pad;
                        let dst = (plane * h + i) * w;
                        dx[dst..dst + w]
                            .iter_mut()
                            .zip(&gy[src..src + w])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
        Op::Resample { x, taps } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let plane_in = shape[2] * shape[3];
                let plane_out = node.value.shape()[2] * node.value.shape()[3];
                for s in 0..n {
                    let t = &taps[if taps.len() == 1 { 0 } else { s }];
                    for ch in 0..c {
                        let p = s * c + ch;
                        let gsrc = &gy[p * plane_out..(p + 1) * plane_out];
                        let dst = &mut dx[p * plane_in..(p + 1) * plane_in];
                        for (g, tp) in gsrc.iter().zip(t) {
                            for k in 0..4 {
                                dst[tp.idx[k]] += tp.w[k] * g;
                            }
                        }
                    }
                }
            }
        }
        Op::HFlip { x, flags } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let shape = nodes[x.0].value.shape();
                let w = shape[3];
                let len = shape[1] * shape[2] * w;
                for (s, &f) in flags.iter().enumerate() {
                    let base = s * len;
                    for r in 0..len / w {
                        let row = base + r * w;
                        for j in 0..w {
                            let src = if f { row + w - 1 - j } else { row + j };
                            dx[row + j] += gy[src];
                        }
                    }
                }
            }
        }
    }
}
