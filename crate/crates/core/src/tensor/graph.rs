use super::kernels::{self, ConvGeom};
use super::{Elem, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-position visibility for a `[batch, channels, h, w]` feature map;
/// `visible` is laid out `[batch, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialMask {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub visible: Vec<bool>,
}

impl SpatialMask {
    pub fn all_visible(batch: usize, h: usize, w: usize) -> Self {
        Self { batch, h, w, visible: vec![true; batch * h * w] }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    MaskSpatial(Var, SpatialMask),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastLeading(Var, usize),
    GatherRows(Var, Vec<Vec<usize>>),
    ScatterRows(Var, Vec<Vec<usize>>),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, probs: Vec<T>, heads: usize },
    MaxPool2(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    MeanLast(Var),
    VarLast(Var),
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
}

#[derive(Clone, Debug)]
struct Node<T: Elem> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are stored in insertion order, which is a
/// topological order; [`Graph::backward`] walks it in exact reverse.
///
/// A graph is built for one forward pass and dropped afterwards.
#[derive(Debug)]
pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    macs: u64,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(format!("{}: shapes {:?} and {:?} differ", op, a, b));
    }
    Ok(())
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by conv, linear and attention nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last [`backward`](Self::backward) call. `None` for nodes
    /// that do not require a gradient or before any backward pass; nodes the
    /// loss does not reach hold an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let data = self.data(a).iter().map(|&x| x + s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Sets every channel of masked positions of an NCHW map to exactly zero.
    /// Values are assigned, not multiplied, so non-finite inputs at masked
    /// positions cannot leak through as NaN.
    pub fn mask_spatial(&mut self, a: Var, mask: &SpatialMask) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[0] != mask.batch || s[2] != mask.h || s[3] != mask.w {
            return shape_err(format!("mask {}x{}x{} does not match feature map {:?}", mask.batch, mask.h, mask.w, s));
        }
        let mut data = self.data(a).to_vec();
        zero_masked(&mut data, &s, mask);
        let value = Tensor::new(s, data)?;
        Ok(self.push(value, Op::MaskSpatial(a, mask.clone()), &[a]))
    }

    // ----- shape -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return shape_err(format!("{:?} is not a permutation of the axes of {:?}", axes, s));
        }
        let data = kernels::permute(self.data(a), &s, axes);
        let value = Tensor::new(axes.iter().map(|&x| s[x]).collect(), data)?;
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn broadcast_leading(&mut self, a: Var, n: usize) -> Var {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(shape, data).expect("consistent");
        self.push(value, Op::BroadcastLeading(a, n), &[a])
    }

    /// `[B, N, C]` → `[B, K, C]` taking rows `idx[b]` from batch element `b`.
    pub fn gather_rows(&mut self, a: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (b, n, c) = rows3(self.shape(a), "gather_rows")?;
        let k = check_row_index(idx, b, n, false)?;
        let src = self.data(a);
        let mut data = Vec::with_capacity(b * k * c);
        for (bi, rows) in idx.iter().enumerate() {
            for &r in rows {
                let off = (bi * n + r) * c;
                data.extend_from_slice(&src[off..off + c]);
            }
        }
        let value = Tensor::new(vec![b, k, c], data)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// `[B, K, C]` → `[B, n, C]`, placing row `j` of batch `b` at `idx[b][j]`
    /// and zero elsewhere. Indices within a batch element must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[Vec<usize>], n: usize) -> Result<Var> {
        let (b, k, c) = rows3(self.shape(a), "scatter_rows")?;
        let kk = check_row_index(idx, b, n, true)?;
        if kk != k {
            return shape_err(format!("scatter_rows: {} rows but {} indices", k, kk));
        }
        let src = self.data(a);
        let mut data = vec![T::ZERO; b * n * c];
        for (bi, rows) in idx.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                let s = (bi * k + j) * c;
                let d = (bi * n + r) * c;
                data[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let value = Tensor::new(vec![b, n, c], data)?;
        Ok(self.push(value, Op::ScatterRows(a, idx.to_vec()), &[a]))
    }

    // ----- dense layers -----

    /// Affine map along the last axis; `w` is `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if ws.len() != 2 || ws[1] != din || self.shape(b) != [ws[0]] {
            return shape_err(format!("linear: input {:?}, weight {:?}, bias {:?}", xs, ws, self.shape(b)));
        }
        let dout = ws[0];
        let rows = self.value(x).numel() / din.max(1);
        let data = kernels::linear_forward(self.data(x), self.data(w), self.data(b), rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.macs += (rows * din * dout) as u64;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Dense 2-D convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_grouped(x, w, b, stride, padding, 1)
    }

    /// Shape-preserving depthwise convolution; the kernel side must be odd and
    /// `padding` must equal `(k - 1) / 2`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] {
            return shape_err(format!("depthwise weight must be [C, 1, k, k], got {:?}", ws));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {}", k)));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::Config(format!(
                "depthwise padding must be {} for kernel {}, got {}",
                (k - 1) / 2,
                k,
                padding
            )));
        }
        if xs.len() != 4 || xs[1] != ws[0] {
            return shape_err(format!("depthwise input {:?} vs weight {:?}", xs, ws));
        }
        self.conv_grouped(x, w, b, 1, padding, xs[1])
    }

    fn conv_grouped(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if self.shape(b) != [geom.cout] {
            return shape_err(format!("conv bias {:?} for {} output channels", self.shape(b), geom.cout));
        }
        let data = kernels::conv_forward(&geom, self.data(x), self.data(w), self.data(b));
        self.macs += geom.macs();
        let value = Tensor::new(geom.out_shape(), data)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xs,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(self.data(x), self.data(gamma), self.data(beta), d, eps);
        let value = Tensor::new(xs, y)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Softmax attention over `[B, heads, N, Dh]` with scale `1/sqrt(Dh)` and an
    /// optional additive bias `[heads, N, N]` shared over the batch.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        check_same("attention q/k", &qs, self.shape(k))?;
        check_same("attention q/v", &qs, self.shape(v))?;
        if qs.len() != 4 {
            return shape_err(format!("attention expects [B, heads, N, Dh], got {:?}", qs));
        }
        let (b, heads, n, dh) = (qs[0], qs[1], qs[2], qs[3]);
        if let Some(bv) = bias {
            if self.shape(bv) != [heads, n, n] {
                return shape_err(format!("attention bias {:?}, expected [{}, {}, {}]", self.shape(bv), heads, n, n));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            bias.map(|bv| self.data(bv)),
            b * heads,
            heads,
            n,
            dh,
        );
        self.macs += (2 * b * heads * n * n * dh) as u64;
        let value = Tensor::new(qs, out)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.push(value, Op::Attention { q, k, v, bias, probs, heads }, &inputs))
    }

    /// 2x2 stride-2 max pooling over NCHW; spatial extents must be even.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return shape_err(format!("max_pool2d needs NCHW with even H, W; got {:?}", s));
        }
        let (out, arg) = kernels::max_pool2_forward(self.data(x), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(value, Op::MaxPool2(x, arg), &[x]))
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.data(a) {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.data(a) {
            acc += v;
        }
        let n = self.value(a).numel().max(1);
        self.push(Tensor::scalar(acc / T::from_f64(n as f64)), Op::MeanAll(a), &[a])
    }

    /// Mean over the last axis; the axis is kept with extent 1.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let (shape, d) = last_axis(self.shape(a))?;
        let inv = T::from_f64(1.0 / d as f64);
        let data = self
            .data(a)
            .chunks(d)
            .map(|row| {
                let mut acc = T::ZERO;
                for &v in row {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanLast(a), &[a]))
    }

    /// Population variance over the last axis; the axis is kept with extent 1.
    pub fn var_last(&mut self, a: Var) -> Result<Var> {
        let (shape, d) = last_axis(self.shape(a))?;
        let inv = T::from_f64(1.0 / d as f64);
        let data = self
            .data(a)
            .chunks(d)
            .map(|row| {
                let mut mean = T::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv;
                let mut acc = T::ZERO;
                for &v in row {
                    acc += (v - mean) * (v - mean);
                }
                acc * inv
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::VarLast(a), &[a]))
    }

    // ----- patches -----

    /// `[B, C, H, W]` → `[B, (H/p)(W/p), p*p*C]`; each patch is flattened in
    /// (row, column, channel) order and patches are numbered row-major.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
            return shape_err(format!("cannot cut {:?} into {}x{} patches", s, patch, patch));
        }
        let data = patchify_data(self.data(x), &s, patch);
        let (gh, gw) = (s[2] / patch, s[3] / patch);
        let value = Tensor::new(vec![s[0], gh * gw, patch * patch * s[1]], data)?;
        Ok(self.push(value, Op::Patchify { x, patch }, &[x]))
    }

    /// Inverse of [`patchify`](Self::patchify) for a square image of `channels`.
    pub fn unpatchify(&mut self, x: Var, patch: usize, channels: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let side = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
        if s.len() != 3 || patch == 0 || side * side != s[1] || s[2] != patch * patch * channels {
            return shape_err(format!("cannot unpatchify {:?} with patch {} and {} channels", s, patch, channels));
        }
        let img_shape = [s[0], channels, side * patch, side * patch];
        let data = unpatchify_data(self.data(x), &img_shape, patch);
        let value = Tensor::new(img_shape.to_vec(), data)?;
        Ok(self.push(value, Op::Unpatchify { x, patch }, &[x]))
    }

    // ----- backward -----

    /// Reverse pass from a one-element `loss`. Gradients of a previous call are
    /// discarded. Afterwards every node that requires a gradient holds one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if self.nodes[i].requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || gd.to_vec());
                self.acc(grads, *b, || gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, || gd.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                self.acc(grads, *b, || gd.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, s) => self.acc(grads, *a, || gd.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, || gd.to_vec()),
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, || gd.iter().zip(x).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect());
            }
            Op::MaskSpatial(a, mask) => {
                self.acc(grads, *a, || {
                    let mut d = gd.to_vec();
                    zero_masked(&mut d, g.shape(), mask);
                    d
                });
            }
            Op::Permute(a, axes) => {
                self.acc(grads, *a, || kernels::permute(gd, g.shape(), &kernels::inverse_axes(axes)));
            }
            Op::BroadcastLeading(a, n) => {
                self.acc(grads, *a, || {
                    let m = gd.len() / n;
                    let mut d = vec![T::ZERO; m];
                    for chunk in gd.chunks(m) {
                        for (x, &y) in d.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    d
                });
            }
            Op::GatherRows(a, idx) => {
                let n = self.shape(*a)[1];
                let c = g.shape()[2];
                let k = g.shape()[1];
                self.acc(grads, *a, || {
                    let mut d = vec![T::ZERO; idx.len() * n * c];
                    for (bi, rows) in idx.iter().enumerate() {
                        for (j, &r) in rows.iter().enumerate() {
                            let s = (bi * k + j) * c;
                            let t = (bi * n + r) * c;
                            for q in 0..c {
                                d[t + q] += gd[s + q];
                            }
                        }
                    }
                    d
                });
            }
            Op::ScatterRows(a, idx) => {
                let n = g.shape()[1];
                let c = g.shape()[2];
                self.acc(grads, *a, || {
                    let mut d = Vec::with_capacity(self.value(*a).numel());
                    for (bi, rows) in idx.iter().enumerate() {
                        for &r in rows {
                            let off = (bi * n + r) * c;
                            d.extend_from_slice(&gd[off..off + c]);
                        }
                    }
                    d
                });
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / din.max(1);
                let (dx, dw, db) = kernels::linear_backward(self.data(*x), self.data(*w), gd, rows, din, dout);
                self.acc(grads, *x, || dx);
                self.acc(grads, *w, || dw);
                self.acc(grads, *b, || db);
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(geom, self.data(*x), self.data(*w), gd);
                self.acc(grads, *x, || dx);
                self.acc(grads, *w, || dw);
                self.acc(grads, *b, || db);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let (dx, dg, db) = kernels::layer_norm_backward(xhat, rstd, self.data(*gamma), gd, d);
                self.acc(grads, *x, || dx);
                self.acc(grads, *gamma, || dg);
                self.acc(grads, *beta, || db);
            }
            Op::Attention { q, k, v, bias, probs, heads } => {
                let s = g.shape();
                let (dq, dk, dv, dbias) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    gd,
                    s[0] * s[1],
                    *heads,
                    s[2],
                    s[3],
                );
                self.acc(grads, *q, || dq);
                self.acc(grads, *k, || dk);
                self.acc(grads, *v, || dv);
                if let Some(bv) = bias {
                    self.acc(grads, *bv, || dbias);
                }
            }
            Op::MaxPool2(a, arg) => {
                self.acc(grads, *a, || {
                    let mut d = vec![T::ZERO; self.value(*a).numel()];
                    for (&src, &dv) in arg.iter().zip(gd) {
                        d[src] += dv;
                    }
                    d
                });
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, || vec![gd[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let v = gd[0] / T::from_f64(n.max(1) as f64);
                self.acc(grads, *a, || vec![v; n]);
            }
            Op::MeanLast(a) => {
                let d = *self.shape(*a).last().unwrap();
                let inv = T::from_f64(1.0 / d as f64);
                self.acc(grads, *a, || gd.iter().flat_map(|&v| std::iter::repeat(v * inv).take(d)).collect());
            }
            Op::VarLast(a) => {
                let d = *self.shape(*a).last().unwrap();
                let x = self.data(*a);
                self.acc(grads, *a, || {
                    let inv = T::from_f64(1.0 / d as f64);
                    let two = T::from_f64(2.0);
                    let mut out = Vec::with_capacity(x.len());
                    for (row, &gv) in x.chunks(d).zip(gd) {
                        let mut mean = T::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv;
                        for &v in row {
                            out.push(gv * two * (v - mean) * inv);
                        }
                    }
                    out
                });
            }
            Op::Patchify { x, patch } => {
                let xs = self.shape(*x).to_vec();
                self.acc(grads, *x, || unpatchify_data(gd, &xs, *patch));
            }
            Op::Unpatchify { x, patch } => {
                self.acc(grads, *x, || patchify_data(gd, g.shape(), *patch));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let delta = f();
        match &mut grads[v.0] {
            Some(existing) => {
                for (x, y) in existing.data_mut().iter_mut().zip(delta) {
                    *x += y;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), delta).expect("gradient shape"));
            }
        }
    }
}

fn zero_masked<T: Elem>(data: &mut [T], shape: &[usize], mask: &SpatialMask) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    for b in 0..shape[0] {
        for p in 0..hw {
            if !mask.visible[b * hw + p] {
                for ch in 0..c {
                    data[(b * c + ch) * hw + p] = T::ZERO;
                }
            }
        }
    }
}

fn rows3(s: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if s.len() != 3 {
        return shape_err(format!("{} expects [B, N, C], got {:?}", op, s));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_row_index(idx: &[Vec<usize>], b: usize, n: usize, distinct: bool) -> Result<usize> {
    if idx.len() != b {
        return shape_err(format!("{} index lists for batch of {}", idx.len(), b));
    }
    let k = idx.first().map_or(0, |r| r.len());
    for rows in idx {
        if rows.len() != k {
            return shape_err("row index lists must have equal length across the batch");
        }
        let mut seen = vec![false; n];
        for &r in rows {
            if r >= n {
                return Err(Error::Invariant(format!("row index {} out of range for {} rows", r, n)));
            }
            if distinct && std::mem::replace(&mut seen[r], true) {
                return Err(Error::Invariant(format!("duplicate scatter index {}", r)));
            }
        }
    }
    Ok(k)
}

fn last_axis(s: &[usize]) -> Result<(Vec<usize>, usize)> {
    match s.last() {
        Some(&d) if d > 0 => {
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = 1;
            Ok((shape, d))
        }
        _ => shape_err(format!("reduction over last axis of {:?}", s)),
    }
}

pub(crate) fn patchify_data<T: Elem>(x: &[T], s: &[usize], p: usize) -> Vec<T> {
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for xx in 0..p {
                        for ch in 0..c {
                            out.push(x[((bi * c + ch) * h + py * p + y) * w + px * p + xx]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify_data<T: Elem>(x: &[T], img: &[usize], p: usize) -> Vec<T> {
    let (b, c, h, w) = (img[0], img[1], img[2], img[3]);
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![T::ZERO; x.len()];
    let mut i = 0;
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for xx in 0..p {
                        for ch in 0..c {
                            out[((bi * c + ch) * h + py * p + y) * w + px * p + xx] = x[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}
