//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a node
//! whose inputs all have smaller ids, so the node order is a topological order
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! Nodes created from frozen inputs are untracked: backward never computes
//! gradients for them, which is also what makes frozen-backbone training
//! cheap (no weight gradients for the backbone are ever formed).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reduce { x: Var, kind: Reduce, axis: Option<usize> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    DwConv { x: Var, kernel: Var, h: usize, w: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Upsample { x: Var, grid_w: usize, patch: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node handle.
///
/// Only tracked ancestors of the loss have entries.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.get(v).is_some()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the second operand of a binary op maps onto the first.
enum Bcast {
    Same,
    /// `b` equals a trailing block of `a`; index is `i % len`.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        if b.len() > a.len() {
            return dim_err(format!("cannot broadcast {b:?} onto {a:?}"));
        }
        let off = a.len() - b.len();
        for (j, &bj) in b.iter().enumerate() {
            if bj != 1 && bj != a[off + j] {
                return dim_err(format!("cannot broadcast {b:?} onto {a:?}"));
            }
        }
        if b.iter().all(|&s| s != 1) || b.iter().product::<usize>() == 1 {
            return Ok(Bcast::Cycle(b.iter().product()));
        }
        // General case: size-1 axes stretch.
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for j in (0..b.len()).rev() {
            if b[j] != 1 {
                strides[off + j] = s;
            }
            s *= b[j];
        }
        let n: usize = a.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..a.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < a[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Bcast::Map(map))
    }

    /// `dst[index(i)] += f(src[i], i)` for every `i`.
    fn scatter(&self, src: &[f64], dst: &mut [f64], f: impl Fn(f64, usize) -> f64) {
        match self {
            Bcast::Same => dst.iter_mut().zip(src).enumerate().for_each(|(i, (d, &s))| *d += f(s, i)),
            Bcast::Cycle(n) => {
                for (c, chunk) in src.chunks(*n).enumerate() {
                    for (j, (d, &s)) in dst.iter_mut().zip(chunk).enumerate() {
                        *d += f(s, c * n + j);
                    }
                }
            }
            Bcast::Map(m) => src.iter().zip(m).enumerate().for_each(|(i, (&s, &j))| dst[j] += f(s, i)),
        }
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact-erf GeLU on a plain number.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
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

    /// Places a tensor on the graph; `tracked` inputs receive gradients.
    pub fn input(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Input, tracked)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.input(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims2(&self, v: Var) -> Result<[usize; 2]> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.dims2(a)?;
        let [k2, n] = self.dims2(b)?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), tracked))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        let bc = Bcast::new(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data = match &bc {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Cycle(n) => {
                let mut out = Vec::with_capacity(ad.len());
                for chunk in ad.chunks(*n) {
                    out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Bcast::Map(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] * c);
        let tracked = self.tracked_any(&[a]);
        self.push(out, Op::Scale(a, c), tracked)
    }

    /// Sum or mean over one axis (removed from the shape) or over everything.
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = match axis {
            None => {
                let s: f64 = xv.data().iter().sum();
                let v = match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / xv.numel() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return dim_err(format!("axis {ax} out of range for shape {shape:?}"));
                }
                let outer: usize = shape[..ax].iter().product();
                let len = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let dst = &mut data[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduce::Mean {
                    data.iter_mut().for_each(|d| *d /= len as f64);
                }
                let mut out_shape: Vec<usize> = shape[..ax].to_vec();
                out_shape.extend_from_slice(&shape[ax + 1..]);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Tensor::new(out_shape, data)?
            }
        };
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Reduce { x, kind, axis }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::Sum, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::Mean, None).expect("full reduction")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).t()?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Transpose(x), tracked))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.dims2(x)?;
        if len == 0 || start + len > n {
            return dim_err(format!("column slice {start}..{} of width {n}", start + len));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new([m, len], data)?, Op::SliceCols { x, start }, tracked))
    }

    /// Per-row standardization followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [n, c] = self.dims2(x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return dim_err(format!(
                "layer norm over {c} channels with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked_any(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new([n, c], out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            tracked,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape().to_vec(), |i| gelu_scalar(xv.data()[i]));
        let tracked = self.tracked_any(&[x]);
        self.push(out, Op::Gelu(x), tracked)
    }

    /// Depth-wise 2-D convolution on a row-major token grid.
    ///
    /// `x` is `[h*w, c]`, `kernel` is `[c, k, k]` with odd `k`. Stride 1 and
    /// zero padding of `(k-1)/2` keep the grid size unchanged. Computes the
    /// cross-correlation `out[i,j,ch] = Σ K[ch,a,b] · x[i+a-p, j+b-p, ch]`.
    pub fn dwconv2d(&mut self, x: Var, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c] = self.dims2(x)?;
        if h * w != n {
            return dim_err(format!("grid {h}x{w} does not hold {n} tokens"));
        }
        let kshape = self.shape(kernel).to_vec();
        let k = match kshape[..] {
            [kc, k1, k2] if k1 == k2 => {
                if k1 % 2 == 0 {
                    return Err(Error::Config(format!("depth-wise kernel size {k1} is even")));
                }
                if kc != c {
                    return dim_err(format!("kernel has {kc} channels, grid has {c}"));
                }
                k1
            }
            _ => return dim_err(format!("depth-wise kernel shape {kshape:?}")),
        };
        let taps = kernel_taps(self.value(kernel).data(), c, k);
        let mut out = vec![0.0; n * c];
        conv_taps(self.value(x).data(), &taps, &mut out, h, w, c, k);
        let tracked = self.tracked_any(&[x, kernel]);
        Ok(self.push(Tensor::new([n, c], out)?, Op::DwConv { x, kernel, h, w }, tracked))
    }

    /// Unmasked softmax attention over already-projected `q`, `k`, `v`
    /// (each `[n, d]`), split into `heads` contiguous column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let [n, d] = self.dims2(q)?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return dim_err(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            heads,
        );
        let tracked = self.tracked_any(&[q, k, v]);
        Ok(self.push(Tensor::new([n, d], out)?, Op::Attention { q, k, v, heads, probs }, tracked))
    }

    /// Nearest-neighbour upsampling of per-token values `[gh*gw, c]` to a
    /// channel-first pixel map `[c, gh*patch, gw*patch]`.
    pub fn upsample_tokens(&mut self, x: Var, grid_h: usize, grid_w: usize, patch: usize) -> Result<Var> {
        let [n, c] = self.dims2(x)?;
        if grid_h * grid_w != n || patch == 0 {
            return dim_err(format!("grid {grid_h}x{grid_w} does not hold {n} tokens"));
        }
        let (ph, pw) = (grid_h * patch, grid_w * patch);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for y in 0..ph {
                for xx in 0..pw {
                    let t = (y / patch) * grid_w + xx / patch;
                    out[(ch * ph + y) * pw + xx] = xd[t * c + ch];
                }
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new([c, ph, pw], out)?, Op::Upsample { x, grid_w, patch }, tracked))
    }

    /// Mean softmax cross-entropy of channel-first logits `[classes, ...]`
    /// against one label per trailing position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = shape[0];
        let positions: usize = shape[1..].iter().product();
        if labels.len() != positions {
            return dim_err(format!("{} labels for logits of shape {shape:?}", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return dim_err(format!("label {bad} outside {classes} classes"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; classes * positions];
        let mut loss = 0.0;
        for (p, &label) in labels.iter().enumerate() {
            let max = (0..classes).map(|c| ld[c * positions + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (ld[c * positions + p] - max).exp();
                probs[c * positions + p] = e;
                z += e;
            }
            for c in 0..classes {
                probs[c * positions + p] /= z;
            }
            loss += max + z.ln() - ld[label * positions + p];
        }
        let loss = loss / positions as f64;
        let tracked = self.tracked_any(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar, tracked loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Contract("loss does not depend on any tracked tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].tracked)
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Input => {}
            &Op::MatMul(a, b) => {
                let [m, k] = self.value(a).dims2().unwrap();
                let n = self.value(b).shape()[1];
                if self.want(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(g, self.value(b).data(), &mut da, m, n, k);
                    acc(grads, a, da);
                }
                if self.want(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(self.value(a).data(), g, &mut db, m, k, n);
                    acc(grads, b, db);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.want(a) {
                    acc(grads, a, g.to_vec());
                }
                if self.want(b) {
                    let bc = Bcast::new(self.shape(a), self.shape(b)).unwrap();
                    let mut db = vec![0.0; self.value(b).numel()];
                    bc.scatter(g, &mut db, |gi, _| sign * gi);
                    acc(grads, b, db);
                }
            }
            &Op::Mul(a, b) => {
                let bc = Bcast::new(self.shape(a), self.shape(b)).unwrap();
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.want(a) {
                    let da = g.iter().enumerate().map(|(i, gi)| gi * bd[bc.index(i)]).collect();
                    acc(grads, a, da);
                }
                if self.want(b) {
                    let mut db = vec![0.0; bd.len()];
                    bc.scatter(g, &mut db, |gi, i| gi * ad[i]);
                    acc(grads, b, db);
                }
            }
            &Op::Scale(a, c) => {
                if self.want(a) {
                    acc(grads, a, g.iter().map(|gi| gi * c).collect());
                }
            }
            &Op::Reduce { x, kind, axis } => {
                if !self.want(x) {
                    return;
                }
                let shape = self.shape(x);
                let numel = self.value(x).numel();
                let dx = match axis {
                    None => {
                        let s = match kind {
                            Reduce::Sum => g[0],
                            Reduce::Mean => g[0] / numel as f64,
                        };
                        vec![s; numel]
                    }
                    Some(ax) => {
                        let len = shape[ax];
                        let inner: usize = shape[ax + 1..].iter().product();
                        let scale = if kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                        (0..numel)
                            .map(|i| {
                                let o = i / (len * inner);
                                g[o * inner + i % inner] * scale
                            })
                            .collect()
                    }
                };
                acc(grads, x, dx);
            }
            &Op::Transpose(x) => {
                if self.want(x) {
                    let [m, n] = self.value(x).dims2().unwrap();
                    acc(grads, x, transpose(g, n, m));
                }
            }
            &Op::SliceCols { x, start } => {
                if self.want(x) {
                    let [m, n] = self.value(x).dims2().unwrap();
                    let len = node.value.shape()[1];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(grads, x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let [n, c] = self.value(*x).dims2().unwrap();
                if self.want(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.want(*bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    acc(grads, *bias, db);
                }
                if self.want(*x) {
                    let gd = self.value(*gain).data();
                    let mut dx = vec![0.0; n * c];
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = g[i * c + j] * gd[j];
                            mean_d += d;
                            mean_dh += d * xhat[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = g[i * c + j] * gd[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dh);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            &Op::Gelu(x) => {
                if self.want(x) {
                    let xd = self.value(x).data();
                    let dx = g
                        .iter()
                        .zip(xd)
                        .map(|(gi, &xi)| gi * (std_normal_cdf(xi) + xi * std_normal_pdf(xi)))
                        .collect();
                    acc(grads, x, dx);
                }
            }
            &Op::DwConv { x, kernel, h, w } => {
                let [n, c] = self.value(x).dims2().unwrap();
                let k = self.shape(kernel)[1];
                if self.want(x) {
                    // Adjoint of a same-padded correlation: correlate with the
                    // spatially flipped kernel.
                    let kd = self.value(kernel).data();
                    let mut flipped = vec![0.0; kd.len()];
                    for ch in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                flipped[(ch * k + a) * k + b] = kd[(ch * k + (k - 1 - a)) * k + (k - 1 - b)];
                            }
                        }
                    }
                    let taps = kernel_taps(&flipped, c, k);
                    let mut dx = vec![0.0; n * c];
                    conv_taps(g, &taps, &mut dx, h, w, c, k);
                    acc(grads, x, dx);
                }
                if self.want(kernel) {
                    let dk = dwconv_kernel_grad(self.value(x).data(), g, h, w, c, k);
                    acc(grads, kernel, dk);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let [n, d] = self.value(*q).dims2().unwrap();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    n,
                    d,
                    *heads,
                );
                if self.want(*q) {
                    acc(grads, *q, dq);
                }
                if self.want(*k) {
                    acc(grads, *k, dk);
                }
                if self.want(*v) {
                    acc(grads, *v, dv);
                }
            }
            &Op::Upsample { x, grid_w, patch } => {
                if self.want(x) {
                    let [n, c] = self.value(x).dims2().unwrap();
                    let (ph, pw) = (node.value.shape()[1], node.value.shape()[2]);
                    let mut dx = vec![0.0; n * c];
                    for ch in 0..c {
                        for y in 0..ph {
                            for xx in 0..pw {
                                let t = (y / patch) * grid_w + xx / patch;
                                dx[t * c + ch] += g[(ch * ph + y) * pw + xx];
                            }
                        }
                    }
                    acc(grads, x, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.want(*logits) {
                    let positions = labels.len();
                    let scale = g[0] / positions as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (p, &label) in labels.iter().enumerate() {
                        dl[label * positions + p] -= scale;
                    }
                    acc(grads, *logits, dl);
                }
            }
        }
    }
}

/// Re-lays a `[c, k, k]` kernel as `[k*k, c]` so each tap is a contiguous
/// channel vector.
fn kernel_taps(kernel: &[f64], c: usize, k: usize) -> Vec<f64> {
    let mut taps = vec![0.0; k * k * c];
    for ch in 0..c {
        for t in 0..k * k {
            taps[t * c + ch] = kernel[ch * k * k + t];
        }
    }
    taps
}

#[allow(clippy::too_many_arguments)]
fn conv_taps(x: &[f64], taps: &[f64], out: &mut [f64], h: usize, w: usize, c: usize, k: usize) {
    let p = (k - 1) / 2;
    for a in 0..k {
        for b in 0..k {
            let tap = &taps[(a * k + b) * c..(a * k + b + 1) * c];
            if tap.iter().all(|&t| t == 0.0) {
                continue;
            }
            // Output rows i whose source row i + a - p is inside the grid.
            let i_lo = p.saturating_sub(a);
            let i_hi = (h + p).saturating_sub(a).min(h);
            let j_lo = p.saturating_sub(b);
            let j_hi = (w + p).saturating_sub(b).min(w);
            for i in i_lo..i_hi {
                let si = i + a - p;
                for j in j_lo..j_hi {
                    let sj = j + b - p;
                    let src = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let dst = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
                    for ((o, &s), &t) in dst.iter_mut().zip(src).zip(tap) {
                        *o += s * t;
                    }
                }
            }
        }
    }
}

fn dwconv_kernel_grad(x: &[f64], g: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let p = (k - 1) / 2;
    let mut dtaps = vec![0.0; k * k * c];
    for a in 0..k {
        for b in 0..k {
            let dtap = &mut dtaps[(a * k + b) * c..(a * k + b + 1) * c];
            let i_lo = p.saturating_sub(a);
            let i_hi = (h + p).saturating_sub(a).min(h);
            let j_lo = p.saturating_sub(b);
            let j_hi = (w + p).saturating_sub(b).min(w);
            for i in i_lo..i_hi {
                let si = i + a - p;
                for j in j_lo..j_hi {
                    let sj = j + b - p;
                    let src = &x[(si * w + sj) * c..(si * w + sj + 1) * c];
                    let gr = &g[(i * w + j) * c..(i * w + j + 1) * c];
                    for ((d, &s), &gv) in dtap.iter_mut().zip(src).zip(gr) {
                        *d += s * gv;
                    }
                }
            }
        }
    }
    let mut dk = vec![0.0; c * k * k];
    for ch in 0..c {
        for t in 0..k * k {
            dk[ch * k * k + t] = dtaps[t * c + ch];
        }
    }
    dk
}

fn head_cols(x: &[f64], n: usize, d: usize, start: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x[i * d + start..i * d + start + dh]);
    }
    out
}

/// Returns the output `[n, d]` and the softmax weights `[heads, n, n]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for hd in 0..heads {
        let qh = head_cols(q, n, d, hd * dh, dh);
        let kt = transpose(&head_cols(k, n, d, hd * dh, dh), n, dh);
        let vh = head_cols(v, n, d, hd * dh, dh);
        let p = &mut probs[hd * n * n..(hd + 1) * n * n];
        gemm_acc(&qh, &kt, p, n, dh, n);
        for row in p.chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        let mut oh = vec![0.0; n * dh];
        gemm_acc(p, &vh, &mut oh, n, n, dh);
        for i in 0..n {
            out[i * d + hd * dh..i * d + (hd + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
    for hd in 0..heads {
        let p = &probs[hd * n * n..(hd + 1) * n * n];
        let qh = head_cols(q, n, d, hd * dh, dh);
        let kh = head_cols(k, n, d, hd * dh, dh);
        let vh = head_cols(v, n, d, hd * dh, dh);
        let go = head_cols(g, n, d, hd * dh, dh);
        // dV = Pᵀ dO
        let mut dvh = vec![0.0; n * dh];
        gemm_tn_acc(p, &go, &mut dvh, n, n, dh);
        // dP = dO Vᵀ
        let mut dp = vec![0.0; n * n];
        gemm_acc(&go, &transpose(&vh, n, dh), &mut dp, n, dh, n);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/sqrt(dh) scale.
        for i in 0..n {
            let row_p = &p[i * n..(i + 1) * n];
            let row_dp = &mut dp[i * n..(i + 1) * n];
            let dot: f64 = row_p.iter().zip(row_dp.iter()).map(|(a, b)| a * b).sum();
            for (dpv, &pv) in row_dp.iter_mut().zip(row_p) {
                *dpv = pv * (*dpv - dot) * scale;
            }
        }
        let mut dqh = vec![0.0; n * dh];
        gemm_acc(&dp, &kh, &mut dqh, n, n, dh);
        let mut dkh = vec![0.0; n * dh];
        gemm_tn_acc(&dp, &qh, &mut dkh, n, n, dh);
        for i in 0..n {
            let cols = i * d + hd * dh..i * d + (hd + 1) * dh;
            dq[cols.clone()].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
            dk[cols.clone()].copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
            dv[cols].copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
        }
    }
    (dq, dk, dv)
}
