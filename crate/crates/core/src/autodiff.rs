//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, ConvGrads};
use crate::scalar::{c, Scalar};
use crate::tensor::{for_each_broadcast, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; stride 1 preserves `(h, w)`.
    Same,
    Valid,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise3x3 {
        x: Var,
        w: Var,
    },
    /// `gamma * xhat + beta`. With `batch_stats`, `xhat` was standardized with
    /// statistics of this very batch and the backward pass accounts for it.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    AvgPool2x2(Var),
    Concat(Vec<Var>),
    GroupMean {
        x: Var,
        k: usize,
    },
    Softmax(Var),
    FocalLoss {
        logits: Var,
        labels: Vec<usize>,
        gamma: T,
        probs: Vec<T>,
        log_probs: Vec<T>,
    },
    SelectChannel {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

/// Operation recorder and gradient store.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    ///
    /// `None` when `v` does not require a gradient or is not connected to the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_vec(self.shape(v), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("add: {sa} vs {sb}"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(sa, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may have singleton dims broadcast onto `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul_broadcast(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Cross-correlation with kernel `(kh, kw, in_c, out_c)` and optional bias `(1, 1, 1, out_c)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x);
        let [kh, kw, cin, cout] = self.shape(w).dims();
        if xs.c() != cin {
            return Err(shape_err!("conv2d: input has {} channels, kernel expects {cin}", xs.c()));
        }
        if let Some(b) = b {
            if self.shape(b) != Shape::vector(cout) {
                return Err(shape_err!("conv2d: bias {} for {cout} outputs", self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be ≥ 1".into()));
        }
        let (pad_y, pad_x) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Config(format!("same padding needs odd kernel, got {kh}×{kw}")));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        let (h, wd) = (xs.h(), xs.w());
        if h + 2 * pad_y < kh || wd + 2 * pad_x < kw {
            return Err(shape_err!("conv2d: {kh}×{kw} kernel larger than padded input {xs}"));
        }
        let geom = ConvGeom {
            n: xs.n(),
            h,
            w: wd,
            cin,
            oh: (h + 2 * pad_y - kh) / stride + 1,
            ow: (wd + 2 * pad_x - kw) / stride + 1,
            cout,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::from_vec(Shape::new(geom.n, geom.oh, geom.ow, cout), data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel 3×3 convolution with same padding; kernel `(3, 3, c, 1)`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws != Shape::new(3, 3, xs.c(), 1) {
            return Err(shape_err!("depthwise3x3: kernel {ws} for input {xs}"));
        }
        let [n, h, wd, ch] = xs.dims();
        let data = kernels::depthwise3x3_forward(self.value(x).data(), self.value(w).data(), n, h, wd, ch);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::from_vec(xs, data)?, Op::Depthwise3x3 { x, w }, rg))
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// With `stats = None` the batch's own statistics are used (training) and
    /// returned; otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x);
        let ch = xs.c();
        for p in [gamma, beta] {
            if self.shape(p) != Shape::vector(ch) {
                return Err(shape_err!("batch_norm: parameter {} for {ch} channels", self.shape(p)));
            }
        }
        let m = xs.numel() / ch;
        let xd = self.value(x).data();
        let (mean, var, batch) = match stats {
            Some((mean, var)) => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err!("batch_norm: running stats length for {ch} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in training mode needs at least 2 values per channel".into(),
                    ));
                }
                let mut mean = vec![T::zero(); ch];
                for row in xd.chunks_exact(ch) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let inv_m = T::one() / T::from_usize_lossy(m);
                mean.iter_mut().for_each(|a| *a *= inv_m);
                let mut var = vec![T::zero(); ch];
                for row in xd.chunks_exact(ch) {
                    for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - mu;
                        *a += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a *= inv_m);
                (
                    mean.clone(),
                    var.clone(),
                    Some(BatchStats { mean, var }),
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(ch) {
            for j in 0..ch {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat.push(xh);
                out.push(g[j] * xh + bt[j]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let batch_stats = batch.is_some();
        let v = self.push(
            Tensor::from_vec(xs, out)?,
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
        Ok((v, batch))
    }

    /// Spatial max per `(n, c)`; ties resolve to the first position in row-major scan.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let [n, h, w, ch] = xs.dims();
        let xd = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n * ch];
        let mut argmax = vec![0usize; n * ch];
        for i in 0..n {
            for p in 0..h * w {
                let base = (i * h * w + p) * ch;
                for j in 0..ch {
                    let v = xd[base + j];
                    if v > out[i * ch + j] || p == 0 {
                        out[i * ch + j] = v;
                        argmax[i * ch + j] = base + j;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let t = Tensor::from_vec(Shape::new(n, 1, 1, ch), out).expect("pool shape");
        self.push(t, Op::GlobalMaxPool { x, argmax }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, h, w, ch] = self.shape(x).dims();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * ch];
        for i in 0..n {
            for p in 0..h * w {
                let base = (i * h * w + p) * ch;
                for j in 0..ch {
                    out[i * ch + j] += xd[base + j];
                }
            }
        }
        let inv = T::one() / T::from_usize_lossy(h * w);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[x]);
        let t = Tensor::from_vec(Shape::new(n, 1, 1, ch), out).expect("pool shape");
        self.push(t, Op::GlobalAvgPool(x), rg)
    }

    /// Non-overlapping 2×2 mean pooling.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let [n, h, w, ch] = xs.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2x2 needs even spatial dims, got {xs}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter: T = c(0.25);
        let mut out = vec![T::zero(); n * oh * ow * ch];
        for i in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((i * oh + oy) * ow + ox) * ch;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((i * h + 2 * oy + dy) * w + 2 * ox + dx) * ch;
                        for j in 0..ch {
                            out[o + j] += xd[s + j];
                        }
                    }
                    for v in &mut out[o..o + ch] {
                        *v *= quarter;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(Shape::new(n, oh, ow, ch), out)?, Op::AvgPool2x2(x), rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, h, w, _] = first.dims();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n(), s.h(), s.w()) != (n, h, w) {
                return Err(shape_err!("concat: {s} vs {first}"));
            }
            total += s.c();
        }
        let mut out = Vec::with_capacity(n * h * w * total);
        for pix in 0..n * h * w {
            for &p in parts {
                let pc = self.shape(p).c();
                out.extend_from_slice(&self.value(p).data()[pix * pc..(pix + 1) * pc]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(Shape::new(n, h, w, total), out)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Mean over consecutive channel groups of width `k`: channel `i` of the
    /// output averages input channels `[i*k, (i+1)*k)`.
    pub fn group_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x);
        if k == 0 || !xs.c().is_multiple_of(k) {
            return Err(shape_err!("group_mean: {} channels not divisible into groups of {k}", xs.c()));
        }
        let groups = xs.c() / k;
        let inv = T::one() / T::from_usize_lossy(k);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(k)
            .map(|g| g.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(Shape::new(xs.n(), xs.h(), xs.w(), groups), out)?,
            Op::GroupMean { x, k },
            rg,
        ))
    }

    /// Softmax across channels at each `(n, y, x)`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let mut out = Vec::with_capacity(xs.numel());
        for row in self.value(x).data().chunks_exact(xs.c()) {
            out.extend(softmax_row(row));
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(xs, out).expect("softmax shape"), Op::Softmax(x), rg)
    }

    /// Batch-mean multi-class focal loss `-(1 - p_y)^gamma * ln p_y` over
    /// softmax probabilities of `logits` shaped `(n, 1, 1, classes)`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: T) -> Result<Var> {
        let ls = self.shape(logits);
        let (n, classes) = (ls.n(), ls.c());
        if ls.h() != 1 || ls.w() != 1 {
            return Err(shape_err!("focal_loss: logits must be (n, 1, 1, L), got {ls}"));
        }
        if labels.len() != n {
            return Err(shape_err!("focal_loss: {} labels for batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        if gamma < T::zero() {
            return Err(Error::InvalidArgument("focal loss gamma must be ≥ 0".into()));
        }
        let mut probs = Vec::with_capacity(n * classes);
        let mut log_probs = Vec::with_capacity(n * classes);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks_exact(classes).zip(labels) {
            let lp = log_softmax_row(row);
            let p_y = lp[y].exp();
            total += -(T::one() - p_y).powf(gamma) * lp[y];
            probs.extend(lp.iter().map(|v| v.exp()));
            log_probs.extend(lp);
        }
        let loss = total / T::from_usize_lossy(n);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma,
                probs,
                log_probs,
            },
            rg,
        ))
    }

    /// Pick channel `index[i]` of sample `i` from a `(n, 1, 1, c)` tensor.
    pub fn select_channel(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h() != 1 || xs.w() != 1 || index.len() != xs.n() {
            return Err(shape_err!("select_channel: {} indices for {xs}", index.len()));
        }
        if index.iter().any(|&i| i >= xs.c()) {
            return Err(Error::InvalidArgument(format!("channel index out of range for {xs}")));
        }
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(x).data()[i * xs.c() + j])
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(Shape::new(xs.n(), 1, 1, 1), out)?,
            Op::SelectChannel {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Populate gradients of the scalar `loss` w.r.t. every node that requires one.
    ///
    /// Earlier gradients are discarded. Fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("{loss:?} is not recorded on this tape")));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Graph(format!("loss must be scalar, got {}", self.shape(loss))));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        // Leave gradients only where they were requested.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = slot(nodes, grads, v) {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                if let Some(ga) = slot(nodes, grads, *a) {
                    let bd = val(*b);
                    for_each_broadcast(sa, sb, |ia, ib| ga[ia] += g[ia] * bd[ib]);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let ad = val(*a);
                    for_each_broadcast(sa, sb, |ia, ib| gb[ib] += g[ia] * ad[ia]);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &v), &o) in ga.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *d += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                let mut dx = slot(nodes, grads, *x).map(std::mem::take);
                let mut dw = slot(nodes, grads, *w).map(std::mem::take);
                let mut db = (*b).and_then(|b| slot(nodes, grads, b).map(std::mem::take));
                kernels::conv2d_backward(
                    xd,
                    wd,
                    g,
                    geom,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::Depthwise3x3 { x, w } => {
                let dims = nodes[x.0].value.shape().dims();
                let (xd, wd) = (val(*x), val(*w));
                let mut dx = slot(nodes, grads, *x).map(std::mem::take);
                let mut dw = slot(nodes, grads, *w).map(std::mem::take);
                kernels::depthwise3x3_backward(
                    xd,
                    wd,
                    g,
                    (dims[0], dims[1], dims[2], dims[3]),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
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
                let ch = inv_std.len();
                let m = T::from_usize_lossy(g.len() / ch);
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for (gr, xr) in g.chunks_exact(ch).zip(xhat.chunks_exact(ch)) {
                    for j in 0..ch {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xr[j];
                    }
                }
                let gam = val(*gamma);
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                }
                if let Some(db) = slot(nodes, grads, *beta) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((dr, gr), xr) in dx.chunks_exact_mut(ch).zip(g.chunks_exact(ch)).zip(xhat.chunks_exact(ch)) {
                        for j in 0..ch {
                            let scale = gam[j] * inv_std[j];
                            if *batch_stats {
                                dr[j] += scale * (gr[j] - sum_g[j] / m - xr[j] * sum_gx[j] / m);
                            } else {
                                dr[j] += scale * gr[j];
                            }
                        }
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (&pos, &v) in argmax.iter().zip(g) {
                        dx[pos] += v;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let [n, h, w, ch] = nodes[x.0].value.shape().dims();
                if let Some(dx) = slot(nodes, grads, *x) {
                    let inv = T::one() / T::from_usize_lossy(h * w);
                    for i in 0..n {
                        for p in 0..h * w {
                            let base = (i * h * w + p) * ch;
                            for j in 0..ch {
                                dx[base + j] += g[i * ch + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::AvgPool2x2(x) => {
                let [n, h, w, ch] = nodes[x.0].value.shape().dims();
                let (oh, ow) = (h / 2, w / 2);
                let quarter: T = c(0.25);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = ((i * oh + oy) * ow + ox) * ch;
                                for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let s = ((i * h + 2 * oy + dy) * w + 2 * ox + ddx) * ch;
                                    for j in 0..ch {
                                        dx[s + j] += g[o + j] * quarter;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.shape().c();
                let pixels = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.shape().c();
                    if let Some(dp) = slot(nodes, grads, p) {
                        for pix in 0..pixels {
                            let src = &g[pix * total + offset..pix * total + offset + pc];
                            dp[pix * pc..(pix + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::GroupMean { x, k } => {
                let inv = T::one() / T::from_usize_lossy(*k);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (dg, &v) in dx.chunks_exact_mut(*k).zip(g) {
                        dg.iter_mut().for_each(|d| *d += v * inv);
                    }
                }
            }
            Op::Softmax(x) => {
                let ch = node.value.shape().c();
                let y = node.value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_exact_mut(ch).zip(g.chunks_exact(ch)).zip(y.chunks_exact(ch)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..ch {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                probs,
                log_probs,
            } => {
                let classes = nodes[logits.0].value.shape().c();
                let n = labels.len();
                let upstream = g[0] / T::from_usize_lossy(n);
                if let Some(dz) = slot(nodes, grads, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        let p = &probs[i * classes..(i + 1) * classes];
                        let lp_y = log_probs[i * classes + y];
                        let q = T::one() - p[y];
                        // d loss / d p_y times p_y; the softmax Jacobian supplies the rest.
                        let dl_dp_times_p = if q > T::zero() {
                            *gamma * q.powf(*gamma - T::one()) * p[y] * lp_y - q.powf(*gamma)
                        } else if *gamma == T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        for j in 0..classes {
                            let delta = if j == y { T::one() } else { T::zero() };
                            dz[i * classes + j] += upstream * dl_dp_times_p * (delta - p[j]);
                        }
                    }
                }
            }
            Op::SelectChannel { x, index } => {
                let ch = nodes[x.0].value.shape().c();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (i, (&j, &v)) in index.iter().zip(g).enumerate() {
                        dx[i * ch + j] += v;
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
