use super::kernels::{self, ConvGeom};
use super::{gemm, Float, Tensor, Trans};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        area: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm(Box<BnSaved<T>>),
    ChannelScale {
        x: Var,
        w: Var,
        area: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct BnSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    inner: usize,
    train: bool,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent accumulator; present exactly for leaves that require grad.
    grad: Option<Tensor<T>>,
}

/// Batch-norm hyperparameters shared by every normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Ordered record of primitive applications for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().fill(T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// `M×K · K×N → M×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`N` bias to every row of a `B×N` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} ⊙ {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Cross-correlation of `B×Cin×H×W` input with `Cout×Cin×k×k` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} and weight {sw:?} must both be rank 4"),
            ));
        }
        if sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::dim(
                "conv2d",
                format!("weight {sw:?} incompatible with input {sx:?}"),
            ));
        }
        let k = sw[2];
        let too_big = || {
            Error::dim(
                "conv2d",
                format!(
                    "kernel {k}×{k} (stride {stride}) exceeds padded input {}×{} (padding {padding})",
                    sx[2], sx[3]
                ),
            )
        };
        let oh = kernels::conv_output_extent(sx[2], k, stride, padding).ok_or_else(too_big)?;
        let ow = kernels::conv_output_extent(sx[3], k, stride, padding).ok_or_else(too_big)?;
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new([geom.batch, geom.cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Max pooling with a square window; padding never contributes a maximum.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "max_pool2d",
                format!("rank-4 input expected, got {s:?}"),
            ));
        }
        if padding >= k {
            return Err(Error::dim(
                "max_pool2d",
                "padding must be smaller than the window",
            ));
        }
        let err = || Error::dim("max_pool2d", format!("window {k} exceeds input {s:?}"));
        let oh = kernels::conv_output_extent(s[2], k, stride, padding).ok_or_else(err)?;
        let ow = kernels::conv_output_extent(s[3], k, stride, padding).ok_or_else(err)?;
        let (out, argmax) = kernels::max_pool_forward(
            self.value(x).data(),
            s[0] * s[1],
            s[2],
            s[3],
            k,
            stride,
            padding,
            oh,
            ow,
        );
        let value = Tensor::new([s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Channel-wise spatial mean: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim(
                "global_avg_pool",
                format!("rank-4 input expected, got {s:?}"),
            ));
        }
        let (b, c, area) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(area as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([b, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x, area }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Logistic function, evaluated so `exp` only sees nonpositive arguments.
    /// Results are kept strictly inside `(0, 1)` even where the exact value rounds to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Batch normalization over the leading axis of a `B×F` matrix, or over
    /// batch and spatial axes of a `B×C×H×W` tensor.
    ///
    /// In train mode the batch statistics (biased variance) normalize the
    /// input and the running statistics are blended with `momentum`, using
    /// the unbiased variance. In eval mode the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        train: bool,
        cfg: BnConfig,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, channels, inner) = match s.len() {
            2 => (s[0], s[1], 1),
            4 => (s[0], s[1], s[2] * s[3]),
            _ => {
                return Err(Error::dim(
                    "batch_norm",
                    format!("rank-2 or rank-4 input expected, got {s:?}"),
                ))
            }
        };
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [channels] {
                return Err(Error::dim(
                    "batch_norm",
                    format!(
                        "{what} shape {:?} does not match {channels} channels",
                        self.shape(v)
                    ),
                ));
            }
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::dim(
                "batch_norm",
                "running statistics length mismatch",
            ));
        }
        if train && batch < 2 {
            return Err(Error::BatchSize(format!(
                "train-mode batch norm needs at least 2 samples, got {batch}"
            )));
        }
        let eps = T::of(cfg.eps);
        let xs = self.value(x).data();
        let n = batch * inner;
        let mut inv_std = vec![T::zero(); channels];
        let mut mean = vec![T::zero(); channels];
        if train {
            let nf = T::of(n as f64);
            let m = T::of(cfg.momentum);
            for c in 0..channels {
                let mut sum = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * inner;
                    let v = &xs[off..off + inner];
                    sum += lane_sum2(v, v, |a, _| a);
                }
                let mu = sum / nf;
                let mut sq = T::zero();
                for b in 0..batch {
                    let off = (b * channels + c) * inner;
                    let v = &xs[off..off + inner];
                    sq += lane_sum2(v, v, |a, _| (a - mu) * (a - mu));
                }
                let var = sq / nf;
                mean[c] = mu;
                inv_std[c] = T::one() / (var + eps).sqrt();
                let unbiased = sq / T::of((n - 1) as f64);
                running_mean[c] = (T::one() - m) * running_mean[c] + m * mu;
                running_var[c] = (T::one() - m) * running_var[c] + m * unbiased;
            }
        } else {
            for c in 0..channels {
                mean[c] = running_mean[c];
                inv_std[c] = T::one() / (running_var[c] + eps).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * inner;
                let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                for ((h, o), &v) in xhat[off..off + inner]
                    .iter_mut()
                    .zip(&mut out[off..off + inner])
                    .zip(&xs[off..off + inner])
                {
                    *h = (v - mu) * is;
                    *o = gc * *h + bc;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            inner,
            train,
        };
        Ok(self.push(value, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta]))
    }

    /// Rescales every channel plane: `out[b,c,i,j] = x[b,c,i,j] · w[b,c]`.
    pub fn apply_attention(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw != [sx[0], sx[1]] {
            return Err(Error::dim(
                "apply_attention",
                format!("features {sx:?} with weights {sw:?}"),
            ));
        }
        let area = sx[2] * sx[3];
        let wv = self.value(w).data();
        let mut data = self.value(x).data().to_vec();
        for (plane, &wc) in data.chunks_exact_mut(area).zip(wv) {
            plane.iter_mut().for_each(|v| *v *= wc);
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::ChannelScale { x, w, area }, &[x, w]))
    }

    /// Mean negative log-softmax of the labelled class over a `B×K` batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            total += log_denom - (row[label] - max);
            probs.extend(row.iter().map(|&z| (z - max).exp() / denom));
        }
        let value = Tensor::scalar(total / T::of(labels.len() as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *d;
                    }
                }
                continue;
            }
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, mut g: Vec<T>, adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        &g,
                        Trans::No,
                        self.value(*b).data(),
                        Trans::Yes,
                        T::zero(),
                        &mut da,
                    );
                    accumulate(adj, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        Trans::Yes,
                        &g,
                        Trans::No,
                        T::zero(),
                        &mut db,
                    );
                    accumulate(adj, *b, db);
                }
            }
            Op::Add { a, b } => match (self.wants(*a), self.wants(*b)) {
                (true, true) => {
                    accumulate(adj, *a, g.clone());
                    accumulate(adj, *b, g);
                }
                (true, false) => accumulate(adj, *a, g),
                (false, true) => accumulate(adj, *b, g),
                (false, false) => {}
            },
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(adj, *bias, db);
                }
                if self.wants(*x) {
                    accumulate(adj, *x, g);
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    accumulate(adj, *a, d);
                }
                if self.wants(*b) {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    accumulate(adj, *b, d);
                }
            }
            Op::Scale { x, factor } => {
                g.iter_mut().for_each(|v| *v *= *factor);
                accumulate(adj, *x, g);
            }
            Op::Sum { x } => {
                accumulate(adj, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    &g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(adj, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(adj, *w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&at, &d) in argmax.iter().zip(&g) {
                    dx[at] += d;
                }
                accumulate(adj, *x, dx);
            }
            Op::GlobalAvgPool { x, area } => {
                let inv = T::one() / T::of(*area as f64);
                let mut dx = Vec::with_capacity(g.len() * area);
                for &d in &g {
                    dx.extend(std::iter::repeat_n(d * inv, *area));
                }
                accumulate(adj, *x, dx);
            }
            Op::Relu { x } => {
                for (d, &v) in g.iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(adj, *x, g);
            }
            Op::Sigmoid { x } => {
                for (d, &s) in g.iter_mut().zip(node.value.data()) {
                    *d *= s * (T::one() - s);
                }
                accumulate(adj, *x, g);
            }
            Op::BatchNorm(saved) => self.batch_norm_backward(saved, &g, adj),
            Op::ChannelScale { x, w, area } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*w) {
                    let dw = g
                        .chunks_exact(*area)
                        .zip(xv.chunks_exact(*area))
                        .map(|(gp, xp)| lane_sum2(gp, xp, |a, b| a * b))
                        .collect();
                    accumulate(adj, *w, dw);
                }
                if self.wants(*x) {
                    for (plane, &wc) in g.chunks_exact_mut(*area).zip(wv) {
                        plane.iter_mut().for_each(|v| *v *= wc);
                    }
                    accumulate(adj, *x, g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * k + l] -= scale;
                }
                accumulate(adj, *logits, d);
            }
        }
    }

    fn batch_norm_backward(&self, s: &BnSaved<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let (channels, inner) = (s.channels, s.inner);
        let batch = g.len() / (channels * inner);
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * inner;
                let (gs, xs) = (&g[off..off + inner], &s.xhat[off..off + inner]);
                dbeta[c] += lane_sum2(gs, gs, |a, _| a);
                dgamma[c] += lane_sum2(gs, xs, |a, b| a * b);
            }
        }
        if self.wants(s.x) {
            let gamma = self.value(s.gamma).data();
            let mut dx = vec![T::zero(); g.len()];
            let n = T::of((batch * inner) as f64);
            for b in 0..batch {
                for c in 0..channels {
                    let off = (b * channels + c) * inner;
                    let k = gamma[c] * s.inv_std[c];
                    let (dxs, gs, xs) = (
                        &mut dx[off..off + inner],
                        &g[off..off + inner],
                        &s.xhat[off..off + inner],
                    );
                    if s.train {
                        let (kn, db, dg) = (k / n, dbeta[c], dgamma[c]);
                        for ((d, &gi), &xh) in dxs.iter_mut().zip(gs).zip(xs) {
                            *d = kn * (n * gi - db - xh * dg);
                        }
                    } else {
                        for (d, &gi) in dxs.iter_mut().zip(gs) {
                            *d = k * gi;
                        }
                    }
                }
            }
            accumulate(adj, s.x, dx);
        }
        if self.wants(s.gamma) {
            accumulate(adj, s.gamma, dgamma);
        }
        if self.wants(s.beta) {
            accumulate(adj, s.beta, dbeta);
        }
    }
}

fn accumulate<T: Float>(adj: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// `Σ f(a_i, b_i)` over eight interleaved partial sums, which vectorizes.
fn lane_sum2<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += f(x, y);
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f(x[l], y[l]);
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `1 / (1 + e^{-x})` clamped to the open unit interval.
pub(crate) fn stable_sigmoid<T: Float>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(hi)
}
