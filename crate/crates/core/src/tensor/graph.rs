use std::str::FromStr;

use rand::Rng;

use super::{Result, Scalar, Tensor, TensorError};

const BN_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softmax,
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            other => Err(TensorError::UnknownActivation(other.to_string())),
        }
    }
}

/// Per-channel statistics of one training batch, used by the caller to
/// update running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Dense {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ChannelDot {
        map: Var,
        query: Var,
    },
    ScaleByMap {
        map: Var,
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SumSquares(Var),
    Sum(Var),
    Add(Var, Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations. Values are computed eagerly on push; calling
/// [`Graph::backward`] walks the tape in reverse and accumulates gradients.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    checked: bool,
    signature: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

/// (batch, height, width, channels) view of a rank-3 or rank-4 shape.
fn nhwc(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Some((n, h, w, c)),
        [h, w, c] => Some((1, h, w, c)),
        _ => None,
    }
}

/// (rows, cols) view of a rank-1 or rank-2 shape.
fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [n, d] => Some((n, d)),
        [d] => Some((1, d)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// In checked mode every op verifies that its output is finite.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise-linear branch taken so far (ReLU signs and
    /// pooling argmaxes). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, v: u64) {
        self.signature ^= v;
        self.signature = self.signature.wrapping_mul(0x0100_0000_01b3);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite(op_name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let var = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[var.0].requires_grad = requires_grad;
        Ok(var)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose finiteness is checked in checked mode.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push_leaf(value, requires_grad)
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

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----------------------------------------------------------------------
    // Layers
    // ----------------------------------------------------------------------

    /// 3×3 convolution, stride 1, zero "same" padding. `x` is H×W×Cin or
    /// N×H×W×Cin, `kernel` is 3×3×Cin×Cout, `bias` is Cout.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (n, h, w, cin) = nhwc(&xs).ok_or_else(|| shape_err("conv2d", &[0, 0, 0, 0], &xs))?;
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != cin {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                message: format!(
                    "input {xs:?} has {cin} channels but kernel is {ks:?} (expected 3x3x{cin}xCout)"
                ),
            });
        }
        let cout = ks[3];
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv2d bias", &[cout], self.shape(bias)));
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); n * h * w * cout];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let o = ((b * h + y) * w + xx) * cout;
                    let acc = &mut out[o..o + cout];
                    acc.copy_from_slice(bd);
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        for kx in 0..3 {
                            let ix = xx + kx;
                            if ix < 1 || ix > w {
                                continue;
                            }
                            let ix = ix - 1;
                            let ibase = ((b * h + iy) * w + ix) * cin;
                            let kbase = (ky * 3 + kx) * cin * cout;
                            for ci in 0..cin {
                                let v = xd[ibase + ci];
                                let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (a, &k) in acc.iter_mut().zip(krow) {
                                    *a += v * k;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Conv2d { x, kernel, bias }, "conv2d")
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first cell in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, h, w, c) = nhwc(&xs).ok_or_else(|| shape_err("maxpool2", &[0, 0, 0, 0], &xs))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2",
                message: format!("spatial size {h}x{w} must be even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 3] = oh;
        shape[r - 2] = ow;
        for &i in &argmax {
            self.mix(i as u64);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MaxPool2 { x, argmax }, "maxpool2")
    }

    /// Batch normalization over every axis but the last. With `train` set and
    /// a batch of at least two, batch statistics are used and returned;
    /// otherwise the running statistics are applied.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        for (name, v) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(name, &[c], self.shape(v)));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(shape_err("batchnorm running stats", &[c], running_mean.shape()));
        }
        let batch = if xs.len() >= 2 { xs[0] } else { 1 };
        let use_batch = train && batch >= 2;
        let xd = self.value(x).data();
        let m = xd.len() / c;
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var) = if use_batch {
            let mf = T::from_usize(m).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in xd.chunks_exact(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            mean.iter_mut().for_each(|a| *a = *a / mf);
            let mut var = vec![T::zero(); c];
            for row in xd.chunks_exact(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|a| *a = *a / mf);
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normalized = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(c) {
            for ch in 0..c {
                let nv = (row[ch] - mean[ch]) * inv_std[ch];
                normalized.push(nv);
                out.push(gd[ch] * nv + bd[ch]);
            }
        }
        let value = Tensor::new(xs, out)?;
        let var_id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: use_batch,
            },
            "batchnorm",
        )?;
        let stats = use_batch.then_some(BnBatchStats { mean, var });
        Ok((var_id, stats))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let words: Vec<u64> = self
            .value(x)
            .data()
            .chunks(64)
            .map(|c| c.iter().fold(0u64, |w, &v| (w << 1) | u64::from(v > T::zero())))
            .collect();
        for w in words {
            self.mix(w);
        }
        self.push(value, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), "tanh")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::Softmax(x), "softmax")
    }

    /// `x` (N×in or in) times `weight`ᵀ (out×in) plus `bias` (out).
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, din) = rows_cols(&xs).ok_or_else(|| shape_err("dense", &[0, 0], &xs))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(TensorError::InvalidArgument {
                op: "dense",
                message: format!("input {xs:?} incompatible with weight {ws:?}"),
            });
        }
        let dout = ws[0];
        if self.shape(bias) != [dout] {
            return Err(shape_err("dense bias", &[dout], self.shape(bias)));
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = Vec::with_capacity(n * dout);
        for row in xd.chunks_exact(din) {
            for (o, wrow) in wd.chunks_exact(din).enumerate() {
                let dot: T = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                out.push(dot + bd[o]);
            }
        }
        let shape = if xs.len() == 1 { vec![dout] } else { vec![n, dout] };
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Dense { x, weight, bias }, "dense")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        self.reshape(x, &[n, rest.max(1)])
    }

    /// Concatenate two N×p and N×q matrices into N×(p+q).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (n, p) = rows_cols(&as_).ok_or_else(|| shape_err("concat", &[0, 0], &as_))?;
        let (m, q) = rows_cols(&bs).ok_or_else(|| shape_err("concat", &[0, 0], &bs))?;
        if n != m || as_.len() != bs.len() {
            return Err(shape_err("concat", &as_, &bs));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&ad[i * p..(i + 1) * p]);
            out.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        let shape = if as_.len() == 1 { vec![p + q] } else { vec![n, p + q] };
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat { a, b }, "concat")
    }

    /// Inverted dropout. Identity when `train` is false.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() >= rate {
                    keep_scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let xv = self.value(x);
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Per-cell dot product of a feature map (N×h×w×C or h×w×C) with a query
    /// vector per batch item (N·C values): `out[n,i,j] = Σₖ map[n,i,j,k]·q[n,k]`.
    pub fn channel_dot(&mut self, map: Var, query: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let (n, h, w, c) = nhwc(&ms).ok_or_else(|| shape_err("channel_dot", &[0, 0, 0, 0], &ms))?;
        if self.value(query).numel() != n * c {
            return Err(shape_err("channel_dot query", &[n, c], self.shape(query)));
        }
        let md = self.value(map).data();
        let qd = self.value(query).data();
        let mut out = Vec::with_capacity(n * h * w);
        for b in 0..n {
            let q = &qd[b * c..(b + 1) * c];
            for cell in md[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                out.push(cell.iter().zip(q).map(|(&a, &b)| a * b).sum());
            }
        }
        let shape = if ms.len() == 3 { vec![h, w] } else { vec![n, h, w] };
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::ChannelDot { map, query }, "channel_dot")
    }

    /// Multiplies every channel of `x` (…×C) by the matching cell of `map` (…).
    pub fn scale_by_map(&mut self, map: Var, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        let ad = self.value(map).data();
        if ad.len() * c != self.value(x).numel() {
            return Err(shape_err("scale_by_map", &xs[..xs.len() - 1], self.shape(map)));
        }
        let xd = self.value(x).data();
        let out: Vec<T> = xd
            .chunks_exact(c)
            .zip(ad)
            .flat_map(|(cell, &a)| cell.iter().map(move |&v| v * a))
            .collect();
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::ScaleByMap { map, x }, "scale_by_map")
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        let eps = T::from_f64_lossy(NORM_EPS);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / c);
        let mut out = Vec::with_capacity(xd.len());
        for v in xd.chunks_exact(c) {
            let norm = (v.iter().map(|&a| a * a).sum::<T>() + eps).sqrt();
            norms.push(norm);
            out.extend(v.iter().map(|&a| a / norm));
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    /// Row lookup into a V×D table; returns N×D.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let (v, d) = match *ts.as_slice() {
            [v, d] => (v, d),
            _ => return Err(shape_err("embedding", &[0, 0], &ts)),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: v,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    // ----------------------------------------------------------------------
    // Losses and reductions
    // ----------------------------------------------------------------------

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.numel() != t.numel() {
            return Err(shape_err("mse", p.shape(), t.shape()));
        }
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / T::from_usize(p.numel()).unwrap());
        self.push(value, Op::Mse { pred, target }, "mse")
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        let (n, k) = rows_cols(&ps).ok_or_else(|| shape_err("cross_entropy", &[0, 0], &ps))?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy labels", &[n], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let pd = self.value(probs).data();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pd[i * k + l].max(floor).ln())
            .sum();
        let value = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            "cross_entropy",
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum_squares());
        self.push(value, Op::SumSquares(x), "sum_squares")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum")
    }

    /// Elementwise sum of two tensors with equal element counts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.numel() != bv.numel() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), "scale")
    }

    /// `weight · Σ‖p‖²` over the given tensors.
    pub fn l2_penalty(&mut self, params: &[Var], weight: T) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &p in params {
            let sq = self.sum_squares(p)?;
            total = Some(match total {
                Some(t) => self.add(t, sq)?,
                None => sq,
            });
        }
        let total = match total {
            Some(t) => t,
            None => self.constant(Tensor::scalar(T::zero())),
        };
        self.scale(total, weight)
    }

    // ----------------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively when a value feeds several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(ls.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        let out = &nodes[i].value;
        // Runs `$body` with `$d` bound to the accumulation buffer of `$v`,
        // skipping inputs that do not need a gradient.
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let mut t = grads[v.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape()));
                    {
                        let $d: &mut [T] = t.data_mut();
                        $body
                    }
                    grads[v.0] = Some(t);
                }
            }};
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias } => {
                let (n, h, w, cin) = nhwc(nodes[x.0].value.shape()).unwrap();
                let cout = nodes[kernel.0].value.shape()[3];
                let xd = nodes[x.0].value.data();
                let kd = nodes[kernel.0].value.data();
                with_grad!(*bias, |db| {
                    for row in gd.chunks_exact(cout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                // Visits every (output pixel, kernel tap, input channel) triple
                // that lies inside the padded input.
                let taps = |f: &mut dyn FnMut(usize, usize, &[T])| {
                    for b in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((b * h + y) * w + xx) * cout;
                                let go = &gd[o..o + cout];
                                for ky in 0..3 {
                                    if y + ky < 1 || y + ky > h {
                                        continue;
                                    }
                                    let iy = y + ky - 1;
                                    for kx in 0..3 {
                                        if xx + kx < 1 || xx + kx > w {
                                            continue;
                                        }
                                        let ix = xx + kx - 1;
                                        let ibase = ((b * h + iy) * w + ix) * cin;
                                        let kbase = (ky * 3 + kx) * cin * cout;
                                        for ci in 0..cin {
                                            f(ibase + ci, kbase + ci * cout, go);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                with_grad!(*x, |dx| {
                    taps(&mut |xi, kr, go| {
                        let s: T = kd[kr..kr + cout].iter().zip(go).map(|(&k, &gv)| k * gv).sum();
                        dx[xi] += s;
                    });
                });
                with_grad!(*kernel, |dk| {
                    taps(&mut |xi, kr, go| {
                        let v = xd[xi];
                        for (a, &gv) in dk[kr..kr + cout].iter_mut().zip(go) {
                            *a += v * gv;
                        }
                    });
                });
            }
            Op::MaxPool2 { x, argmax } => {
                with_grad!(*x, |dx| {
                    for (&idx, &gv) in argmax.iter().zip(gd) {
                        dx[idx] += gv;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gam = nodes[gamma.0].value.data();
                with_grad!(*beta, |dbeta| {
                    for row in gd.chunks_exact(c) {
                        for (a, &v) in dbeta.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                with_grad!(*gamma, |dgamma| {
                    for (row, nrow) in gd.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                        for ch in 0..c {
                            dgamma[ch] += row[ch] * nrow[ch];
                        }
                    }
                });
                with_grad!(*x, |dx| {
                    if *batch_stats {
                        let m = T::from_usize(gd.len() / c).unwrap();
                        let mut sum_d = vec![T::zero(); c];
                        let mut sum_dn = vec![T::zero(); c];
                        for (row, nrow) in gd.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                            for ch in 0..c {
                                let d = row[ch] * gam[ch];
                                sum_d[ch] += d;
                                sum_dn[ch] += d * nrow[ch];
                            }
                        }
                        for ((dxr, row), nrow) in dx
                            .chunks_exact_mut(c)
                            .zip(gd.chunks_exact(c))
                            .zip(normalized.chunks_exact(c))
                        {
                            for ch in 0..c {
                                let d = row[ch] * gam[ch];
                                dxr[ch] +=
                                    inv_std[ch] / m * (m * d - sum_d[ch] - nrow[ch] * sum_dn[ch]);
                            }
                        }
                    } else {
                        for (dxr, row) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                            for ch in 0..c {
                                dxr[ch] += row[ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |dx| {
                    for ((a, &v), &gv) in dx.iter_mut().zip(xd).zip(gd) {
                        if v > T::zero() {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                with_grad!(*x, |dx| {
                    for ((a, &y), &gv) in dx.iter_mut().zip(out.data()).zip(gd) {
                        *a += gv * (T::one() - y * y);
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                with_grad!(*x, |dx| {
                    for ((dxr, yr), gr) in dx
                        .chunks_exact_mut(d)
                        .zip(out.data().chunks_exact(d))
                        .zip(gd.chunks_exact(d))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for ((a, &y), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *a += y * (gv - dot);
                        }
                    }
                });
            }
            Op::Dense { x, weight, bias } => {
                let ws = nodes[weight.0].value.shape();
                let (dout, din) = (ws[0], ws[1]);
                let xd = nodes[x.0].value.data();
                let wd = nodes[weight.0].value.data();
                with_grad!(*bias, |db| {
                    for row in gd.chunks_exact(dout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                with_grad!(*weight, |dw| {
                    for (grow, xrow) in gd.chunks_exact(dout).zip(xd.chunks_exact(din)) {
                        for (o, &gv) in grow.iter().enumerate() {
                            for (a, &xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *a += gv * xv;
                            }
                        }
                    }
                });
                with_grad!(*x, |dx| {
                    for (grow, dxrow) in gd.chunks_exact(dout).zip(dx.chunks_exact_mut(din)) {
                        for (o, &gv) in grow.iter().enumerate() {
                            for (a, &wv) in dxrow.iter_mut().zip(&wd[o * din..(o + 1) * din]) {
                                *a += gv * wv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |dx| {
                    for (a, &gv) in dx.iter_mut().zip(gd) {
                        *a += gv;
                    }
                });
            }
            Op::Concat { a, b } => {
                let p = *nodes[a.0].value.shape().last().unwrap();
                let q = *nodes[b.0].value.shape().last().unwrap();
                with_grad!(*a, |da| {
                    for (dar, gr) in da.chunks_exact_mut(p).zip(gd.chunks_exact(p + q)) {
                        for (x, &gv) in dar.iter_mut().zip(&gr[..p]) {
                            *x += gv;
                        }
                    }
                });
                with_grad!(*b, |db| {
                    for (dbr, gr) in db.chunks_exact_mut(q).zip(gd.chunks_exact(p + q)) {
                        for (x, &gv) in dbr.iter_mut().zip(&gr[p..]) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |dx| {
                    for ((a, &m), &gv) in dx.iter_mut().zip(mask).zip(gd) {
                        *a += gv * m;
                    }
                });
            }
            Op::ChannelDot { map, query } => {
                let (n, h, w, c) = nhwc(nodes[map.0].value.shape()).unwrap();
                let md = nodes[map.0].value.data();
                let qd = nodes[query.0].value.data();
                with_grad!(*map, |dm| {
                    for b in 0..n {
                        let q = &qd[b * c..(b + 1) * c];
                        for cell in 0..h * w {
                            let gv = gd[b * h * w + cell];
                            let base = (b * h * w + cell) * c;
                            for k in 0..c {
                                dm[base + k] += gv * q[k];
                            }
                        }
                    }
                });
                with_grad!(*query, |dq| {
                    for b in 0..n {
                        for cell in 0..h * w {
                            let gv = gd[b * h * w + cell];
                            let base = (b * h * w + cell) * c;
                            for k in 0..c {
                                dq[b * c + k] += gv * md[base + k];
                            }
                        }
                    }
                });
            }
            Op::ScaleByMap { map, x } => {
                let c = *nodes[x.0].value.shape().last().unwrap();
                let ad = nodes[map.0].value.data();
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |dx| {
                    for ((dxr, gr), &a) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(ad) {
                        for (d, &gv) in dxr.iter_mut().zip(gr) {
                            *d += gv * a;
                        }
                    }
                });
                with_grad!(*map, |da| {
                    for ((d, gr), xr) in da.iter_mut().zip(gd.chunks_exact(c)).zip(xd.chunks_exact(c)) {
                        *d += gr.iter().zip(xr).map(|(&gv, &xv)| gv * xv).sum::<T>();
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = *out.shape().last().unwrap();
                with_grad!(*x, |dx| {
                    for (((dxr, yr), gr), &nrm) in dx
                        .chunks_exact_mut(c)
                        .zip(out.data().chunks_exact(c))
                        .zip(gd.chunks_exact(c))
                        .zip(norms)
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for ((a, &y), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *a += (gv - y * dot) / nrm;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                with_grad!(*table, |dt| {
                    for (gr, &id) in gd.chunks_exact(d).zip(ids) {
                        for (a, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pd = nodes[pred.0].value.data();
                let td = nodes[target.0].value.data();
                let scale = T::from_f64_lossy(2.0) * gd[0] / T::from_usize(pd.len()).unwrap();
                with_grad!(*pred, |dp| {
                    for ((a, &p), &t) in dp.iter_mut().zip(pd).zip(td) {
                        *a += scale * (p - t);
                    }
                });
                with_grad!(*target, |dt| {
                    for ((a, &p), &t) in dt.iter_mut().zip(pd).zip(td) {
                        *a -= scale * (p - t);
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let k = *nodes[probs.0].value.shape().last().unwrap();
                let pd = nodes[probs.0].value.data();
                let n = T::from_usize(labels.len()).unwrap();
                let floor = T::from_f64_lossy(PROB_FLOOR);
                with_grad!(*probs, |dp| {
                    for (i, &l) in labels.iter().enumerate() {
                        let p = pd[i * k + l];
                        if p > floor {
                            dp[i * k + l] -= gd[0] / (n * p);
                        }
                    }
                });
            }
            Op::SumSquares(x) => {
                let two = T::from_f64_lossy(2.0) * gd[0];
                let xd = nodes[x.0].value.data();
                with_grad!(*x, |dx| {
                    for (a, &v) in dx.iter_mut().zip(xd) {
                        *a += two * v;
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |dx| {
                    dx.iter_mut().for_each(|a| *a += gd[0]);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |d| {
                        for (x, &gv) in d.iter_mut().zip(gd) {
                            *x += gv;
                        }
                    });
                }
            }
            Op::Scale(x, factor) => {
                with_grad!(*x, |dx| {
                    for (a, &gv) in dx.iter_mut().zip(gd) {
                        *a += gv * *factor;
                    }
                });
            }
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, kernel, bias } => vec![*x, *kernel, *bias],
        Op::MaxPool2 { x, .. } => vec![*x],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu(x) | Op::Tanh(x) | Op::Softmax(x) | Op::Reshape(x) => vec![*x],
        Op::Dense { x, weight, bias } => vec![*x, *weight, *bias],
        Op::Concat { a, b } => vec![*a, *b],
        Op::Dropout { x, .. } => vec![*x],
        Op::ChannelDot { map, query } => vec![*map, *query],
        Op::ScaleByMap { map, x } => vec![*map, *x],
        Op::L2Normalize { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::Mse { pred, target } => vec![*pred, *target],
        Op::CrossEntropy { probs, .. } => vec![*probs],
        Op::SumSquares(x) | Op::Sum(x) | Op::Scale(x, _) => vec![*x],
        Op::Add(a, b) => vec![*a, *b],
    }
}
