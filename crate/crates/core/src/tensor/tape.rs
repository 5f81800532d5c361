//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node holding its output value and whatever
//! the backward rule needs. Nodes only reference earlier nodes, so replaying
//! the tape from the end visits each node exactly once in a valid order.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSq(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Softmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout { input: Var, mask: Vec<f64> },
    Reshape(Var),
    Permute { input: Var, map: Vec<usize> },
    Narrow { input: Var, dim: usize, start: usize },
    Conv { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    ChannelScale { input: Var, weight: Var },
    ChannelShift { input: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { input: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape. Consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-channel statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate, used for the running average.
    pub var: Vec<f64>,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    /// Fresh state: mean 0, variance 1, momentum 0.1, eps 1e-5. Evaluating
    /// before any training update therefore normalizes with these values.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &s) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, &s) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

/// Gradients produced by one backward pass, indexed by tape handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (acc, v) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient flows back to the store
    /// through [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `Σ x²`
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumSq(a), rg)
    }

    /// Matrix product over the last two axes; leading axes must match and
    /// are treated as a batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (p, q, q2, cols) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if q != q2 {
            return Err(Error::dim(format!("matmul: inner extents {q} and {q2} differ")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * p * cols];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..batch {
            kernels::matmul_acc(
                &da[n * p * q..(n + 1) * p * q],
                &db[n * q * cols..(n + 1) * q * cols],
                &mut out[n * p * cols..(n + 1) * p * cols],
                p,
                q,
                cols,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([p, cols]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::dim("transpose needs rank ≥ 2"));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 2].iter().product();
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for n in 0..batch {
            let off = n * rows * cols;
            kernels::transpose(&src[off..off + rows * cols], rows, cols, &mut out[off..off + rows * cols]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::TransposeLast2(a), rg))
    }

    /// Softmax along the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let q = *src.shape().last().unwrap();
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.data().chunks(q).zip(out.chunks_mut(q)) {
            kernels::softmax_row(row, o);
        }
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: out,
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; in evaluation it is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Dropout { input: a, mask }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for rank {}", s.len())));
        }
        let map = kernels::permutation_map(&s, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Permute { input: a, map }, rg))
    }

    /// Slice `[start, start+len)` along axis `dim`.
    pub fn narrow(&mut self, a: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if dim >= s.len() || len == 0 || start + len > s[dim] {
            return Err(Error::dim(format!("narrow [{start}, {}) on axis {dim} of {s:?}", start + len)));
        }
        let outer: usize = s[..dim].iter().product();
        let inner: usize = s[dim + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[dim] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[dim] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { input: a, dim, start }, rg))
    }

    /// Valid (unpadded) strided cross-correlation plus per-filter bias.
    ///
    /// `input` is `B×Cin×H×W` (or `Cin×H×W`, treated as `B = 1` and returned
    /// without the batch axis), `kernel` is `Cout×Cin×kh×kw`, `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let unbatched = si.len() == 3;
        let (batch, cin, h, w) = match *si.as_slice() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim(format!("conv2d: input rank {} not 3 or 4", si.len()))),
        };
        let &[cout, kcin, kh, kw] = sk.as_slice() else {
            return Err(Error::dim(format!("conv2d: kernel shape {sk:?} is not rank 4")));
        };
        if kcin != cin {
            return Err(Error::dim(format!("conv2d: kernel expects {kcin} channels, input has {cin}")));
        }
        if kh > h || kw > w {
            return Err(Error::dim(format!("conv2d: kernel {kh}×{kw} larger than input {h}×{w}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("conv2d: strides must be ≥ 1"));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::dim(format!("conv2d: bias shape {:?}, expected [{cout}]", self.shape(bias))));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            oh: (h - kh) / stride.0 + 1,
            ow: (w - kw) / stride.1 + 1,
        };
        let mut out = vec![0.0; batch * geom.out_len()];
        kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &mut out,
        );
        let shape = if unbatched {
            vec![cout, geom.oh, geom.ow]
        } else {
            vec![batch, cout, geom.oh, geom.ow]
        };
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv { input, kernel, bias, geom }, rg))
    }

    fn channel_layout(&self, input: Var, per_channel: Var, op: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(input);
        if s.len() < 2 {
            return Err(Error::dim(format!("{op}: input rank < 2")));
        }
        let c = s[1];
        if self.shape(per_channel) != [c] {
            return Err(Error::dim(format!(
                "{op}: per-channel tensor {:?} does not match {c} channels",
                self.shape(per_channel)
            )));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// `out[b,c,…] = x[b,c,…] · w[c]`, a grouped 1×1 convolution without bias.
    pub fn channel_scale(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(input, weight, "channel_scale")?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut data = Vec::with_capacity(x.len());
        for n in 0..b * c {
            let wc = w[n % c];
            data.extend(x[n * inner..(n + 1) * inner].iter().map(|v| v * wc));
        }
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(Tensor { shape, data }, Op::ChannelScale { input, weight }, rg))
    }

    /// `out[b,c,…] = x[b,c,…] + bias[c]`
    pub fn channel_shift(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(input, bias, "channel_shift")?;
        let x = self.value(input).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(x.len());
        for n in 0..b * c {
            let s = bv[n % c];
            data.extend(x[n * inner..(n + 1) * inner].iter().map(|v| v + s));
        }
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(Tensor { shape, data }, Op::ChannelShift { input, bias }, rg))
    }

    /// Fully connected layer: `x[B×d] · W[o×d]ᵀ + b[o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (&[batch, d], &[o, d2]) = (si.as_slice(), sw.as_slice()) else {
            return Err(Error::dim(format!("linear: shapes {si:?} and {sw:?}")));
        };
        if d != d2 {
            return Err(Error::dim(format!("linear: input width {d}, weight expects {d2}")));
        }
        let mut out = vec![0.0; batch * o];
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::dim(format!("linear: bias shape {:?}, expected [{o}]", self.shape(bv))));
            }
            let bd = self.value(bv).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        kernels::matmul_bt_acc(self.value(input).data(), self.value(weight).data(), &mut out, batch, d, o);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor {
                shape: vec![batch, o],
                data: out,
            },
            Op::Linear { input, weight, bias },
            rg,
        ))
    }

    /// Per-channel normalization over batch and spatial axes of a `B×C×…`
    /// input, then affine `gamma`, `beta`.
    ///
    /// Training mode normalizes with the batch statistics and returns them so
    /// the caller can fold them into `state`; evaluation mode uses the running
    /// statistics verbatim.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, inner) = self.channel_layout(input, gamma, "batch_norm")?;
        self.channel_layout(input, beta, "batch_norm")?;
        if state.running_mean.len() != c {
            return Err(Error::dim("batch_norm: running statistics have wrong channel count"));
        }
        let x = self.value(input).data();
        let count = (b * inner) as f64;
        let (mean, var_biased, stats) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for n in 0..b * c {
                mean[n % c] += x[n * inner..(n + 1) * inner].iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for n in 0..b * c {
                let m = mean[n % c];
                var[n % c] += x[n * inner..(n + 1) * inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count);
            let unbiased = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (state.running_mean.clone(), state.running_var.clone(), None)
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for n in 0..b * c {
            let ch = n % c;
            for &v in &x[n * inner..(n + 1) * inner] {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + be[ch]);
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Per-sample normalization over every non-batch element of `input`
    /// (axis 0 is the sample axis), followed by an optional elementwise affine
    /// whose tensors have the per-sample shape.
    pub fn layer_norm(&mut self, input: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let inner: usize = s[1..].iter().product();
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p).iter().product::<usize>() != inner {
                return Err(Error::dim(format!(
                    "layer_norm: affine shape {:?} does not cover per-sample extent {:?}",
                    self.shape(*p),
                    &s[1..]
                )));
            }
        }
        let x = self.value(input).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(s[0]);
        for sample in x.chunks(inner) {
            let mean = sample.iter().sum::<f64>() / inner as f64;
            let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / inner as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(sample.iter().map(|v| (v - mean) * is));
        }
        let gd = gamma.map(|g| self.value(g).data());
        let bd = beta.map(|b| self.value(b).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let k = i % inner;
                gd.map_or(h, |g| g[k] * h) + bd.map_or(0.0, |b| b[k])
            })
            .collect();
        let mut deps = vec![input];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor { shape: s, data: out },
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `B×C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let &[batch, classes] = s.as_slice() else {
            return Err(Error::dim(format!("cross_entropy: logits shape {s:?} is not B×C")));
        };
        if labels.len() != batch {
            return Err(Error::dim(format!("cross_entropy: {} labels for batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (n, row) in z.chunks(classes).enumerate() {
            loss += kernels::log_sum_exp(row) - row[labels[n]];
            kernels::softmax_row(row, &mut probs[n * classes..(n + 1) * classes]);
        }
        loss /= batch as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Replays the tape in reverse from a scalar root. The tape is consumed.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            propagate(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Zero-initialized accumulator for `v`, or `None` if it takes no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Iterator<Item = f64>) {
    if let Some(acc) = slot(nodes, grads, v) {
        for (a, c) in acc.iter_mut().zip(contrib) {
            *a += c;
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g.iter().copied());
            add_into(nodes, grads, *b, g.iter().copied());
        }
        Op::Mul(a, b) => {
            add_into(nodes, grads, *a, g.iter().zip(val(*b)).map(|(g, y)| g * y));
            add_into(nodes, grads, *b, g.iter().zip(val(*a)).map(|(g, x)| g * x));
        }
        Op::Scale(a, f) => add_into(nodes, grads, *a, g.iter().map(|g| g * f)),
        Op::Sum(a) => add_into(nodes, grads, *a, std::iter::repeat(g[0])),
        Op::SumSq(a) => add_into(nodes, grads, *a, val(*a).iter().map(|x| 2.0 * x * g[0])),
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let r = sa.len();
            let (p, q, cols) = (sa[r - 2], sa[r - 1], sb[r - 1]);
            let batch: usize = sa[..r - 2].iter().product();
            let (da, db) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for n in 0..batch {
                    kernels::matmul_bt_acc(
                        &g[n * p * cols..(n + 1) * p * cols],
                        &db[n * q * cols..(n + 1) * q * cols],
                        &mut ga[n * p * q..(n + 1) * p * q],
                        p,
                        cols,
                        q,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for n in 0..batch {
                    kernels::matmul_at_acc(
                        &da[n * p * q..(n + 1) * p * q],
                        &g[n * p * cols..(n + 1) * p * cols],
                        &mut gb[n * q * cols..(n + 1) * q * cols],
                        p,
                        q,
                        cols,
                    );
                }
            }
        }
        Op::TransposeLast2(a) => {
            // g has the transposed shape of a.
            let s = node.value.shape();
            let r = s.len();
            let (rows, cols) = (s[r - 2], s[r - 1]);
            let mut back = vec![0.0; g.len()];
            for (gc, bc) in g.chunks(rows * cols).zip(back.chunks_mut(rows * cols)) {
                kernels::transpose(gc, rows, cols, bc);
            }
            add_into(nodes, grads, *a, back.into_iter());
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let q = *node.value.shape().last().unwrap();
            let mut back = vec![0.0; g.len()];
            for ((gr, yr), br) in g.chunks(q).zip(y.chunks(q)).zip(back.chunks_mut(q)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((b, g), y) in br.iter_mut().zip(gr).zip(yr) {
                    *b = y * (g - dot);
                }
            }
            add_into(nodes, grads, *a, back.into_iter());
        }
        Op::Relu(a) => add_into(
            nodes,
            grads,
            *a,
            g.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
        ),
        Op::Sigmoid(a) => add_into(nodes, grads, *a, g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y))),
        Op::Tanh(a) => add_into(nodes, grads, *a, g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y))),
        Op::Dropout { input, mask } => add_into(nodes, grads, *input, g.iter().zip(mask).map(|(g, m)| g * m)),
        Op::Reshape(a) => add_into(nodes, grads, *a, g.iter().copied()),
        Op::Permute { input, map } => {
            if let Some(acc) = slot(nodes, grads, *input) {
                for (&src, &gv) in map.iter().zip(g) {
                    acc[src] += gv;
                }
            }
        }
        Op::Narrow { input, dim, start } => {
            let s = nodes[input.0].value.shape();
            let len = node.value.shape()[*dim];
            let outer: usize = s[..*dim].iter().product();
            let inner: usize = s[dim + 1..].iter().product();
            if let Some(acc) = slot(nodes, grads, *input) {
                for o in 0..outer {
                    let base = (o * s[*dim] + start) * inner;
                    let gs = &g[o * len * inner..(o + 1) * len * inner];
                    for (a, gv) in acc[base..base + len * inner].iter_mut().zip(gs) {
                        *a += gv;
                    }
                }
            }
        }
        Op::Conv { input, kernel, bias, geom } => {
            // Take the three accumulators out so they can be borrowed together.
            let mut gi = slot(nodes, grads, *input).map(std::mem::take);
            let mut gk = slot(nodes, grads, *kernel).map(std::mem::take);
            let mut gb = slot(nodes, grads, *bias).map(std::mem::take);
            kernels::conv_backward(
                geom,
                val(*input),
                val(*kernel),
                g,
                gi.as_deref_mut(),
                gk.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (v, buf) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                if let Some(buf) = buf {
                    grads[v.0] = Some(buf);
                }
            }
        }
        Op::ChannelScale { input, weight } => {
            let s = node.value.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            let w = val(*weight);
            let x = val(*input);
            if let Some(acc) = slot(nodes, grads, *input) {
                for (n, (a, gv)) in acc.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    let wc = w[n % c];
                    a.iter_mut().zip(gv).for_each(|(a, g)| *a += g * wc);
                }
            }
            if let Some(acc) = slot(nodes, grads, *weight) {
                for (n, (xv, gv)) in x.chunks(inner).zip(g.chunks(inner)).enumerate() {
                    acc[n % c] += xv.iter().zip(gv).map(|(x, g)| x * g).sum::<f64>();
                }
            }
        }
        Op::ChannelShift { input, bias } => {
            let s = node.value.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            add_into(nodes, grads, *input, g.iter().copied());
            if let Some(acc) = slot(nodes, grads, *bias) {
                for (n, gv) in g.chunks(inner).enumerate() {
                    acc[n % c] += gv.iter().sum::<f64>();
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let s = nodes[input.0].value.shape();
            let (batch, d) = (s[0], s[1]);
            let o = nodes[weight.0].value.shape()[0];
            let (x, w) = (val(*input), val(*weight));
            if let Some(gx) = slot(nodes, grads, *input) {
                kernels::matmul_acc(g, w, gx, batch, o, d);
            }
            if let Some(gw) = slot(nodes, grads, *weight) {
                kernels::matmul_at_acc(g, x, gw, batch, o, d);
            }
            if let Some(bv) = bias {
                if let Some(gb) = slot(nodes, grads, *bv) {
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = node.value.shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            let gm = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (n, (gv, hv)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                sum_g[n % c] += gv.iter().sum::<f64>();
                sum_gx[n % c] += gv.iter().zip(hv).map(|(g, h)| g * h).sum::<f64>();
            }
            if let Some(acc) = slot(nodes, grads, *gamma) {
                acc.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v);
            }
            if let Some(acc) = slot(nodes, grads, *beta) {
                acc.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v);
            }
            if let Some(acc) = slot(nodes, grads, *input) {
                let count = (s[0] * inner) as f64;
                for (n, ((a, gv), hv)) in acc.chunks_mut(inner).zip(g.chunks(inner)).zip(xhat.chunks(inner)).enumerate() {
                    let ch = n % c;
                    let k = gm[ch] * inv_std[ch];
                    if *batch_stats {
                        let mg = sum_g[ch] / count;
                        let mgx = sum_gx[ch] / count;
                        for ((a, g), h) in a.iter_mut().zip(gv).zip(hv) {
                            *a += k * (g - mg - h * mgx);
                        }
                    } else {
                        a.iter_mut().zip(gv).for_each(|(a, g)| *a += k * g);
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let inner = xhat.len() / inv_std.len();
            let gm = gamma.map(val);
            if let Some(gv) = gamma {
                if let Some(acc) = slot(nodes, grads, *gv) {
                    for (gr, hr) in g.chunks(inner).zip(xhat.chunks(inner)) {
                        acc.iter_mut().zip(gr.iter().zip(hr)).for_each(|(a, (g, h))| *a += g * h);
                    }
                }
            }
            if let Some(bv) = beta {
                if let Some(acc) = slot(nodes, grads, *bv) {
                    for gr in g.chunks(inner) {
                        acc.iter_mut().zip(gr).for_each(|(a, g)| *a += g);
                    }
                }
            }
            if let Some(acc) = slot(nodes, grads, *input) {
                for (n, ((a, gr), hr)) in acc.chunks_mut(inner).zip(g.chunks(inner)).zip(xhat.chunks(inner)).enumerate() {
                    let dh: Vec<f64> = gr
                        .iter()
                        .enumerate()
                        .map(|(k, g)| gm.map_or(*g, |w| w[k] * g))
                        .collect();
                    let mean_dh = dh.iter().sum::<f64>() / inner as f64;
                    let mean_dhh = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / inner as f64;
                    for ((a, d), h) in a.iter_mut().zip(&dh).zip(hr) {
                        *a += inv_std[n] * (d - mean_dh - h * mean_dhh);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = nodes[logits.0].value.shape()[1];
            let batch = labels.len() as f64;
            if let Some(acc) = slot(nodes, grads, *logits) {
                for (i, a) in acc.iter_mut().enumerate() {
                    let onehot = if labels[i / classes] == i % classes { 1.0 } else { 0.0 };
                    *a += g[0] * (probs[i] - onehot) / batch;
                }
            }
        }
    }
}
