//! Wengert tape: every op appends a node holding its output value and the
//! information its backward rule needs. `backward` walks the nodes in reverse.

use super::kernels::{add_assign, axpy, dot, gemm_acc, matmul_acc, matmul_at_b_acc, transpose};
use crate::error::{Error, Result};
use crate::tensor::{numel, permute_into, strides, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Linear(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanDim1(Var),
    ConcatLast(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    TemporalConv {
        x: Var,
        w: Var,
        stride: usize,
    },
    JointMix {
        x: Var,
        a: Var,
    },
    TimeSubsample {
        x: Var,
        stride: usize,
    },
    DropAttention {
        x: Var,
        mask: Vec<bool>,
        row_sums: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// softmax output, `[B, H, L, L]`
        probs: Vec<F>,
        /// post-dropout weights when a mask was applied
        dropped: Option<(Vec<F>, Vec<bool>, Vec<F>)>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-channel statistics from a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Copies head `hi` of batch `bi` from `src[B, L, H·d]` into `dst[d, L]`.
fn gather_head_t<F: Scalar>(src: &[F], dst: &mut [F], bi: usize, hi: usize, l: usize, h: usize, d: usize) {
    for j in 0..l {
        let s = &src[(bi * l + j) * h * d + hi * d..][..d];
        for (c, &x) in s.iter().enumerate() {
            dst[c * l + j] = x;
        }
    }
}

/// Adds `src[d, L]` back into head `hi` of batch `bi` of `dst[B, L, H·d]`.
fn scatter_head_t<F: Scalar>(src: &[F], dst: &mut [F], bi: usize, hi: usize, l: usize, h: usize, d: usize) {
    for j in 0..l {
        let o = &mut dst[(bi * l + j) * h * d + hi * d..][..d];
        for (c, x) in o.iter_mut().enumerate() {
            *x += src[c * l + j];
        }
    }
}

#[allow(clippy::eq_op)]
fn check_finite<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    // x - x is NaN exactly when x is infinite or NaN
    let probe = t.data().iter().fold(F::zero(), |acc, &x| acc + (x - x));
    if probe == F::zero() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// `x[..., D] + b[D]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [d] {
            return Err(Error::shape("add_bias", [d], self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            add_assign(row, &bias);
        }
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    /// `x[..., K] · w[K, D] -> [..., D]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let k = *xs.last().ok_or_else(|| Error::invalid("linear_map", "input has no axes"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear_map", format!("[{k}, D]"), ws));
        }
        let d = ws[1];
        let m = numel(&xs) / k.max(1);
        let mut out = vec![F::zero(); m * d];
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, d);
        let mut shape = xs;
        *shape.last_mut().unwrap() = d;
        let value = Tensor::new(shape, out)?;
        self.push("linear_map", value, Op::Linear(x, w), &[x, w])
    }

    /// Batched product: `a[B, M, K] · b[B, K, N]`, or `a · bᵀ` with `b[B, N, K]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asz.len() != 3 || bsz.len() != 3 || asz[0] != bsz[0] {
            return Err(Error::shape("bmm", asz, bsz));
        }
        let (bat, m, k) = (asz[0], asz[1], asz[2]);
        let n = if trans_b { bsz[1] } else { bsz[2] };
        let kb = if trans_b { bsz[2] } else { bsz[1] };
        if kb != k {
            return Err(Error::shape("bmm", asz, bsz));
        }
        let mut out = vec![F::zero(); bat * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bat {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                gemm_acc(ab, false, bb, trans_b, ob, m, k, n);
            }
        }
        let value = Tensor::new(vec![bat, m, n], out)?;
        self.push("bmm", value, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        self.push("permute", value, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = crate::tensor::softmax(self.value(x), axis)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / F::of(t.numel() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean over the middle axis: `[B, L, C] -> [B, C]`.
    pub fn mean_dim1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape("mean_dim1", "[B, L>0, C]", s));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let inv = F::one() / F::of(l as f64);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); b * c];
        for i in 0..b {
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..l {
                add_assign(orow, &xd[(i * l + j) * c..(i * l + j + 1) * c]);
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        self.push("mean_dim1", value, Op::MeanDim1(x), &[x])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::ConcatLast(xs.to_vec()), xs)
    }

    /// Training-mode batch norm over all leading axes of `x[..., C]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let c = self.bn_check(x, gamma, beta, eps)?;
        let xt = self.value(x);
        let m = xt.numel() / c;
        if m == 0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }
        let mf = F::of(m as f64);
        let mut mean = vec![F::zero(); c];
        for row in xt.data().chunks(c) {
            add_assign(&mut mean, row);
        }
        mean.iter_mut().for_each(|v| *v /= mf);
        let mut var = vec![F::zero(); c];
        for row in xt.data().chunks(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let inv_std: Vec<F> = var.iter().map(|&s| F::one() / (s / mf + eps).sqrt()).collect();
        let unbiased: Vec<F> = var.iter().map(|&s| s / F::of((m.max(2) - 1) as f64)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xt.numel());
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let stats = BatchStats { mean, var: unbiased };
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Evaluation-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[F], running_var: &[F], eps: F) -> Result<Var> {
        let c = self.bn_check(x, gamma, beta, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", c, (running_mean.len(), running_var.len())));
        }
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xt = self.value(x);
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(c) {
            for j in 0..c {
                out.push(g[j] * (row[j] - running_mean[j]) * inv_std[j] + b[j]);
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<usize> {
        if !(eps > F::zero()) {
            return Err(Error::invalid("batch_norm", format!("eps must be positive, got {eps}")));
        }
        let c = *self.shape(x).last().ok_or_else(|| Error::invalid("batch_norm", "input has no axes"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", [c], (self.shape(gamma), self.shape(beta))));
        }
        Ok(c)
    }

    /// Zero-padded convolution along axis 1 of `x[N, T, V, Ci]` with `w[K, Ci, Co]`, K odd.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 3 || ws[1] != xs[3] {
            return Err(Error::shape("temporal_conv", "x[N,T,V,Ci], w[K,Ci,Co]", (xs, ws)));
        }
        let (k, co) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(Error::invalid("temporal_conv", format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::invalid("temporal_conv", "stride must be positive"));
        }
        let (n, t, v, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let t_out = conv_out_len(t, k, stride);
        let mut out = vec![F::zero(); n * t_out * v * co];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for_each_span(n, t, t_out, k, stride, |b, kk, ti, to, rows| {
                let xb = &xd[(b * t + ti) * v * ci..(b * t + ti + rows) * v * ci];
                let wk = &wd[kk * ci * co..(kk + 1) * ci * co];
                let ob = &mut out[(b * t_out + to) * v * co..(b * t_out + to + rows) * v * co];
                matmul_acc(xb, wk, ob, rows * v, ci, co);
            });
        }
        let value = Tensor::new(vec![n, t_out, v, co], out)?;
        self.push("temporal_conv", value, Op::TemporalConv { x, w, stride }, &[x, w])
    }

    /// `y[n, t, w, c] = Σ_v a[v, w] · x[n, t, v, c]`.
    pub fn joint_mix(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xs, as_) = (self.shape(x).to_vec(), self.shape(a).to_vec());
        if xs.len() != 4 || as_ != [xs[2], xs[2]] {
            return Err(Error::shape("joint_mix", format!("a[{0}, {0}]", xs.get(2).copied().unwrap_or(0)), as_));
        }
        let (v, c) = (xs[2], xs[3]);
        let blocks = xs[0] * xs[1];
        let mut out = vec![F::zero(); numel(&xs)];
        {
            let (xd, ad) = (self.value(x).data(), self.value(a).data());
            for i in 0..blocks {
                let r = i * v * c..(i + 1) * v * c;
                matmul_at_b_acc(ad, &xd[r.clone()], &mut out[r], v, v, c);
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push("joint_mix", value, Op::JointMix { x, a }, &[x, a])
    }

    /// Keeps every `stride`-th frame of `x[N, T, V, C]`, starting at frame 0.
    pub fn time_subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || stride == 0 {
            return Err(Error::invalid("time_subsample", format!("shape {xs:?}, stride {stride}")));
        }
        let (n, t, row) = (xs[0], xs[1], xs[2] * xs[3]);
        let t_out = t.div_ceil(stride);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * t_out * row);
        for b in 0..n {
            for to in 0..t_out {
                let ti = to * stride;
                out.extend_from_slice(&xd[(b * t + ti) * row..(b * t + ti + 1) * row]);
            }
        }
        let value = Tensor::new(vec![n, t_out, xs[2], xs[3]], out)?;
        self.push("time_subsample", value, Op::TimeSubsample { x, stride }, &[x])
    }

    /// Masks entries of row-stochastic `x` (last axis) and renormalizes each row.
    /// `keep[i] == false` drops entry `i`. A row with nothing kept passes through unchanged.
    pub fn drop_attention(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xt = self.value(x);
        if keep.len() != xt.numel() {
            return Err(Error::shape("drop_attention", xt.numel(), keep.len()));
        }
        let l = *xt.shape().last().ok_or_else(|| Error::invalid("drop_attention", "scalar input"))?;
        let mut out = xt.data().to_vec();
        let mut row_sums = Vec::with_capacity(out.len() / l.max(1));
        if l > 0 {
            for (row, kr) in out.chunks_mut(l).zip(keep.chunks(l)) {
                let s: F = row.iter().zip(kr).filter(|(_, &k)| k).map(|(&v, _)| v).sum();
                if s > F::zero() {
                    for (v, &k) in row.iter_mut().zip(kr) {
                        *v = if k { *v / s } else { F::zero() };
                    }
                }
                // zero marks a pass-through row
                row_sums.push(s.max(F::zero()));
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push("drop_attention", value, Op::DropAttention { x, mask: keep, row_sums }, &[x])
    }

    /// Multi-head scaled dot-product attention over `q[B, L, H·dk]`, `k[B, L, H·dk]`
    /// and `v[B, L, H·dv]`, where head `h` owns channel block `h` of each. Scores are
    /// scaled by `1/√dk` and softmaxed over keys. A `keep` mask laid out `[B, H, L, L]`
    /// drops and renormalizes weights as [`Tape::drop_attention`] does. Returns `[B, L, H·dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, keep: Option<Vec<bool>>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let ok = qs.len() == 3 && qs == ks && vs.len() == 3 && vs[..2] == qs[..2];
        if !ok || heads == 0 || qs[2] % heads != 0 || vs[2] % heads != 0 || qs[2] == 0 {
            return Err(Error::shape(
                "attention",
                format!("q, k [B, L, H·dk] and v [B, L, H·dv] with H = {heads}"),
                (qs, ks, vs),
            ));
        }
        let (b, l, h) = (qs[0], qs[1], heads);
        let (dk, dv) = (qs[2] / h, vs[2] / h);
        let n_weights = b * h * l * l;
        if let Some(m) = &keep {
            if m.len() != n_weights {
                return Err(Error::shape("attention", n_weights, m.len()));
            }
        }
        let scale = F::of(1.0 / (dk as f64).sqrt());
        let mut probs = vec![F::zero(); n_weights];
        let mut dropped = keep.map(|m| (vec![F::zero(); n_weights], m, Vec::with_capacity(b * h * l)));
        let mut out = vec![F::zero(); b * l * h * dv];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            // per-head keys and values stored [d, L], so inner loops run over positions
            let (mut kt, mut vt) = (vec![F::zero(); dk * l], vec![F::zero(); dv * l]);
            for bi in 0..b {
                for hi in 0..h {
                    gather_head_t(kd, &mut kt, bi, hi, l, h, dk);
                    gather_head_t(vd, &mut vt, bi, hi, l, h, dv);
                    for i in 0..l {
                        let r = ((bi * h + hi) * l + i) * l;
                        let prow = &mut probs[r..r + l];
                        let qi = &qd[(bi * l + i) * h * dk + hi * dk..][..dk];
                        for (d, &qv) in qi.iter().enumerate() {
                            axpy(prow, qv * scale, &kt[d * l..(d + 1) * l]);
                        }
                        let m = prow.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
                        prow.iter_mut().for_each(|p| *p -= m);
                        F::exp_in_place(prow);
                        let inv = F::one() / prow.iter().fold(F::zero(), |z, &p| z + p);
                        for p in prow.iter_mut() {
                            *p *= inv;
                        }
                        let arow: &[F] = match &mut dropped {
                            Some((w, keep, sums)) => {
                                let (wr, kr) = (&mut w[r..r + l], &keep[r..r + l]);
                                let s: F = prow.iter().zip(kr).filter(|(_, &k)| k).map(|(&p, _)| p).sum();
                                for ((a, &p), &k) in wr.iter_mut().zip(prow.iter()).zip(kr) {
                                    *a = if s <= F::zero() {
                                        p
                                    } else if k {
                                        p / s
                                    } else {
                                        F::zero()
                                    };
                                }
                                sums.push(s.max(F::zero()));
                                wr
                            }
                            None => prow,
                        };
                        let orow = &mut out[(bi * l + i) * h * dv + hi * dv..][..dv];
                        for (d, o) in orow.iter_mut().enumerate() {
                            *o = dot(arow, &vt[d * l..(d + 1) * l]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, l, h * dv], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                dropped,
            },
            &[q, k, v],
        )
    }

    /// Attention weights `[B, H, L, L]` (after any dropout) of a node made by [`Tape::attention`].
    pub fn attention_weights(&self, y: Var) -> Option<Tensor<F>> {
        let Op::Attention {
            q, heads, probs, dropped, ..
        } = &self.nodes[y.0].op
        else {
            return None;
        };
        let qs = self.shape(*q);
        let w = dropped.as_ref().map_or(probs, |d| &d.0);
        Tensor::new(vec![qs[0], *heads, qs[1], qs[1]], w.clone()).ok()
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("[{}, K]", labels.len()), s));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = F::zero();
        for (row, &y) in z.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
            loss += lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / F::of(n as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // accumulate into an input's gradient if it needs one
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_assign(s, g));
                acc(*b, &mut |s| add_assign(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_assign(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &y)| *d += gv * y));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * x));
            }
            Op::Scale(x, k) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *k)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| add_assign(s, g));
                let d = self.value(*b).numel();
                acc(*b, &mut |s| {
                    for row in g.chunks(d) {
                        add_assign(s, row);
                    }
                });
            }
            Op::Linear(x, w) => {
                let ws = self.shape(*w);
                let (k, d) = (ws[0], ws[1]);
                let m = self.value(*x).numel() / k.max(1);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| gemm_acc(g, false, wd, true, s, m, d, k));
                acc(*w, &mut |s| gemm_acc(xd, true, g, false, s, k, m, d));
            }
            Op::Bmm { a, b, trans_b } => {
                let asz = self.shape(*a);
                let (bat, m, k) = (asz[0], asz[1], asz[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..bat {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        let sb = &mut s[i * m * k..(i + 1) * m * k];
                        gemm_acc(gb, false, bb, !*trans_b, sb, m, n, k);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..bat {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ad[i * m * k..(i + 1) * m * k];
                        let sb = &mut s[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_acc(gb, true, ab, false, sb, n, m, k);
                        } else {
                            gemm_acc(ab, true, gb, false, sb, k, m, n);
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                // gradient is the inverse permutation of g
                let mut inv = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inv[a] = o;
                }
                let gs = strides(node.value.shape());
                let in_shape = self.shape(*x);
                let src: Vec<usize> = inv.iter().map(|&o| gs[o]).collect();
                let mut gx = Vec::with_capacity(g.len());
                permute_into(g, in_shape, &src, &mut gx);
                acc(*x, &mut |s| add_assign(s, &gx));
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_assign(s, g)),
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc(*x, &mut |s| {
                    if inner == 1 {
                        for ((sr, gr), yr) in s.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                            let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &y) in sr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (gv - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: F = (0..len).map(|q| g[base + q * inner] * out[base + q * inner]).sum();
                            for q in 0..len {
                                let p = base + q * inner;
                                s[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |s| {
                for ((d, &gv), &y) in s.iter_mut().zip(g).zip(out) {
                    if y > F::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = F::of(self.value(*x).numel() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanDim1(x) => {
                let xs = self.shape(*x);
                let (b, l, c) = (xs[0], xs[1], xs[2]);
                let inv = F::one() / F::of(l as f64);
                acc(*x, &mut |s| {
                    for i in 0..b {
                        for j in 0..l {
                            let row = &mut s[(i * l + j) * c..(i * l + j + 1) * c];
                            for (d, &gv) in row.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::ConcatLast(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total.max(1);
                let mut off = 0;
                for &v in xs {
                    let w = *self.shape(v).last().unwrap();
                    acc(v, &mut |s| {
                        for r in 0..rows {
                            add_assign(&mut s[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                acc(*gamma, &mut |s| add_assign(s, &sum_gx));
                acc(*beta, &mut |s| add_assign(s, &sum_g));
                let gm = self.value(*gamma).data();
                let mf = F::of(m as f64);
                acc(*x, &mut |s| {
                    for ((sr, gr), hr) in s.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            sr[j] += gm[j] * inv_std[j] / mf * (mf * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xd = self.value(*x).data();
                let gm = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for (gr, xr) in g.chunks(c).zip(xd.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(c) {
                        add_assign(s, gr);
                    }
                });
                acc(*x, &mut |s| {
                    for (sr, gr) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            sr[j] += gr[j] * gm[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::TemporalConv { x, w, stride } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, t, v, ci) = (xs[0], xs[1], xs[2], xs[3]);
                let (k, co) = (ws[0], ws[2]);
                let t_out = node.value.shape()[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |s| {
                    // per-tap transposed weights, [Co, Ci]
                    let wt: Vec<Vec<F>> = (0..k).map(|kk| transpose(&wd[kk * ci * co..(kk + 1) * ci * co], ci, co)).collect();
                    for_each_span(n, t, t_out, k, *stride, |b, kk, ti, to, rows| {
                        let gb = &g[(b * t_out + to) * v * co..(b * t_out + to + rows) * v * co];
                        let sb = &mut s[(b * t + ti) * v * ci..(b * t + ti + rows) * v * ci];
                        matmul_acc(gb, &wt[kk], sb, rows * v, co, ci);
                    });
                });
                acc(*w, &mut |s| {
                    for_each_span(n, t, t_out, k, *stride, |b, kk, ti, to, rows| {
                        let gb = &g[(b * t_out + to) * v * co..(b * t_out + to + rows) * v * co];
                        let xb = &xd[(b * t + ti) * v * ci..(b * t + ti + rows) * v * ci];
                        let sk = &mut s[kk * ci * co..(kk + 1) * ci * co];
                        matmul_at_b_acc(xb, gb, sk, rows * v, ci, co);
                    });
                });
            }
            Op::JointMix { x, a } => {
                let xs = self.shape(*x);
                let (v, c) = (xs[2], xs[3]);
                let blocks = xs[0] * xs[1];
                let (xd, ad) = (self.value(*x).data(), self.value(*a).data());
                acc(*x, &mut |s| {
                    for i in 0..blocks {
                        let r = i * v * c..(i + 1) * v * c;
                        matmul_acc(ad, &g[r.clone()], &mut s[r], v, v, c);
                    }
                });
                acc(*a, &mut |s| {
                    for i in 0..blocks {
                        let r = i * v * c..(i + 1) * v * c;
                        gemm_acc(&xd[r.clone()], false, &g[r], true, s, v, c, v);
                    }
                });
            }
            Op::TimeSubsample { x, stride } => {
                let xs = self.shape(*x);
                let (n, t, row) = (xs[0], xs[1], xs[2] * xs[3]);
                let t_out = node.value.shape()[1];
                acc(*x, &mut |s| {
                    for b in 0..n {
                        for to in 0..t_out {
                            let ti = to * stride;
                            add_assign(
                                &mut s[(b * t + ti) * row..(b * t + ti + 1) * row],
                                &g[(b * t_out + to) * row..(b * t_out + to + 1) * row],
                            );
                        }
                    }
                });
            }
            Op::DropAttention { x, mask, row_sums } => {
                let l = *node.value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for (r, &rs) in row_sums.iter().enumerate() {
                        let span = r * l..(r + 1) * l;
                        let (gr, yr, kr) = (&g[span.clone()], &out[span.clone()], &mask[span.clone()]);
                        let sr = &mut s[span];
                        if rs == F::zero() {
                            add_assign(sr, gr);
                            continue;
                        }
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for q in 0..l {
                            if kr[q] {
                                sr[q] += (gr[q] - dot) / rs;
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                dropped,
            } => {
                let (qs, vs) = (self.shape(*q), self.shape(*v));
                let (b, l, h) = (qs[0], qs[1], *heads);
                let (dk, dv) = (qs[2] / h, vs[2] / h);
                let scale = F::of(1.0 / (dk as f64).sqrt());
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let weights = dropped.as_ref().map_or(probs, |d| &d.0);
                let (mut gq, mut gk, mut gv) = (vec![F::zero(); qd.len()], vec![F::zero(); kd.len()], vec![F::zero(); vd.len()]);
                let mut gw = vec![F::zero(); l];
                let mut gs = vec![F::zero(); l];
                let (mut kt, mut vt) = (vec![F::zero(); dk * l], vec![F::zero(); dv * l]);
                let (mut gkt, mut gvt) = (vec![F::zero(); dk * l], vec![F::zero(); dv * l]);
                for bi in 0..b {
                    for hi in 0..h {
                        gather_head_t(kd, &mut kt, bi, hi, l, h, dk);
                        gather_head_t(vd, &mut vt, bi, hi, l, h, dv);
                        gkt.iter_mut().for_each(|x| *x = F::zero());
                        gvt.iter_mut().for_each(|x| *x = F::zero());
                        for i in 0..l {
                            let row = (bi * h + hi) * l + i;
                            let r = row * l;
                            let gi = &g[(bi * l + i) * h * dv + hi * dv..][..dv];
                            let arow = &weights[r..r + l];
                            gw.iter_mut().for_each(|x| *x = F::zero());
                            for (d, &gd) in gi.iter().enumerate() {
                                axpy(&mut gw, gd, &vt[d * l..(d + 1) * l]);
                                axpy(&mut gvt[d * l..(d + 1) * l], gd, arow);
                            }
                            if let Some((_, keep, sums)) = dropped {
                                let s = sums[row];
                                if s != F::zero() {
                                    let d = dot(&gw, arow);
                                    for (j, gwj) in gw.iter_mut().enumerate() {
                                        *gwj = if keep[r + j] { (*gwj - d) / s } else { F::zero() };
                                    }
                                }
                            }
                            let prow = &probs[r..r + l];
                            let d = dot(&gw, prow);
                            for ((o, &p), &w) in gs.iter_mut().zip(prow).zip(&gw) {
                                *o = p * (w - d) * scale;
                            }
                            let qi = (bi * l + i) * h * dk + hi * dk;
                            for dd in 0..dk {
                                gq[qi + dd] += dot(&gs, &kt[dd * l..(dd + 1) * l]);
                                axpy(&mut gkt[dd * l..(dd + 1) * l], qd[qi + dd], &gs);
                            }
                        }
                        scatter_head_t(&gkt, &mut gk, bi, hi, l, h, dk);
                        scatter_head_t(&gvt, &mut gv, bi, hi, l, h, dv);
                    }
                }
                acc(*q, &mut |s| add_assign(s, &gq));
                acc(*k, &mut |s| add_assign(s, &gk));
                acc(*v, &mut |s| add_assign(s, &gv));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / F::of(n as f64);
                acc(*logits, &mut |s| {
                    for (r, &y) in labels.iter().enumerate() {
                        for q in 0..k {
                            let onehot = if q == y { F::one() } else { F::zero() };
                            s[r * k + q] += (probs[r * k + q] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}

/// Output length of a same-padded convolution with odd kernel `k`.
pub fn conv_out_len(t: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (t + 2 * pad - k) / stride + 1
}

/// Calls `f(batch, tap, t_in, t_out, rows)` for runs of output frames that read
/// in-range input frames through `tap`. With stride 1 a run covers every such
/// frame; otherwise each run is a single frame.
fn for_each_span(n: usize, t: usize, t_out: usize, k: usize, stride: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let pad = (k - 1) / 2;
    for b in 0..n {
        for kk in 0..k {
            // output frames `to` with 0 <= to*stride + kk - pad < t
            let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
            let hi = if t + pad <= kk {
                0
            } else {
                ((t + pad - kk - 1) / stride + 1).min(t_out)
            };
            if lo >= hi {
                continue;
            }
            if stride == 1 {
                f(b, kk, lo + kk - pad, lo, hi - lo);
            } else {
                for to in lo..hi {
                    f(b, kk, to * stride + kk - pad, to, 1);
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of a leaf, or `None` when it was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when it was not on any path to the loss.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}
