//! Primitive operations on [`Var`] and their differentiable backward rules.

use std::sync::Arc;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// A family of index sets over a flat domain, e.g. the parameter indices of
/// each filter.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexSets {
    sets: Vec<Vec<usize>>,
    domain: usize,
}

impl IndexSets {
    pub fn new(sets: Vec<Vec<usize>>, domain: usize) -> Result<Self> {
        for s in &sets {
            if s.is_empty() {
                return Err(Error::invalid("index set must be non-empty"));
            }
            if s.iter().any(|&i| i >= domain) {
                return Err(Error::invalid(format!("index set exceeds domain {domain}")));
            }
        }
        Ok(IndexSets { sets, domain })
    }

    /// Consecutive rows of a `[rows, row_len]` layout.
    pub fn rows(rows: usize, row_len: usize) -> Self {
        let sets = (0..rows).map(|r| (r * row_len..(r + 1) * row_len).collect()).collect();
        IndexSets { sets, domain: rows * row_len }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.sets.iter().map(|s| s.iter().map(|&i| x[i]).sum::<f64>() / s.len() as f64).collect()
    }

    fn mean_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domain];
        for (s, &gk) in self.sets.iter().zip(g) {
            let v = gk / s.len() as f64;
            for &i in s {
                out[i] += v;
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Strides of the axis split `[outer, extent, inner]` of `shape` at `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn check_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands live on different tapes"))
        }
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let shape = same_shape(name, &self, &other)?;
        let data = zip_map(&self.value(), &other.value(), f);
        self.tape.push(Tensor::from_parts(shape, data), op)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddConst(self.id), |a| a + c)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        same_shape("dot", &self, &other)?;
        let v = crate::tensor::dot(self.value().data(), other.value().data());
        self.tape.push(Tensor::scalar(v), Op::Dot(self.id, other.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(v), Op::SumAll(self.id))
    }

    /// `self * s` for a one-element `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&s)?;
        let c = s.value().item()?;
        self.unary(Op::MulScalar(self.id, s.id), |a| a * c)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value().data(), false, other.value().data(), false, &mut out, false);
        self.tape.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let v = self.value();
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        self.tape.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn flatten(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.reshape(&[n])
    }

    /// Repeats a vector of length `shape[axis]` along every other axis of `shape`.
    pub fn broadcast_axis(self, shape: &[usize], axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= shape.len() || s.len() != 1 || s[0] != shape[axis] {
            return Err(Error::shape("broadcast_axis", format!("{s:?} onto {shape:?} at axis {axis}")));
        }
        let v = self.value();
        let (outer, ext, inner) = axis_split(shape, axis);
        let mut out = Vec::with_capacity(outer * ext * inner);
        for _ in 0..outer {
            for &x in v.data() {
                out.extend(std::iter::repeat_n(x, inner));
            }
        }
        self.tape.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastAxis { src: self.id, axis })
    }

    /// Sums over every axis except `axis`.
    pub fn sum_keep_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape("sum_keep_axis", format!("axis {axis} of {s:?}")));
        }
        let v = self.value();
        let (outer, ext, inner) = axis_split(&s, axis);
        let mut out = vec![0.0; ext];
        for o in 0..outer {
            for (e, acc) in out.iter_mut().enumerate() {
                let base = (o * ext + e) * inner;
                *acc += v.data()[base..base + inner].iter().sum::<f64>();
            }
        }
        self.tape.push(Tensor::from_parts(vec![ext], out), Op::SumKeepAxis { src: self.id, axis })
    }

    /// Picks flat elements by index into a vector.
    pub fn gather(self, idx: Arc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        if idx.is_empty() || idx.iter().any(|&i| i >= v.numel()) {
            return Err(Error::shape("gather", format!("indices out of range for {:?}", v.shape())));
        }
        let out: Vec<f64> = idx.iter().map(|&i| v.data()[i]).collect();
        self.tape.push(Tensor::from_parts(vec![idx.len()], out), Op::Gather { src: self.id, idx })
    }

    /// Adds the flat elements of `self` into a zero tensor of `shape` at `idx`.
    pub fn scatter_add(self, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let n: usize = shape.iter().product();
        if idx.len() != v.numel() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add", format!("{} values into {shape:?}", v.numel())));
        }
        let mut out = vec![0.0; n];
        for (&i, &x) in idx.iter().zip(v.data()) {
            out[i] += x;
        }
        self.tape.push(Tensor::from_parts(shape.to_vec(), out), Op::ScatterAdd { src: self.id, idx })
    }

    /// 2-D convolution of NCHW input with OIHW weights (no bias).
    pub fn conv2d(self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.check_tape(&w)?;
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        self.conv_with(w, geom)
    }

    fn conv_with(self, w: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let out = kernels::conv2d(&geom, self.value().data(), w.value().data());
        self.tape.push(Tensor::from_parts(geom.output_shape(), out), Op::Conv2d { x: self.id, w: w.id, geom })
    }

    fn conv_input_grad(self, w: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let out = kernels::conv2d_input_grad(&geom, self.value().data(), w.value().data());
        self.tape
            .push(Tensor::from_parts(geom.input_shape(), out), Op::ConvInputGrad { gy: self.id, w: w.id, geom })
    }

    fn conv_weight_grad(x: Var<'t>, gy: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let out = kernels::conv2d_weight_grad(&geom, x.value().data(), gy.value().data());
        x.tape
            .push(Tensor::from_parts(geom.weight_shape(), out), Op::ConvWeightGrad { x: x.id, gy: gy.id, geom })
    }

    /// Non-overlapping `kh × kw` average pooling of NCHW input.
    pub fn avg_pool2d(self, kh: usize, kw: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] % kh != 0 || s[3] % kw != 0 {
            return Err(Error::shape("avg_pool2d", format!("{s:?} with window {kh}x{kw}")));
        }
        let out = kernels::avg_pool(&s, kh, kw, self.value().data());
        let shape = vec![s[0], s[1], s[2] / kh, s[3] / kw];
        self.tape.push(Tensor::from_parts(shape, out), Op::AvgPool { src: self.id, kh, kw })
    }

    fn avg_pool_adjoint(self, in_shape: &[usize], kh: usize, kw: usize) -> Result<Var<'t>> {
        let out = kernels::avg_pool_adjoint(in_shape, kh, kw, self.value().data());
        self.tape.push(Tensor::from_parts(in_shape.to_vec(), out), Op::AvgPoolAdjoint { src: self.id, kh, kw })
    }

    /// Mean of the flat elements of `self` over each index set.
    pub fn mean_over_index_set(self, sets: Arc<IndexSets>) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() != sets.domain() || sets.is_empty() {
            return Err(Error::shape("mean_over_index_set", format!("{} values, domain {}", v.numel(), sets.domain())));
        }
        let out = sets.mean(v.data());
        self.tape.push(Tensor::from_parts(vec![sets.len()], out), Op::IndexMean { src: self.id, sets })
    }

    fn mean_over_index_set_adjoint(self, sets: Arc<IndexSets>) -> Result<Var<'t>> {
        let out = sets.mean_adjoint(self.value().data());
        self.tape.push(Tensor::from_parts(vec![sets.domain()], out), Op::IndexMeanAdjoint { src: self.id, sets })
    }

    // ---- composites -------------------------------------------------------

    pub fn relu(self) -> Result<Var<'t>> {
        let mask = self.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.mul(self.tape.constant(mask)?)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Result<Var<'t>> {
        let sign = self.value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        self.mul(self.tape.constant(sign)?)
    }

    /// `k × k`, stride-`k` max pooling; the gradient goes to the argmax, ties to the lowest index.
    pub fn max_pool2d(self, k: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape("max_pool2d", format!("{s:?} with window {k}")));
        }
        let idx: Arc<[usize]> = kernels::max_pool_argmax(&s, k, self.value().data()).into();
        self.gather(idx)?.reshape(&[s[0], s[1], s[2] / k, s[3] / k])
    }

    /// Adds a per-channel (axis 1) bias.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("add_bias", format!("{s:?}")));
        }
        self.add(bias.broadcast_axis(&s, 1)?)
    }

    /// Fully connected layer: `x [N, in] · wᵀ [in, out] + b`.
    pub fn dense(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul(w.t()?)?.add_bias(b)
    }

    /// Batch normalization with fixed running statistics, which are not differentiated.
    pub fn batchnorm2d_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var<'t>> {
        let s = self.shape();
        let c = s.get(1).copied().unwrap_or(0);
        if s.len() != 4 || gamma.shape() != [c] || beta.shape() != [c] || running_mean.shape() != [c] {
            return Err(Error::shape("batchnorm2d", format!("input {s:?}")));
        }
        let tape = self.tape;
        let inv_std = tape.constant(running_var.map(|v| 1.0 / (v + eps).sqrt()))?;
        let scale = gamma.mul(inv_std)?;
        let shift = beta.sub(scale.mul(tape.constant(running_mean.clone())?)?)?;
        self.mul(scale.broadcast_axis(&s, 1)?)?.add(shift.broadcast_axis(&s, 1)?)
    }

    /// Batch normalization with batch statistics. Also returns the batch mean and
    /// biased batch variance per channel for running-statistics updates.
    pub fn batchnorm2d_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Tensor, Tensor)> {
        let s = self.shape();
        let c = s.get(1).copied().unwrap_or(0);
        if s.len() != 4 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batchnorm2d", format!("input {s:?}")));
        }
        let m = (s[0] * s[2] * s[3]) as f64;
        let mean = self.sum_keep_axis(1)?.scale(1.0 / m)?;
        let centered = self.sub(mean.broadcast_axis(&s, 1)?)?;
        let var = centered.mul(centered)?.sum_keep_axis(1)?.scale(1.0 / m)?;
        let ones = self.tape.constant(Tensor::ones(&[c]))?;
        let inv_std = ones.div(var.add_const(eps)?.sqrt()?)?;
        let y = centered.mul(inv_std.mul(gamma)?.broadcast_axis(&s, 1)?)?.add(beta.broadcast_axis(&s, 1)?)?;
        Ok((y, (*mean.value()).clone(), (*var.value()).clone()))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (n, k) = (s[0], s[1]);
        let tape = self.tape;
        let v = self.value();
        let row_max: Vec<f64> =
            v.data().chunks(k).map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let shifted = self.sub(tape.constant(Tensor::from_vec(row_max))?.broadcast_axis(&s, 0)?)?;
        let log_sum = shifted.exp()?.sum_keep_axis(0)?.ln()?;
        let picks: Arc<[usize]> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
        let picked = shifted.gather(picks)?;
        log_sum.sub(picked)?.sum()?.scale(1.0 / n as f64)
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.dot(self)?.sqrt()
    }

    /// `1 − cos(self, other)`.
    pub fn cosine_distance(self, other: Var<'t>) -> Result<Var<'t>> {
        let denom = self.l2_norm()?.mul(other.l2_norm()?)?;
        self.dot(other)?.div(denom)?.neg()?.add_const(1.0)
    }

    /// Flat elements `start..start + len` as a vector.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        if len == 0 || start + len > self.numel() {
            return Err(Error::shape("slice", format!("{start}+{len} of {}", self.numel())));
        }
        self.gather((start..start + len).collect())
    }
}

/// Concatenates the flattened inputs into one vector.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
    let total: usize = parts.iter().map(|p| p.numel()).sum();
    let mut offset = 0;
    let mut acc: Option<Var<'t>> = None;
    for p in parts {
        first.check_tape(p)?;
        let n = p.numel();
        let placed = p.scatter_add((offset..offset + n).collect(), &[total])?;
        offset += n;
        acc = Some(match acc {
            Some(a) => a.add(placed)?,
            None => placed,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Gradients of node `id`'s inputs given the gradient `g` of its output.
pub(super) fn input_grads<'t>(
    tape: &'t Tape,
    id: usize,
    op: &Op,
    g: Var<'t>,
    needs: &[bool],
) -> Result<Vec<(usize, Var<'t>)>> {
    let v = |i: usize| tape.var_at(i);
    let want = |i: usize| needs[i];
    let mut out = Vec::with_capacity(2);
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if want(*a) {
                out.push((*a, g));
            }
            if want(*b) {
                out.push((*b, g));
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                out.push((*a, g));
            }
            if want(*b) {
                out.push((*b, g.neg()?));
            }
        }
        Op::Mul(a, b) => {
            if want(*a) {
                out.push((*a, g.mul(v(*b))?));
            }
            if want(*b) {
                out.push((*b, g.mul(v(*a))?));
            }
        }
        Op::Div(a, b) => {
            if want(*a) {
                out.push((*a, g.div(v(*b))?));
            }
            if want(*b) {
                out.push((*b, g.mul(v(id))?.div(v(*b))?.neg()?));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.scale(*c)?)),
        Op::AddConst(a) => out.push((*a, g)),
        Op::Exp(a) => out.push((*a, g.mul(v(id))?)),
        Op::Log(a) => out.push((*a, g.div(v(*a))?)),
        Op::Sqrt(a) => out.push((*a, g.scale(0.5)?.div(v(id))?)),
        Op::Dot(a, b) => {
            if want(*a) {
                out.push((*a, v(*b).mul_scalar(g)?));
            }
            if want(*b) {
                out.push((*b, v(*a).mul_scalar(g)?));
            }
        }
        Op::SumAll(a) => {
            let ones = tape.constant(Tensor::ones(&v(*a).shape()))?;
            out.push((*a, ones.mul_scalar(g)?));
        }
        Op::MulScalar(a, s) => {
            if want(*a) {
                out.push((*a, g.mul_scalar(v(*s))?));
            }
            if want(*s) {
                let d = g.dot(v(*a))?;
                let s_shape = v(*s).shape();
                out.push((*s, if s_shape.is_empty() { d } else { d.reshape(&s_shape)? }));
            }
        }
        Op::MatMul(a, b) => {
            if want(*a) {
                out.push((*a, g.matmul(v(*b).t()?)?));
            }
            if want(*b) {
                out.push((*b, v(*a).t()?.matmul(g)?));
            }
        }
        Op::Transpose(a) => out.push((*a, g.t()?)),
        Op::Reshape(a) => out.push((*a, g.reshape(&v(*a).shape())?)),
        Op::BroadcastAxis { src, axis } => out.push((*src, g.sum_keep_axis(*axis)?)),
        Op::SumKeepAxis { src, axis } => out.push((*src, g.broadcast_axis(&v(*src).shape(), *axis)?)),
        Op::Gather { src, idx } => out.push((*src, g.scatter_add(Arc::clone(idx), &v(*src).shape())?)),
        Op::ScatterAdd { src, idx } => {
            let gathered = g.gather(Arc::clone(idx))?;
            out.push((*src, gathered.reshape(&v(*src).shape())?));
        }
        Op::Conv2d { x, w, geom } => {
            if want(*x) {
                out.push((*x, g.conv_input_grad(v(*w), *geom)?));
            }
            if want(*w) {
                out.push((*w, Var::conv_weight_grad(v(*x), g, *geom)?));
            }
        }
        Op::ConvInputGrad { gy, w, geom } => {
            // g has the input shape of the forward convolution.
            if want(*gy) {
                out.push((*gy, g.conv_with(v(*w), *geom)?));
            }
            if want(*w) {
                out.push((*w, Var::conv_weight_grad(g, v(*gy), *geom)?));
            }
        }
        Op::ConvWeightGrad { x, gy, geom } => {
            // g has the weight shape of the forward convolution.
            if want(*x) {
                out.push((*x, v(*gy).conv_input_grad(g, *geom)?));
            }
            if want(*gy) {
                out.push((*gy, v(*x).conv_with(g, *geom)?));
            }
        }
        Op::AvgPool { src, kh, kw } => out.push((*src, g.avg_pool_adjoint(&v(*src).shape(), *kh, *kw)?)),
        Op::AvgPoolAdjoint { src, kh, kw } => out.push((*src, g.avg_pool2d(*kh, *kw)?)),
        Op::IndexMean { src, sets } => {
            let adj = g.mean_over_index_set_adjoint(Arc::clone(sets))?;
            out.push((*src, adj.reshape(&v(*src).shape())?));
        }
        Op::IndexMeanAdjoint { src, sets } => out.push((*src, g.mean_over_index_set(Arc::clone(sets))?)),
    }
    Ok(out)
}
