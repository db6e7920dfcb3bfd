//! Reverse-mode differentiation over an explicit, per-pass operation record.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so node indices are a topological order;
//! `backward` walks them once in reverse. Nothing is global: a tape is created
//! for a pass, consumed by one `backward`, and `reset` before reuse.

use crate::error::{Error, Result};

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Precision, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Softmax { x: Var, axis: usize, temperature: f64 },
    Standardize { x: Var, group_shape: Vec<usize>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Cosine { a: Var, b: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward/backward pass.
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { precision, nodes: Vec::new(), grads: None }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient so the tape can serve a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
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

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(&mut data);
        let value = Tensor::from_parts(shape, data);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    /// Records a free variable whose adjoint is collected by `backward`.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, true)
    }

    /// Records a parameter of `store`; its adjoint is later copied back by
    /// [`ParamStore::load_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id.0) }, true)
    }

    /// Binds every parameter of `store`, returning handles indexed by `ParamId`.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|i| self.param(store, ParamId(i))).collect()
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(Var, Var) -> Op) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let la = kernels::layout(&out_shape, &sa);
        let lb = kernels::layout(&out_shape, &sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = (0..numel(&out_shape))
            .map(|i| f(da[la.index(i)], db[lb.index(i)]))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(out_shape, data, op(a, b), ng))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a fixed tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(Error::dim(format!(
                "mask shape {:?} does not match input {:?}",
                mask.shape(),
                self.shape(x)
            )));
        }
        let data = self.value(x).data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulConst(x, mask.data().to_vec()), ng))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Exp(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), ng)
    }

    /// Dropout with an explicit keep-mask of 0/1 entries; kept entries are
    /// rescaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, keep: &Tensor, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
        }
        let scaled = keep.map(|m| m / (1.0 - rate));
        self.mul_const(x, &scaled)
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let bo = kernels::broadcast_shape(ba, bb)
            .map_err(|_| Error::dim(format!("matmul batch extents incompatible: {sa:?} x {sb:?}")))?;
        let batches = numel(&bo);
        let mut out = vec![0.0; batches * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if bb.iter().product::<usize>() == 1 && numel(ba) == batches {
            kernels::gemm_nn(da, db, &mut out, batches * m, k, n);
        } else {
            let oa = kernels::broadcast_offsets(&bo, ba);
            let ob = kernels::broadcast_offsets(&bo, bb);
            for i in 0..batches {
                kernels::gemm_nn(
                    &da[oa[i] * m * k..(oa[i] + 1) * m * k],
                    &db[ob[i] * k * n..(ob[i] + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = bo;
        shape.extend([m, n]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, data, Op::Permute(x, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), ng))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if kernels::broadcast_shape(&sx, shape)? != shape {
            return Err(Error::dim(format!("cannot broadcast {sx:?} to {shape:?}")));
        }
        let l = kernels::layout(shape, &sx);
        let d = self.value(x).data();
        let data = (0..numel(shape)).map(|i| d[l.index(i)]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::BroadcastTo(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::dim("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(format!("concat shape mismatch: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(xs);
        Ok(self.push(shape, data, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, data, Op::Narrow { x, axis, start }, ng))
    }

    /// Embedding lookup: rows of a `[vocab, dim]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("embedding table must be rank 2, got {s:?}")));
        }
        if indices.is_empty() {
            return Err(Error::dim("embedding lookup with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::dim(format!("embedding index {bad} out of range for {} rows", s[0])));
        }
        let d = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(&d[i * s[1]..(i + 1) * s[1]]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(vec![indices.len(), s[1]], data, Op::GatherRows { table, indices: indices.to_vec() }, ng))
    }

    // ---- reductions and normalisation ---------------------------------

    /// Softmax along `axis` of `x / temperature`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!("softmax temperature must be positive, got {temperature}")));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = ((d[at(j)] - max) / temperature).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis, temperature }, ng))
    }

    /// Zero-mean, unit-variance over `axes` (biased variance plus `eps`).
    /// Returns the standardised tensor and the per-group (mean, variance).
    pub fn standardize(&mut self, x: Var, axes: &[usize], eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim(format!("invalid statistics axes {axes:?} for {shape:?}")));
        }
        if !(eps > 0.0) {
            return Err(Error::param(format!("normalisation epsilon must be positive, got {eps}")));
        }
        let mut group_shape = shape.clone();
        for &a in axes {
            group_shape[a] = 1;
        }
        let groups = numel(&group_shape);
        let count = (numel(&shape) / groups) as f64;
        let layout = kernels::layout(&shape, &group_shape);
        let d = self.value(x).data();
        let mut mean = vec![0.0; groups];
        for (i, &v) in d.iter().enumerate() {
            mean[layout.index(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; groups];
        for (i, &v) in d.iter().enumerate() {
            let g = layout.index(i);
            var[g] += (v - mean[g]) * (v - mean[g]);
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let out = d
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = layout.index(i);
                (v - mean[g]) * inv_std[g]
            })
            .collect();
        let ng = self.ng(&[x]);
        let v = self.push(shape, out, Op::Standardize { x, group_shape, inv_std }, ng);
        Ok((v, mean, var))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), ng)
    }

    /// Sum along one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(out_shape, out, Op::SumAxis(x, axis), ng))
    }

    /// Cosine similarity of the vectors running along `axis` of two equally
    /// shaped tensors. Zero-norm vectors give 0.
    pub fn cosine(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return Err(Error::dim(format!("cosine operands differ: {shape:?} vs {:?}", self.shape(b))));
        }
        if axis >= shape.len() {
            return Err(Error::dim(format!("cosine axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for j in 0..len {
                    let k = (o * len + j) * inner + i;
                    dot += da[k] * db[k];
                    na += da[k] * da[k];
                    nb += db[k] * db[k];
                }
                let denom = (na * nb).sqrt();
                out[o * inner + i] = if denom > 0.0 { dot / denom } else { 0.0 };
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out_shape, out, Op::Cosine { a, b, axis }, ng))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy expects [N, C] logits with N labels, got {s:?} and {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss / n as f64],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates adjoints from a scalar `loss` to every node that needs them.
    ///
    /// A tape can be differentiated once; a second call without [`Tape::reset`]
    /// is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract("backward already ran on this tape; reset it first".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            self.precision.round_slice(&mut g);
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Adjoint of `v` after `backward`. Nodes that need a gradient but were
    /// not reached report zeros; nodes that take no gradient report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    /// `(parameter slot, adjoint)` for every parameter leaf reached by `backward`.
    pub fn param_grads(&self) -> Result<Vec<(usize, &[f64])>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Contract("no gradients: backward has not run".into()))?;
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(slot) } => grads[i].as_deref().map(|g| (slot, g)),
                _ => None,
            })
            .collect())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        // accumulate into an input's gradient buffer
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let l = kernels::layout(out_shape, self.shape(v));
                    acc(grads, v, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[l.index(k)] += s * gk;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (la, lb) = (kernels::layout(out_shape, self.shape(*a)), kernels::layout(out_shape, self.shape(*b)));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        ga[la.index(k)] += gk * db[lb.index(k)];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        gb[lb.index(k)] += gk * da[la.index(k)];
                    }
                });
            }
            Op::Div(a, b) => {
                let (la, lb) = (kernels::layout(out_shape, self.shape(*a)), kernels::layout(out_shape, self.shape(*b)));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        ga[la.index(k)] += gk / db[lb.index(k)];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        let bv = db[lb.index(k)];
                        gb[lb.index(k)] -= gk * da[la.index(k)] / (bv * bv);
                    }
                });
            }
            Op::Scale(x, s) => acc(grads, *x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, gk)| *a += gk * s);
            }),
            Op::MulConst(x, mask) => acc(grads, *x, &mut |gx| {
                for ((a, gk), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += gk * m;
                }
            }),
            Op::Exp(x) => acc(grads, *x, &mut |gx| {
                for ((a, gk), yk) in gx.iter_mut().zip(g).zip(y) {
                    *a += gk * yk;
                }
            }),
            Op::Gelu(x) => {
                let dx = self.value(*x).data();
                acc(grads, *x, &mut |gx| {
                    for ((a, gk), &xk) in gx.iter_mut().zip(g).zip(dx) {
                        *a += gk * gelu_grad(xk);
                    }
                })
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Permute(x, perm) => {
                let back = kernels::permute(g, out_shape, &kernels::inverse_permutation(perm));
                acc(grads, *x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Reshape(x) => acc(grads, *x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::BroadcastTo(x) => {
                let l = kernels::layout(out_shape, self.shape(*x));
                acc(grads, *x, &mut |gx| {
                    for (k, gk) in g.iter().enumerate() {
                        gx[l.index(k)] += gk;
                    }
                })
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    acc(grads, x, &mut |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gx[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                acc(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            gx[dst + k] += g[src + k];
                        }
                    }
                })
            }
            Op::GatherRows { table, indices } => {
                let dim = out_shape[1];
                acc(grads, *table, &mut |gt| {
                    for (r, &row) in indices.iter().enumerate() {
                        for k in 0..dim {
                            gt[row * dim + k] += g[r * dim + k];
                        }
                    }
                })
            }
            Op::Softmax { x, axis, temperature } => {
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                acc(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s) / temperature;
                            }
                        }
                    }
                })
            }
            Op::Standardize { x, group_shape, inv_std } => {
                let l = kernels::layout(out_shape, group_shape);
                let groups = inv_std.len();
                let count = (y.len() / groups) as f64;
                let mut mean_g = vec![0.0; groups];
                let mut mean_gy = vec![0.0; groups];
                for (k, (&gk, &yk)) in g.iter().zip(y).enumerate() {
                    let gi = l.index(k);
                    mean_g[gi] += gk;
                    mean_gy[gi] += gk * yk;
                }
                mean_g.iter_mut().for_each(|v| *v /= count);
                mean_gy.iter_mut().for_each(|v| *v /= count);
                acc(grads, *x, &mut |gx| {
                    for (k, (&gk, &yk)) in g.iter().zip(y).enumerate() {
                        let gi = l.index(k);
                        gx[k] += inv_std[gi] * (gk - mean_g[gi] - yk * mean_gy[gi]);
                    }
                })
            }
            Op::Sum(x) => acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n))
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                acc(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::Cosine { a, b, axis } => self.backprop_cosine(*a, *b, *axis, g, y, grads),
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len() as f64;
                acc(grads, *logits, &mut |gl| {
                    for (k, (a, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if labels[k / c] == k % c { 1.0 } else { 0.0 };
                        *a += g[0] * (p - onehot) / n;
                    }
                })
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let bo = kernels::broadcast_shape(ba, bb).expect("validated in forward");
        let batches = numel(&bo);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (need_a, need_b) = (self.nodes[a.0].needs_grad, self.nodes[b.0].needs_grad);
        let flat = numel(bb) == 1 && numel(ba) == batches;
        if need_a {
            let mut ga = vec![0.0; da.len()];
            if flat {
                kernels::gemm_nt(g, db, &mut ga, batches * m, n, k);
            } else {
                let oa = kernels::broadcast_offsets(&bo, ba);
                let ob = kernels::broadcast_offsets(&bo, bb);
                for i in 0..batches {
                    kernels::gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &db[ob[i] * k * n..(ob[i] + 1) * k * n],
                        &mut ga[oa[i] * m * k..(oa[i] + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            add_into(grads, a, ga);
        }
        if need_b {
            let mut gb = vec![0.0; db.len()];
            if flat {
                kernels::gemm_tn(da, g, &mut gb, k, batches * m, n);
            } else {
                let oa = kernels::broadcast_offsets(&bo, ba);
                let ob = kernels::broadcast_offsets(&bo, bb);
                for i in 0..batches {
                    kernels::gemm_tn(
                        &da[oa[i] * m * k..(oa[i] + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[ob[i] * k * n..(ob[i] + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
            add_into(grads, b, gb);
        }
    }

    fn backprop_cosine(&self, a: Var, b: Var, axis: usize, g: &[f64], y: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (outer, len, inner) = kernels::split_axis(self.shape(a), axis);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut ga = vec![0.0; da.len()];
        let mut gb = vec![0.0; db.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let (mut na, mut nb) = (0.0, 0.0);
                for j in 0..len {
                    na += da[at(j)] * da[at(j)];
                    nb += db[at(j)] * db[at(j)];
                }
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let c = y[o * inner + i];
                let gc = g[o * inner + i];
                let inv = 1.0 / (na * nb).sqrt();
                for j in 0..len {
                    ga[at(j)] += gc * (db[at(j)] * inv - c * da[at(j)] / na);
                    gb[at(j)] += gc * (da[at(j)] * inv - c * db[at(j)] / nb);
                }
            }
        }
        if self.nodes[a.0].needs_grad {
            add_into(grads, a, ga);
        }
        if self.nodes[b.0].needs_grad {
            add_into(grads, b, gb);
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new(Precision::Double);
        let eye = tape.constant(&Tensor::eye(2));
        let m = tape.constant(&t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, -2.0, 0.25, 4.0]);

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(r), &[2, 1]);
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);

        let z = tape.constant(&Tensor::zeros(&[3, 2]));
        let zr = tape.matmul(z, a).unwrap();
        assert!(tape.value(zr).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new(Precision::Double);
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_left_matrix() {
        let mut tape = Tape::new(Precision::Double);
        let a = tape.constant(&t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let b = tape.constant(&Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 2]);
        // row swap of each batch entry
        assert_eq!(&tape.value(c).data()[..4], &[2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&t(&[4], &[2.5; 4]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(&t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        assert_relative_eq!(tape.value(s).data()[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(tape.value(s).data()[1], 0.75, epsilon = 1e-12);

        let x = tape.constant(&t(&[2, 2], &[1e4, -1e4, -1e4, 1e4]));
        let s = tape.softmax(x, 1, 1.0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);

        assert!(tape.softmax(x, 1, 0.0).is_err());
        assert!(tape.softmax(x, 1, -1.0).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&t(&[2, 3], &[0.0, 1.0, 2.0, 1.0, 1.0, 0.0]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        let v = tape.value(s);
        for j in 0..3 {
            assert_relative_eq!(v.get(&[0, j]) + v.get(&[1, j]), 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(v.get(&[0, 1]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn standardize_examples() {
        let mut tape = Tape::new(Precision::Double);
        let c = tape.constant(&Tensor::full(&[5], 3.0));
        let (z, _, _) = tape.standardize(c, &[0], 1e-5).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let raw = [0.3, -1.2, 2.0, 0.7];
        let x = tape.constant(&t(&[4], &raw));
        let (z, mean, var) = tape.standardize(x, &[0], 1e-5).unwrap();
        let mu = raw.iter().sum::<f64>() / 4.0;
        let sigma2 = raw.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
        assert_relative_eq!(mean[0], mu, epsilon = 1e-15);
        assert_relative_eq!(var[0], sigma2, epsilon = 1e-15);
        for (o, r) in tape.value(z).data().iter().zip(raw) {
            assert_relative_eq!(*o, (r - mu) / (sigma2 + 1e-5).sqrt(), epsilon = 1e-14);
        }
    }

    #[test]
    fn standardize_over_several_axes_groups_correctly() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.constant(&Tensor::from_fn(&[2, 3, 2], |i| (i * i) as f64 * 0.1));
        let (z, mean, _) = tape.standardize(x, &[0, 2], 1e-8).unwrap();
        assert_eq!(mean.len(), 3);
        let v = tape.value(z);
        for h in 0..3 {
            let s: f64 = (0..2).flat_map(|n| (0..2).map(move |k| (n, k))).map(|(n, k)| v.get(&[n, h, k])).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.variable(&t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new(Precision::Double);
        let x = tape.variable(&t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.variable(&Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.variable(&Tensor::ones(&[2]));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn unreachable_variables_get_zero_gradient() {
        let mut tape = Tape::new(Precision::Double);
        let x = tape.variable(&Tensor::ones(&[2]));
        let unused = tape.variable(&Tensor::ones(&[3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
        let c = tape.constant(&Tensor::ones(&[1]));
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new(Precision::Double);
        let l = tape.constant(&Tensor::zeros(&[2, 5]));
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert_relative_eq!(tape.value(ce).item(), 5f64.ln(), epsilon = 1e-14);
        assert!(matches!(tape.cross_entropy(l, &[0, 5]), Err(Error::Data(_))));
    }

    #[test]
    fn concat_narrow_gather() {
        let mut tape = Tape::new(Precision::Double);
        let a = tape.variable(&Tensor::from_fn(&[2, 1, 2], |i| i as f64));
        let b = tape.variable(&Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
        let n = tape.narrow(c, 1, 0, 1).unwrap();
        assert_eq!(tape.value(n).data(), tape.value(a).data());

        let table = tape.variable(&Tensor::from_fn(&[3, 2], |i| i as f64));
        let e = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[4., 5., 0., 1., 4., 5.]);
        let s1 = tape.sum(e);
        let s2 = tape.sum(n);
        let tot = tape.add(s1, s2).unwrap();
        tape.backward(tot).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
        assert_eq!(tape.grad(a).unwrap().data(), &[1., 1., 1., 1.]);
        assert_eq!(tape.grad(b).unwrap().data(), &[0.0; 8]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn single_precision_tape_rounds_values() {
        let mut tape = Tape::new(Precision::Single);
        let x = tape.constant(&t(&[1], &[0.1]));
        let y = tape.scale(x, 3.0);
        let v = tape.value(y).data()[0];
        assert_eq!(v, v as f32 as f64);
    }
}
