//! Tape-based reverse-mode differentiation over 2-D tensors.

use std::collections::HashMap;

use super::tensor::{gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::Scalar;

/// Handle of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `0..=i + (keys - queries)`.
    Causal,
    /// Query `i` sees the contiguous keys `lo..hi`. Lets several independent
    /// sequences share one stacked matrix.
    Ranges(Vec<(usize, usize)>),
}

impl Mask {
    pub fn range(&self, i: usize, tq: usize, tk: usize) -> (usize, usize) {
        match self {
            Mask::None => (0, tk),
            Mask::Causal => (0, (i + 1 + tk).saturating_sub(tq).min(tk)),
            Mask::Ranges(r) => r[i],
        }
    }

    /// Causal attention inside each segment of a stacked sequence.
    pub fn causal_segments(lens: &[usize]) -> Mask {
        let mut r = Vec::with_capacity(lens.iter().sum());
        let mut start = 0;
        for &n in lens {
            r.extend((0..n).map(|i| (start, start + i + 1)));
            start += n;
        }
        Mask::Ranges(r)
    }

    /// Full attention from each query segment to the matching key segment.
    pub fn segments(q_lens: &[usize], k_lens: &[usize]) -> Mask {
        assert_eq!(q_lens.len(), k_lens.len(), "segment count mismatch");
        let mut r = Vec::with_capacity(q_lens.iter().sum());
        let mut start = 0;
        for (&nq, &nk) in q_lens.iter().zip(k_lens) {
            r.extend(std::iter::repeat((start, start + nk)).take(nq));
            start += nk;
        }
        Mask::Ranges(r)
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, ranges: Vec<(usize, usize)>, offsets: Vec<usize>, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MaxPool { xs: Vec<Var>, argmax: Vec<u32> },
    Im2Col { x: Var, lens: Vec<usize>, kernel: usize, stride: usize, pad: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    SumSquares(Var),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation recorded for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass. Only leaves and parameters keep theirs.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf that receives gradient (for checks and tests).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Same value, cut from the gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "elementwise op on {:?} and {:?}", x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::from_rows(x.rows(), x.cols(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert!(bv.rows() == 1 && bv.cols() == xv.cols(), "bias {:?} for {:?}", bv.shape(), xv.shape());
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (a, &b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        self.push(value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let n = T::of(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xhat[r * cols + c] * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::from_rows(rows, cols, out);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Scaled dot-product attention with `heads` heads over column blocks of `q`, `k`, `v`.
    /// Rows whose keys are all masked produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, tk, d) = (qv.rows(), kv.rows(), qv.cols());
        assert!(kv.cols() == d && vv.cols() == d && vv.rows() == tk, "attention shapes");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut ranges = Vec::with_capacity(tq);
        let mut offsets = Vec::with_capacity(tq + 1);
        offsets.push(0);
        for i in 0..tq {
            let (lo, hi) = mask.range(i, tq, tk);
            assert!(lo <= hi && hi <= tk, "mask range {lo}..{hi} outside {tk} keys");
            ranges.push((lo, hi));
            offsets.push(offsets[i] + hi - lo);
        }
        let per_head = offsets[tq];
        let mut probs = vec![T::zero(); heads * per_head];
        let mut out = vec![T::zero(); tq * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..tq {
                let (lo, hi) = ranges[i];
                if lo == hi {
                    continue;
                }
                let qi = &qv.row(i)[c0..c0 + dh];
                let p = &mut probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                let mut max = T::neg_infinity();
                for (pj, j) in p.iter_mut().zip(lo..hi) {
                    let kj = &kv.row(j)[c0..c0 + dh];
                    *pj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    max = max.max(*pj);
                }
                let mut z = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let o = &mut out[i * d + c0..i * d + c0 + dh];
                for (pj, j) in p.iter_mut().zip(lo..hi) {
                    *pj /= z;
                    for (x, &y) in o.iter_mut().zip(&vv.row(j)[c0..c0 + dh]) {
                        *x += *pj * y;
                    }
                }
            }
        }
        let value = Tensor::from_rows(tq, d, out);
        self.push(value, Op::Attention { q, k, v, heads, ranges, offsets, probs }, &[q, k, v])
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_rows(ids.len(), t.cols(), data);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                let t = self.value(x);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::from_rows(rows, cols, data);
        self.push(value, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_rows(data.len() / cols, cols, data);
        self.push(value, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        assert!(start < end && end <= t.cols(), "slice {start}..{end} of {} columns", t.cols());
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::from_rows(t.rows(), end - start, data);
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    /// Elementwise maximum over same-shaped tensors; ties go to the first.
    pub fn max_pool(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "max_pool of nothing");
        let first = self.value(xs[0]);
        let mut data = first.data().to_vec();
        let mut argmax = vec![0u32; data.len()];
        for (n, &x) in xs.iter().enumerate().skip(1) {
            let t = self.value(x);
            assert!(t.same_shape(first), "max_pool shape mismatch");
            for (i, &v) in t.data().iter().enumerate() {
                if v > data[i] {
                    data[i] = v;
                    argmax[i] = n as u32;
                }
            }
        }
        let value = Tensor::from_rows(first.rows(), first.cols(), data);
        self.push(value, Op::MaxPool { xs: xs.to_vec(), argmax }, xs)
    }

    /// Unfolds each segment of `x` (segment lengths `lens`, rows stacked) into windows of
    /// `kernel` rows taken every `stride` rows with `pad` zero rows on both ends.
    /// Output rows are stacked per segment, each row `kernel * d` wide.
    pub fn im2col(&mut self, x: Var, lens: &[usize], kernel: usize, stride: usize, pad: usize) -> Var {
        let t = self.value(x);
        let d = t.cols();
        assert_eq!(lens.iter().sum::<usize>(), t.rows(), "segment lengths do not cover the input");
        let out_rows: usize = lens.iter().map(|&n| conv_out_len(n, kernel, stride, pad)).sum();
        let mut data = vec![T::zero(); out_rows * kernel * d];
        let mut row = 0;
        let mut start = 0;
        for &len in lens {
            for s in 0..conv_out_len(len, kernel, stride, pad) {
                for j in 0..kernel {
                    let src = (s * stride + j) as isize - pad as isize;
                    if src >= 0 && (src as usize) < len {
                        let dst = row * kernel * d + j * d;
                        data[dst..dst + d].copy_from_slice(t.row(start + src as usize));
                    }
                }
                row += 1;
            }
            start += len;
        }
        let value = Tensor::from_rows(out_rows, kernel * d, data);
        self.push(value, Op::Im2Col { x, lens: lens.to_vec(), kernel, stride, pad }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut value = t.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    /// `None` targets are ignored; with no counted rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len(), "one target per logit row");
        let mut probs = t.data().to_vec();
        let cols = t.cols();
        let mut total = T::zero();
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            if let Some(y) = *target {
                total += lse - row[y];
                count += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if count > 0 { total / T::of(count as f64) } else { T::zero() };
        let value = Tensor::scalar(loss);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, &[logits])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(value, Op::SumSquares(x), &[x])
    }

    /// Forward value `quantized`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<T>) -> Var {
        assert!(self.value(x).same_shape(&quantized), "straight-through shape mismatch");
        self.push(quantized, Op::StraightThrough(x), &[x])
    }

    /// Sum of 1x1 values.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Reverse pass from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contribution) in self.local_grads(node, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    /// Adds the gradient of every parameter node into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                    out.push((*a, Tensor::from_rows(m, k, ga)));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(m, k, n, av.data(), g.data(), &mut gb);
                    out.push((*b, Tensor::from_rows(k, n, gb)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = zip_with(g, bv, |p, q| p * q);
                let gb = zip_with(g, av, |p, q| p * q);
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(x, bias) => {
                let mut gb = vec![T::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_rows(1, g.cols(), gb))]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::Relu(x) => {
                let out = &node.value;
                let data = g.data().iter().zip(out.data()).map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() });
                vec![(*x, Tensor::from_rows(g.rows(), g.cols(), data.collect()))]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gam = val(*gamma).data();
                let n = T::of(cols as f64);
                let mut gx = vec![T::zero(); rows * cols];
                let mut gg = vec![T::zero(); cols];
                let mut gbeta = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gam[c];
                        gg[c] += gr[c] * xr[c];
                        gbeta[c] += gr[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                vec![
                    (*x, Tensor::from_rows(rows, cols, gx)),
                    (*gamma, Tensor::from_rows(1, cols, gg)),
                    (*beta, Tensor::from_rows(1, cols, gbeta)),
                ]
            }
            Op::Attention { q, k, v, heads, ranges, offsets, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (tq, tk, d) = (qv.rows(), kv.rows(), qv.cols());
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let per_head = offsets[tq];
                let mut gq = vec![T::zero(); tq * d];
                let mut gk = vec![T::zero(); tk * d];
                let mut gv = vec![T::zero(); tk * d];
                let mut dp = Vec::new();
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..tq {
                        let (lo, hi) = ranges[i];
                        let p = &probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                        let go = &g.row(i)[c0..c0 + dh];
                        dp.clear();
                        let mut dot = T::zero();
                        for (&pj, j) in p.iter().zip(lo..hi) {
                            let vj = &vv.row(j)[c0..c0 + dh];
                            let d_pj: T = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dp.push(d_pj);
                            dot += d_pj * pj;
                            for (x, &y) in gv[j * d + c0..j * d + c0 + dh].iter_mut().zip(go) {
                                *x += pj * y;
                            }
                        }
                        let qi = &qv.row(i)[c0..c0 + dh];
                        for ((&pj, &d_pj), j) in p.iter().zip(&dp).zip(lo..hi) {
                            let ds = pj * (d_pj - dot) * scale;
                            let kj = &kv.row(j)[c0..c0 + dh];
                            for (x, &y) in gq[i * d + c0..i * d + c0 + dh].iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            for (x, &y) in gk[j * d + c0..j * d + c0 + dh].iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
                vec![
                    (*q, Tensor::from_rows(tq, d, gq)),
                    (*k, Tensor::from_rows(tk, d, gk)),
                    (*v, Tensor::from_rows(tk, d, gv)),
                ]
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let mut gt = Tensor::zeros(t.rows(), t.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (x, &y) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                vec![(*table, gt)]
            }
            Op::ConcatCols(xs) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = val(x).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    out.push((x, Tensor::from_rows(g.rows(), w, data)));
                    start += w;
                }
                out
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                xs.iter()
                    .map(|&x| {
                        let n = val(x).rows();
                        start += n;
                        (x, g.rows_slice(start - n, start))
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                vec![(*x, gx)]
            }
            Op::MaxPool { xs, argmax } => xs
                .iter()
                .enumerate()
                .map(|(n, &x)| {
                    let data = g
                        .data()
                        .iter()
                        .zip(argmax)
                        .map(|(&gv, &a)| if a as usize == n { gv } else { T::zero() })
                        .collect();
                    (x, Tensor::from_rows(g.rows(), g.cols(), data))
                })
                .collect(),
            Op::Im2Col { x, lens, kernel, stride, pad } => {
                let t = val(*x);
                let d = t.cols();
                let mut gx = Tensor::zeros(t.rows(), d);
                let mut row = 0;
                let mut start = 0;
                for &len in lens {
                    for s in 0..conv_out_len(len, *kernel, *stride, *pad) {
                        for j in 0..*kernel {
                            let src = (s * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < len {
                                let from = &g.row(row)[j * d..(j + 1) * d];
                                for (a, &b) in gx.row_mut(start + src as usize).iter_mut().zip(from) {
                                    *a += b;
                                }
                            }
                        }
                        row += 1;
                    }
                    start += len;
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gy), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gy - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let t = val(*logits);
                let cols = t.cols();
                let mut gx = Tensor::zeros(t.rows(), cols);
                if *count > 0 {
                    let s = g.item() / T::of(*count as f64);
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(y) = *target {
                            let row = gx.row_mut(r);
                            for c in 0..cols {
                                row[c] = probs[r * cols + c] * s;
                            }
                            row[y] -= s;
                        }
                    }
                }
                vec![(*logits, gx)]
            }
            Op::SumSquares(x) => {
                let s = g.item() + g.item();
                vec![(*x, val(*x).map(|v| v * s))]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
        }
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v = (*v - lse).exp();
    }
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}
