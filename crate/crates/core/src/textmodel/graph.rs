//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and whatever the backward pass needs. Parameters are borrowed rather than
//! copied, so building a graph per sequence is cheap.

use std::borrow::Cow;

use super::tensor::{
    log_softmax, matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place, Scalar, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Attention { q: Var, k: Var, v: Var, heads: usize, q_offset: usize, probs: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    MeanRows(Var),
    Select(Var, usize, usize),
    SelectColsSum(Var, Vec<usize>),
    Log(Var),
    LogSigmoid(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th) + half * x * (one - th * th) * c * (one + T::from_f(3.0) * a * x * x);
    (y, dy)
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Owned input. `requires_grad` marks it as a differentiation target.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed input, typically a model parameter.
    pub fn borrowed(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        matmul_into(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.cols, false);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dims");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        matmul_bt_into(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.rows, false);
        self.push(out, Op::MatMulBT(a, b), &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shapes");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (m, n) = xv.shape();
        assert_eq!(g.shape(), (1, n));
        let nf = T::from_f(n as f64);
        let mut out = Tensor::zeros(m, n);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::from_f(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out.data[r * n + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols);
        for &id in ids {
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_vec(ids.len(), tv.cols, data);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    /// Causal multi-head attention. `q` holds `n` query rows at absolute
    /// positions `q_offset..q_offset+n`; `k`/`v` hold `t ≥ q_offset+n` rows.
    /// Heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_offset: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let t = kv.rows;
        assert_eq!(kv.cols, d);
        assert_eq!(vv.shape(), (t, d));
        assert!(q_offset + n <= t, "attention: {q_offset}+{n} queries but {t} keys");
        let dh = d / heads;
        let scale = T::one() / T::from_f(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * t];
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let visible = q_offset + i + 1;
                let qrow = &qv.data[i * d + c0..i * d + c0 + dh];
                let prow = &mut probs[(h * n + i) * t..(h * n + i) * t + t];
                for j in 0..visible {
                    let krow = &kv.data[j * d + c0..j * d + c0 + dh];
                    let mut s = T::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        s += a * b;
                    }
                    prow[j] = s * scale;
                }
                softmax_in_place(&mut prow[..visible]);
                let orow = &mut out.data[i * d + c0..i * d + c0 + dh];
                for (j, &p) in prow[..visible].iter().enumerate() {
                    let vrow = &vv.data[j * d + c0..j * d + c0 + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, q_offset, probs }, &[q, k, v])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len());
        for r in 0..av.rows {
            data.extend(log_softmax(av.row(r)));
        }
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Mean next-token cross-entropy of `logits[n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.data.clone();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let lp = log_softmax(lv.row(r));
            loss -= lp[t];
            let prow = &mut probs[r * lv.cols..(r + 1) * lv.cols];
            for (p, l) in prow.iter_mut().zip(lp) {
                *p = l.exp();
            }
        }
        let n = T::from_f(targets.len() as f64);
        let out = Tensor::from_vec(1, 1, vec![loss / n]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<T>();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    /// Column means, `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, &x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let m = T::from_f(av.rows as f64);
        out.data.iter_mut().for_each(|x| *x = *x / m);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn select(&mut self, a: Var, r: usize, c: usize) -> Var {
        let x = self.value(a).at(r, c);
        self.push(Tensor::from_vec(1, 1, vec![x]), Op::Select(a, r, c), &[a])
    }

    /// Per-row sum over the given columns, `[m×n] → [m×1]`.
    pub fn select_cols_sum(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| cols.iter().map(|&c| av.at(r, c)).sum::<T>()).collect();
        let out = Tensor::from_vec(av.rows, 1, data);
        self.push(out, Op::SelectColsSum(a, cols.to_vec()), &[a])
    }

    /// Natural log, floored at the smallest positive normal value.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::min_positive_value()).ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize)) -> &mut Tensor<T> {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            let need = |v: Var| self.nodes[v.0].needs_grad;
            let shape = |v: Var| self.nodes[v.0].value.shape();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    if need(*a) {
                        let g = acc(&mut grads, *a, (m, k));
                        matmul_bt_into(&dout.data, &bv.data, &mut g.data, m, n, k, true);
                    }
                    if need(*b) {
                        let g = acc(&mut grads, *b, (k, n));
                        matmul_at_into(&av.data, &dout.data, &mut g.data, m, k, n, true);
                    }
                }
                Op::MatMulBT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.rows);
                    if need(*a) {
                        let g = acc(&mut grads, *a, (m, k));
                        matmul_into(&dout.data, &bv.data, &mut g.data, m, n, k, true);
                    }
                    if need(*b) {
                        let g = acc(&mut grads, *b, (n, k));
                        matmul_at_into(&dout.data, &av.data, &mut g.data, m, n, k, true);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if need(*a) {
                        acc(&mut grads, *a, dout.shape()).add_assign(&dout);
                    }
                    if need(*b) {
                        let g = acc(&mut grads, *b, dout.shape());
                        for (x, &d) in g.data.iter_mut().zip(&dout.data) {
                            if neg {
                                *x -= d;
                            } else {
                                *x += d;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if need(*a) {
                        let g = acc(&mut grads, *a, dout.shape());
                        for ((x, &d), &y) in g.data.iter_mut().zip(&dout.data).zip(&bv.data) {
                            *x += d * y;
                        }
                    }
                    if need(*b) {
                        let g = acc(&mut grads, *b, dout.shape());
                        for ((x, &d), &y) in g.data.iter_mut().zip(&dout.data).zip(&av.data) {
                            *x += d * y;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if need(*a) {
                        acc(&mut grads, *a, dout.shape()).add_assign(&dout);
                    }
                    if need(*row) {
                        let g = acc(&mut grads, *row, (1, dout.cols));
                        for r in 0..dout.rows {
                            for (x, &d) in g.data.iter_mut().zip(dout.row(r)) {
                                *x += d;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let g = acc(&mut grads, *a, dout.shape());
                    for (x, &d) in g.data.iter_mut().zip(&dout.data) {
                        *x += d * *s;
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let g = acc(&mut grads, *a, dout.shape());
                    for ((x, &d), &inp) in g.data.iter_mut().zip(&dout.data).zip(&av.data) {
                        *x += d * gelu(inp).1;
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (m, n) = dout.shape();
                    let gv = self.value(*gain);
                    if need(*gain) {
                        let g = acc(&mut grads, *gain, (1, n));
                        for r in 0..m {
                            for c in 0..n {
                                g.data[c] += dout.data[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    if need(*bias) {
                        let g = acc(&mut grads, *bias, (1, n));
                        for r in 0..m {
                            for c in 0..n {
                                g.data[c] += dout.data[r * n + c];
                            }
                        }
                    }
                    if need(*x) {
                        let nf = T::from_f(n as f64);
                        let g = acc(&mut grads, *x, (m, n));
                        for r in 0..m {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..n {
                                let dh = dout.data[r * n + c] * gv.data[c];
                                mean_d += dh;
                                mean_dx += dh * xhat[r * n + c];
                            }
                            mean_d = mean_d / nf;
                            mean_dx = mean_dx / nf;
                            for c in 0..n {
                                let dh = dout.data[r * n + c] * gv.data[c];
                                g.data[r * n + c] += rstd[r] * (dh - mean_d - xhat[r * n + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let g = acc(&mut grads, *table, shape(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &d) in g.row_mut(id).iter_mut().zip(dout.row(r)) {
                            *x += d;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = shape(p).0;
                        if need(p) {
                            let g = acc(&mut grads, p, shape(p));
                            g.add_assign(&dout.slice_rows(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let g = acc(&mut grads, *a, shape(*a));
                    let cols = dout.cols;
                    for (x, &d) in g.data[start * cols..start * cols + dout.len()].iter_mut().zip(&dout.data) {
                        *x += d;
                    }
                }
                Op::Attention { q, k, v, heads, q_offset, probs } => {
                    self.attention_backward(&mut grads, &dout, (*q, *k, *v), *heads, *q_offset, probs);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let g = acc(&mut grads, *a, dout.shape());
                    for r in 0..y.rows {
                        let dot: T = y.row(r).iter().zip(dout.row(r)).map(|(&p, &d)| p * d).sum();
                        for ((x, &p), &d) in g.row_mut(r).iter_mut().zip(y.row(r)).zip(dout.row(r)) {
                            *x += p * (d - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let g = acc(&mut grads, *a, dout.shape());
                    for r in 0..y.rows {
                        let total: T = dout.row(r).iter().copied().sum();
                        for ((x, &l), &d) in g.row_mut(r).iter_mut().zip(y.row(r)).zip(dout.row(r)) {
                            *x += d - l.exp() * total;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let cols = shape(*logits).1;
                    let scale = dout.data[0] / T::from_f(targets.len() as f64);
                    let g = acc(&mut grads, *logits, shape(*logits));
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            g.data[r * cols + c] += (probs[r * cols + c] - onehot) * scale;
                        }
                    }
                }
                Op::Sum(a) => {
                    let d = dout.data[0];
                    let g = acc(&mut grads, *a, shape(*a));
                    g.data.iter_mut().for_each(|x| *x += d);
                }
                Op::MeanRows(a) => {
                    let (m, n) = shape(*a);
                    let mf = T::from_f(m as f64);
                    let g = acc(&mut grads, *a, (m, n));
                    for r in 0..m {
                        for (x, &d) in g.row_mut(r).iter_mut().zip(&dout.data) {
                            *x += d / mf;
                        }
                    }
                }
                Op::Select(a, r, c) => {
                    let cols = shape(*a).1;
                    acc(&mut grads, *a, shape(*a)).data[r * cols + c] += dout.data[0];
                }
                Op::SelectColsSum(a, cols) => {
                    let n = shape(*a).1;
                    let g = acc(&mut grads, *a, shape(*a));
                    for r in 0..dout.rows {
                        for &c in cols {
                            g.data[r * n + c] += dout.data[r];
                        }
                    }
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let g = acc(&mut grads, *a, dout.shape());
                    for ((x, &d), &inp) in g.data.iter_mut().zip(&dout.data).zip(&av.data) {
                        if inp > T::min_positive_value() {
                            *x += d / inp;
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    let av = self.value(*a);
                    let g = acc(&mut grads, *a, dout.shape());
                    for ((x, &d), &inp) in g.data.iter_mut().zip(&dout.data).zip(&av.data) {
                        *x += d * sigmoid(-inp);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        dout: &Tensor<T>,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        q_offset: usize,
        probs: &[T],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let t = kv.rows;
        let dh = d / heads;
        let scale = T::one() / T::from_f(dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(t, d);
        let mut dv = Tensor::zeros(t, d);
        let mut dp = vec![T::zero(); t];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let visible = q_offset + i + 1;
                let prow = &probs[(h * n + i) * t..(h * n + i) * t + visible];
                let drow = &dout.data[i * d + c0..i * d + c0 + dh];
                // dP = dO · Vᵀ ; dV += Pᵀ dO
                for j in 0..visible {
                    let vrow = &vv.data[j * d + c0..j * d + c0 + dh];
                    let mut s = T::zero();
                    for (&a, &b) in drow.iter().zip(vrow) {
                        s += a * b;
                    }
                    dp[j] = s;
                    let p = prow[j];
                    for (x, &g) in dv.data[j * d + c0..j * d + c0 + dh].iter_mut().zip(drow) {
                        *x += p * g;
                    }
                }
                let dot: T = prow.iter().zip(&dp[..visible]).map(|(&p, &g)| p * g).sum();
                let qrow = &qv.data[i * d + c0..i * d + c0 + dh];
                for j in 0..visible {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kv.data[j * d + c0..j * d + c0 + dh];
                    for (x, &kk) in dq.data[i * d + c0..i * d + c0 + dh].iter_mut().zip(krow) {
                        *x += ds * kk;
                    }
                    for (x, &qq) in dk.data[j * d + c0..j * d + c0 + dh].iter_mut().zip(qrow) {
                        *x += ds * qq;
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                match grads[var.0].as_mut() {
                    Some(existing) => existing.add_assign(&g),
                    None => grads[var.0] = Some(g),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(build)/d(input `which`).
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let h = 1e-6;
        for (w, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[w]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[w].data[i] += h;
                let mut minus = inputs.clone();
                minus[w].data[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs().max(a.abs()),
                    "input {w} elem {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_layernorm_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 5), rand_tensor(&mut rng, 1, 5), rand_tensor(&mut rng, 1, 5)];
        check(inputs, |g, v| {
            let m = g.matmul(v[0], v[1]);
            let n = g.layer_norm(m, v[2], v[3]);
            let a = g.gelu(n);
            let w = g.mul(a, n);
            g.sum(w)
        });
    }

    #[test]
    fn attention_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 2 past rows + 3 new rows, d=4, 2 heads
        let inputs = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 5, 4), rand_tensor(&mut rng, 5, 4), rand_tensor(&mut rng, 6, 4)];
        check(inputs, |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, 2);
            let logits = g.matmul_bt(a, v[3]);
            g.cross_entropy(logits, &[1, 5, 0])
        });
    }

    #[test]
    fn softmax_family_and_selects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_tensor(&mut rng, 2, 6), rand_tensor(&mut rng, 2, 6), rand_tensor(&mut rng, 1, 6)];
        check(inputs, |g, v| {
            let p = g.softmax(v[0]);
            let lp = g.log_softmax(v[0]);
            let c = g.sub(lp, v[1]);
            let kl = g.mul(p, c);
            let kl = g.sum(kl);
            let bag = g.select_cols_sum(p, &[0, 3]);
            let lb = g.log(bag);
            let lb = g.mean_rows(lb);
            let s = g.add(kl, lb);
            let ls = g.log_sigmoid(v[2]);
            let r = g.add_row(v[1], v[2]);
            let r = g.slice_rows(r, 1, 2);
            let r = g.concat_rows(&[r, ls]);
            let r = g.scale(r, 0.3);
            let rs = g.sum(r);
            let x = g.select(v[1], 1, 2);
            let y = g.add(s, rs);
            g.add(y, x)
        });
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.input(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let rows = g.gather(table, &[2, 0, 2]);
        assert_eq!(g.value(rows).data, vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(rows);
        let grads = g.backward(s);
        assert_eq!(grads.get(table).unwrap().data, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
