//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every primitive records its
//! inputs and whatever forward intermediates its backward rule needs, so
//! [`Graph::backward`] is a single reverse sweep over the arena.

use super::scalar::{gemm_view, MatView, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy_with_logits",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph. Confined to one thread; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn mismatch(op: &str, shapes: &[&[usize]]) -> Error {
    Error::Shape(format!("`{op}` got incompatible shapes {shapes:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Gradient accumulated at `v` by the last backward pass; zeros when the
    /// loss does not depend on `v`.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", &[av.shape(), bv.shape()]));
        }
        let out = av.matmul(bv)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(mismatch("transpose", &[av.shape()]));
        }
        let out = av.transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn broadcast_kind(&self, op: &str, a: Var, b: Var) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Broadcast::Same)
        } else if bv.ndim() == 1 && av.ndim() >= 1 && bv.len() == av.cols() {
            Ok(Broadcast::Row)
        } else if bv.len() == 1 && bv.ndim() <= 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(mismatch(op, &[av.shape(), bv.shape()]))
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bd[i],
                    Broadcast::Row => bd[i % cols],
                    Broadcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(av.shape(), data).expect("shape preserved")
    }

    /// Elementwise `a + b`; `b` may also be a row vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("add", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b, kind), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("sub", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b, kind), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast_kind("mul", a, b)?;
        let out = self.binary(a, b, kind, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b, kind), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(mismatch("softmax", &[av.shape()]));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if xv.ndim() != 2 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(mismatch("layer_norm", &[xv.shape(), gv.shape(), bv.shape()]));
        }
        let rows = xv.rows();
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(mismatch("gather_rows", &[tv.shape()]));
        }
        let (n, c) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange { what: "gather_rows table", index: i, len: n });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::lit(av.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean cross-entropy over rows whose target is `Some`. Rows with `None`
    /// are ignored; with no targeted rows the loss is zero.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "`cross_entropy_with_logits` got logits {:?} for {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let v = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::IndexOutOfRange { what: "cross-entropy target", index: t, len: v });
                }
                total += (lse - row[t]).as_f64();
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        ))
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` has shape `[batch * seq, 3 * d]`; the result is `[batch * seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        if qv.ndim() != 2 || qv.rows() != batch * seq || !qv.cols().is_multiple_of(3) || !(qv.cols() / 3).is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "`causal_attention` got qkv {:?} for batch {batch}, seq {seq}, heads {heads}",
                qv.shape()
            )));
        }
        let d = qv.cols() / 3;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let src = qv.data();
        let mut out = vec![T::zero(); batch * seq * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * 3 * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm_view(
                    seq,
                    dh,
                    seq,
                    scale,
                    src,
                    MatView { offset: base, rs: 3 * d as isize, cs: 1 },
                    src,
                    MatView { offset: base + d, rs: 1, cs: 3 * d as isize },
                    T::zero(),
                    p,
                    MatView::row_major(seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for x in row.iter_mut().skip(i + 1) {
                        *x = T::neg_infinity();
                    }
                    softmax_in_place(row);
                }
                gemm_view(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    p,
                    MatView::row_major(seq),
                    src,
                    MatView { offset: base + 2 * d, rs: 3 * d as isize, cs: 1 },
                    T::zero(),
                    &mut out,
                    MatView { offset: b * seq * d + h * dh, rs: d as isize, cs: 1 },
                );
            }
        }
        let out = Tensor::new(&[batch * seq, d], out)?;
        let rg = self.rg(qkv);
        Ok(self.push(out, Op::CausalAttention { qkv, batch, seq, heads, probs }, rg))
    }

    /// Signs of every ReLU input in the graph. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                bits.extend(self.value(a).data().iter().map(|&x| x > T::zero()));
            }
        }
        bits
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate as the sum over
    /// all paths and are read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn reduce_broadcast(&self, g: &Tensor<T>, b: Var, kind: Broadcast, f: impl Fn(usize, T) -> T) -> Tensor<T> {
        let bshape = self.value(b).shape().to_vec();
        match kind {
            Broadcast::Same => {
                let data = g.data().iter().enumerate().map(|(i, &x)| f(i, x)).collect();
                Tensor::new(&bshape, data).expect("same shape")
            }
            Broadcast::Row => {
                let c = g.cols();
                let mut acc = vec![T::zero(); c];
                for (i, &x) in g.data().iter().enumerate() {
                    acc[i % c] = acc[i % c] + f(i, x);
                }
                Tensor::new(&bshape, acc).expect("row shape")
            }
            Broadcast::Scalar => {
                let s = g.data().iter().enumerate().map(|(i, &x)| f(i, x)).sum::<T>();
                Tensor::new(&bshape, vec![s]).expect("scalar shape")
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_view(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        MatView::row_major(n),
                        bv.data(),
                        MatView::transposed(n),
                        T::zero(),
                        &mut da,
                        MatView::row_major(k),
                    );
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_view(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        MatView::transposed(k),
                        g.data(),
                        MatView::row_major(n),
                        T::zero(),
                        &mut db,
                        MatView::row_major(n),
                    );
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db).expect("shape"));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = self.reduce_broadcast(g, *b, *kind, |_, x| x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = self.reduce_broadcast(g, *b, *kind, |_, x| -x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let cols = av.cols();
                    let bd = bv.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            x * match kind {
                                Broadcast::Same => bd[j],
                                Broadcast::Row => bd[j % cols],
                                Broadcast::Scalar => bd[0],
                            }
                        })
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape(), data).expect("shape"));
                }
                if self.rg(*b) {
                    let ad = av.data();
                    let db = self.reduce_broadcast(g, *b, *kind, |j, x| x * ad[j]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gx, &x)| if x > T::zero() { gx } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), data).expect("shape"));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for (o, (&p, &q)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - s);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                let rows = rstd.len();
                let n = T::lit(c as f64);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(&shape, dx).expect("shape"));
                }
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (j, (&gx, &h)) in g.data().iter().zip(xhat).enumerate() {
                        dg[j % c] = dg[j % c] + gx * h;
                    }
                    self.accumulate(grads, *gain, Tensor::vector(dg));
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); c];
                    for (j, &gx) in g.data().iter().enumerate() {
                        db[j % c] = db[j % c] + gx;
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::GatherRows { table, idx } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &row) in idx.iter().enumerate() {
                    for (o, &x) in dt.row_mut(row).iter_mut().zip(g.row(r)) {
                        *o = *o + x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let shape = av.shape().to_vec();
                let n = T::lit(av.len().max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(&shape, g.item() / n));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let w = g.item() / T::lit(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                d[r * v + j] = probs[r * v + j] * w;
                            }
                            d[r * v + t] = d[r * v + t] - w;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), d).expect("shape"));
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let src = self.value(*qkv).data();
                let d = self.value(*qkv).cols() / 3;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let mut dqkv = vec![T::zero(); src.len()];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * 3 * d + h * dh;
                        let go = MatView { offset: b * seq * d + h * dh, rs: d as isize, cs: 1 };
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dP = dO · Vᵀ
                        gemm_view(
                            seq,
                            dh,
                            seq,
                            T::one(),
                            g.data(),
                            go,
                            src,
                            MatView { offset: base + 2 * d, rs: 1, cs: 3 * d as isize },
                            T::zero(),
                            &mut dp,
                            MatView::row_major(seq),
                        );
                        // dV = Pᵀ · dO
                        gemm_view(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            p,
                            MatView::transposed(seq),
                            g.data(),
                            go,
                            T::zero(),
                            &mut dqkv,
                            MatView { offset: base + 2 * d, rs: 3 * d as isize, cs: 1 },
                        );
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let s = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - s);
                            }
                        }
                        // dQ = dS · K · scale
                        gemm_view(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            MatView::row_major(seq),
                            src,
                            MatView { offset: base + d, rs: 3 * d as isize, cs: 1 },
                            T::zero(),
                            &mut dqkv,
                            MatView { offset: base, rs: 3 * d as isize, cs: 1 },
                        );
                        // dK = dSᵀ · Q · scale
                        gemm_view(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            MatView::transposed(seq),
                            src,
                            MatView { offset: base, rs: 3 * d as isize, cs: 1 },
                            T::zero(),
                            &mut dqkv,
                            MatView { offset: base + d, rs: 3 * d as isize, cs: 1 },
                        );
                    }
                }
                let shape = self.value(*qkv).shape().to_vec();
                self.accumulate(grads, *qkv, Tensor::new(&shape, dqkv).expect("shape"));
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}
