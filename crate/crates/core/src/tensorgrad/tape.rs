use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is a vector broadcast over the rows of the left.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    BernoulliEntropy(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    Conv1dMaxPool {
        seq: Var,
        filters: Var,
        bias: Var,
        width: usize,
        /// Winning time index per filter; `None` when the pooled value is
        /// a clipped relu (zero gradient).
        argmax: Vec<Option<usize>>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Column(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    tracked: bool,
}

/// Accumulated gradient of one node. Embedding tables receive sparse
/// row-wise gradients so large frozen-or-not tables never get densified.
#[derive(Clone, Debug)]
pub enum Grad {
    Dense(Vec<f64>),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl Grad {
    /// Adds `scale * self` into a dense buffer of the node's full size.
    pub fn add_to(&self, dst: &mut [f64], scale: f64) {
        match self {
            Grad::Dense(g) => {
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += scale * v;
                }
            }
            Grad::Rows { cols, rows } => {
                for (&r, g) in rows {
                    for (d, v) in dst[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *d += scale * v;
                    }
                }
            }
        }
    }

    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        match self {
            Grad::Dense(g) => g.clone(),
            Grad::Rows { .. } => {
                let mut out = vec![0.0; numel];
                self.add_to(&mut out, 1.0);
                out
            }
        }
    }

    fn merge(&mut self, other: Grad, numel: usize) {
        match (&mut *self, other) {
            (Grad::Dense(a), Grad::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Grad::Rows { rows: a, .. }, Grad::Rows { rows: b, .. }) => {
                for (r, g) in b {
                    match a.get_mut(&r) {
                        Some(dst) => {
                            for (x, y) in dst.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        None => {
                            a.insert(r, g);
                        }
                    }
                }
            }
            (Grad::Dense(a), rows @ Grad::Rows { .. }) => rows.add_to(a, 1.0),
            (Grad::Rows { .. }, Grad::Dense(mut b)) => {
                self.add_to(&mut b, 1.0);
                *self = Grad::Dense(b);
            }
        }
        debug_assert!(matches!(self, Grad::Rows { .. }) || self.len() == numel);
    }

    fn len(&self) -> usize {
        match self {
            Grad::Dense(g) => g.len(),
            Grad::Rows { .. } => usize::MAX,
        }
    }
}

/// Records operations for one forward pass; `backward` replays them in
/// exact reverse order. One tape per step; leaves may borrow parameter
/// tensors for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Grad>>,
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ENTROPY_EPS: f64 = 1e-12;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(Cow::Owned(value), op, tracked)
    }

    /// Owned leaf that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf that receives gradients (model parameters).
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push_op(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Bcast::Same);
        }
        let row_vec = matches!(tb.shape(), [n] | [1, n] if *n == ta.cols());
        if ta.shape().len() == 2 && row_vec {
            Ok(Bcast::Row)
        } else {
            Err(Error::shape(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = match bc {
            Bcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % cols]))
                .collect(),
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, mk(a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Scales row `t` of `a` (`[n×d]`) by `s[t]` (`s` has `n` elements).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (n, d) = rank2("scale_rows", ta)?;
        if ts.numel() != n {
            return Err(Error::shape("scale_rows", ta.shape(), ts.shape()));
        }
        let mut out = ta.clone();
        for (t, &sv) in ts.data().iter().enumerate() {
            for v in &mut out.data_mut()[t * d..(t + 1) * d] {
                *v *= sv;
            }
        }
        Ok(self.push_op(out, Op::ScaleRows(a, s), &[a, s]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push_op(out, op, &[a])
    }

    /// `mul * a + add` with constant scalars.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        self.unary(a, |x| mul * x + add, Op::Affine(a, mul))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Elementwise clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise `-p ln p - (1-p) ln(1-p)`, inputs clamped to
    /// `[1e-12, 1-1e-12]`.
    pub fn bernoulli_entropy(&mut self, p: Var) -> Var {
        self.unary(p, bernoulli_entropy, Op::BernoulliEntropy(p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = rank2("softmax_rows", ta)?;
        if n == 0 {
            return Err(Error::shape("softmax_rows", ta.shape(), &[0, 1]));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push_op(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = rank2("log_softmax_rows", ta)?;
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push_op(out, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = rank2("cross_entropy", tl)?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: y,
                    limit: c,
                });
            }
            let row = tl.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Gathers rows of `table` (`[V×d]`) for `ids`, giving `[L×d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = rank2("embedding_lookup", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push_op(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Valid 1-d convolution of `seq` (`[L×d]`) with `filters`
    /// (`[F×(width·d)]`) and `bias` (`[F]`), relu, then max over time.
    /// Ties go to the earliest time index.
    pub fn conv1d_maxpool(&mut self, seq: Var, filters: Var, bias: Var, width: usize) -> Result<Var> {
        let (ts, tf, tb) = (self.value(seq), self.value(filters), self.value(bias));
        let (l, d) = rank2("conv1d_maxpool", ts)?;
        let (f, wd) = rank2("conv1d_maxpool", tf)?;
        if width == 0 || wd != width * d || tb.numel() != f {
            return Err(Error::shape("conv1d_maxpool", ts.shape(), tf.shape()));
        }
        if l < width {
            return Err(Error::InvalidArgument(format!(
                "conv1d_maxpool: sequence length {l} shorter than filter width {width}"
            )));
        }
        let steps = l - width + 1;
        let sd = ts.data();
        let mut out = Vec::with_capacity(f);
        let mut argmax = Vec::with_capacity(f);
        for fi in 0..f {
            let w = tf.row(fi);
            let mut best = f64::NEG_INFINITY;
            let mut best_t = 0;
            for t in 0..steps {
                let pre = dot(w, &sd[t * d..(t + width) * d]);
                if pre > best {
                    best = pre;
                    best_t = t;
                }
            }
            let pre = best + tb.data()[fi];
            if pre > 0.0 {
                out.push(pre);
                argmax.push(Some(best_t));
            } else {
                out.push(0.0);
                argmax.push(None);
            }
        }
        Ok(self.push_op(
            Tensor::vector(out),
            Op::Conv1dMaxPool {
                seq,
                filters,
                bias,
                width,
                argmax,
            },
            &[seq, filters, bias],
        ))
    }

    /// Inverted dropout: zero with probability `rho`, scale survivors by
    /// `1/(1-rho)`. Identity when not training or `rho == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rho: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("dropout rate {rho} outside [0,1)")));
        }
        if !training || rho == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rho);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rho { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout(a, mask), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[m×n] -> [n]`, summing over rows.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = rank2("sum_rows", ta)?;
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push_op(Tensor::vector(out), Op::SumRows(a), &[a]))
    }

    /// `[m×n] -> [m]`, summing within each row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = rank2("sum_cols", ta)?;
        let out = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        Ok(self.push_op(Tensor::vector(out), Op::SumCols(a), &[a]))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = rank2("column", ta)?;
        if j >= n {
            return Err(Error::OutOfRange {
                what: "column",
                index: j,
                limit: n,
            });
        }
        let out = ta.data().chunks(n).map(|r| r[j]).collect();
        Ok(self.push_op(Tensor::vector(out), Op::Column(a, j), &[a]))
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push_op(Tensor::vector(out), Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }
}

pub(crate) fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

impl<'p> Tape<'p> {
    /// Reverse pass from a scalar `loss`. Gradients accumulate across
    /// calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[]));
        }
        let mut work: Vec<Option<Grad>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(Grad::Dense(vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = work[i].take() else { continue };
            let gd = match g {
                Grad::Dense(d) => d,
                rows => rows.to_dense(self.nodes[i].value.numel()),
            };
            self.backward_node(i, &gd, &mut work);
            work[i] = Some(Grad::Dense(gd));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (i, g) in work.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let numel = self.nodes[i].value.numel();
            match &mut self.grads[i] {
                Some(acc) => acc.merge(g, numel),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Dense gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let t = self.value(v);
        Some(Tensor::new(t.shape().to_vec(), g.to_dense(t.numel())).expect("grad shape"))
    }

    pub fn grad_raw(&self, v: Var) -> Option<&Grad> {
        self.grads.get(v.0)?.as_ref()
    }

    fn dense_slot<'w>(&self, work: &'w mut [Option<Grad>], v: Var) -> Option<&'w mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = &mut work[v.0];
        match slot {
            None => *slot = Some(Grad::Dense(vec![0.0; numel])),
            Some(Grad::Rows { .. }) => {
                let d = slot.as_ref().unwrap().to_dense(numel);
                *slot = Some(Grad::Dense(d));
            }
            Some(Grad::Dense(_)) => {}
        }
        match slot {
            Some(Grad::Dense(d)) => Some(d),
            _ => unreachable!(),
        }
    }

    fn acc_elementwise(&self, work: &mut [Option<Grad>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(dst) = self.dense_slot(work, v) {
            for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    /// Accumulates into the right operand of a binary op, reducing over
    /// rows when it was broadcast.
    fn acc_rhs(&self, work: &mut [Option<Grad>], b: Var, bc: Bcast, cols: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        match bc {
            Bcast::Same => self.acc_elementwise(work, b, g, f),
            Bcast::Row => {
                if let Some(dst) = self.dense_slot(work, b) {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i % cols] += f(i, gv);
                    }
                }
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], work: &mut [Option<Grad>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = self.dense_slot(work, a) {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] += dot(grow, tb.row(p));
                        }
                    }
                }
                if let Some(db) = self.dense_slot(work, b) {
                    // dB = Aᵀ · dC
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b, bc) => {
                let cols = out.cols();
                self.acc_elementwise(work, a, g, |_, gv| gv);
                self.acc_rhs(work, b, bc, cols, g, |_, gv| gv);
            }
            &Op::Sub(a, b, bc) => {
                let cols = out.cols();
                self.acc_elementwise(work, a, g, |_, gv| gv);
                self.acc_rhs(work, b, bc, cols, g, |_, gv| -gv);
            }
            &Op::Mul(a, b, bc) => {
                let cols = out.cols();
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let bidx = |i: usize| if bc == Bcast::Row { i % cols } else { i };
                self.acc_elementwise(work, a, g, |i, gv| gv * bd[bidx(i)]);
                self.acc_rhs(work, b, bc, cols, g, |i, gv| gv * ad[i]);
            }
            &Op::ScaleRows(a, s) => {
                let ta = self.value(a);
                let d = ta.shape()[1];
                let sd = self.value(s).data();
                self.acc_elementwise(work, a, g, |i, gv| gv * sd[i / d]);
                if let Some(ds) = self.dense_slot(work, s) {
                    for (t, dst) in ds.iter_mut().enumerate() {
                        *dst += dot(&g[t * d..(t + 1) * d], ta.row(t));
                    }
                }
            }
            &Op::Affine(a, mul) => self.acc_elementwise(work, a, g, |_, gv| gv * mul),
            &Op::Relu(a) => {
                let ad = self.value(a).data();
                self.acc_elementwise(work, a, g, |i, gv| if ad[i] > 0.0 { gv } else { 0.0 });
            }
            &Op::Tanh(a) => {
                let od = out.data();
                self.acc_elementwise(work, a, g, |i, gv| gv * (1.0 - od[i] * od[i]));
            }
            &Op::Sigmoid(a) => {
                let od = out.data();
                self.acc_elementwise(work, a, g, |i, gv| gv * od[i] * (1.0 - od[i]));
            }
            &Op::Exp(a) => {
                let od = out.data();
                self.acc_elementwise(work, a, g, |i, gv| gv * od[i]);
            }
            &Op::Log(a) => {
                let ad = self.value(a).data();
                self.acc_elementwise(work, a, g, |i, gv| gv / ad[i]);
            }
            &Op::Clamp(a, lo, hi) => {
                let ad = self.value(a).data();
                self.acc_elementwise(work, a, g, |i, gv| if ad[i] >= lo && ad[i] <= hi { gv } else { 0.0 });
            }
            &Op::BernoulliEntropy(a) => {
                let ad = self.value(a).data();
                self.acc_elementwise(work, a, g, |i, gv| {
                    let p = ad[i];
                    if !(ENTROPY_EPS..=1.0 - ENTROPY_EPS).contains(&p) {
                        0.0
                    } else {
                        gv * ((1.0 - p) / p).ln()
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let n = out.cols();
                let od = out.data();
                if let Some(da) = self.dense_slot(work, a) {
                    for (r, (grow, orow)) in g.chunks(n).zip(od.chunks(n)).enumerate() {
                        let s = dot(grow, orow);
                        for j in 0..n {
                            da[r * n + j] += orow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let od = out.data();
                if let Some(da) = self.dense_slot(work, a) {
                    for (r, (grow, orow)) in g.chunks(n).zip(od.chunks(n)).enumerate() {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            da[r * n + j] += grow[j] - orow[j].exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let m = labels.len() as f64;
                if let Some(dl) = self.dense_slot(work, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        let mut p = tl.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[y] -= 1.0;
                        for j in 0..c {
                            dl[r * c + j] += g[0] * p[j] / m;
                        }
                    }
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                let table = *table;
                if !self.nodes[table.0].tracked {
                    return;
                }
                let d = self.value(table).cols();
                match &mut work[table.0] {
                    Some(Grad::Dense(dst)) => {
                        for (t, &id) in ids.iter().enumerate() {
                            for (x, gv) in dst[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                                *x += gv;
                            }
                        }
                    }
                    slot => {
                        if slot.is_none() {
                            *slot = Some(Grad::Rows {
                                cols: d,
                                rows: BTreeMap::new(),
                            });
                        }
                        let Some(Grad::Rows { rows, .. }) = slot else { unreachable!() };
                        for (t, &id) in ids.iter().enumerate() {
                            let dst = rows.entry(id).or_insert_with(|| vec![0.0; d]);
                            for (x, gv) in dst.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                                *x += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv1dMaxPool {
                seq,
                filters,
                bias,
                width,
                argmax,
            } => {
                let (ts, tf) = (self.value(*seq), self.value(*filters));
                let d = ts.cols();
                let span = width * d;
                if let Some(db) = self.dense_slot(work, *bias) {
                    for (fi, am) in argmax.iter().enumerate() {
                        if am.is_some() {
                            db[fi] += g[fi];
                        }
                    }
                }
                if let Some(df) = self.dense_slot(work, *filters) {
                    for (fi, am) in argmax.iter().enumerate() {
                        if let Some(t) = am {
                            let window = &ts.data()[t * d..t * d + span];
                            for (x, s) in df[fi * span..(fi + 1) * span].iter_mut().zip(window) {
                                *x += g[fi] * s;
                            }
                        }
                    }
                }
                if let Some(ds) = self.dense_slot(work, *seq) {
                    for (fi, am) in argmax.iter().enumerate() {
                        if let Some(t) = am {
                            for (x, w) in ds[t * d..t * d + span].iter_mut().zip(tf.row(fi)) {
                                *x += g[fi] * w;
                            }
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => self.acc_elementwise(work, *a, g, |i, gv| gv * mask[i]),
            &Op::Sum(a) => self.acc_elementwise(work, a, &vec![g[0]; self.value(a).numel()], |_, gv| gv),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                let gv = g[0] / n as f64;
                if let Some(da) = self.dense_slot(work, a) {
                    for x in da.iter_mut() {
                        *x += gv;
                    }
                }
            }
            &Op::SumRows(a) => {
                let n = out.numel();
                if let Some(da) = self.dense_slot(work, a) {
                    for (i, x) in da.iter_mut().enumerate() {
                        *x += g[i % n];
                    }
                }
            }
            &Op::SumCols(a) => {
                let n = self.value(a).cols();
                if let Some(da) = self.dense_slot(work, a) {
                    for (i, x) in da.iter_mut().enumerate() {
                        *x += g[i / n];
                    }
                }
            }
            &Op::Column(a, j) => {
                let n = self.value(a).cols();
                if let Some(da) = self.dense_slot(work, a) {
                    for (r, gv) in g.iter().enumerate() {
                        da[r * n + j] += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc_elementwise(work, p, &g[off..off + n], |_, gv| gv);
                    off += n;
                }
            }
            &Op::Reshape(a) => self.acc_elementwise(work, a, g, |_, gv| gv),
        }
    }
}
