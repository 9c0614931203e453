//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! operation has a hand-written backward rule; [`Graph::backward`] replays them
//! in reverse order and [`Graph::accumulate_into`] adds the parameter gradients
//! into a [`ParamStore`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{ParamId, ParamStore};
use super::tensor::{axpy, dot, lse_unchecked, softmax_unchecked, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Operation kinds, used to name a backward rule (for fault injection in tests).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulT,
    MatVec,
    VecMat,
    Add,
    Mul,
    AddBias,
    Scale,
    Tanh,
    Sigmoid,
    Concat,
    ConcatCols,
    Slice,
    Row,
    StackRows,
    Gather,
    MeanRows,
    SumRows,
    Mean,
    Dropout,
    Noise,
    Dot,
    Sum,
    AddN,
    LogSumExp,
    LogSoftmax,
    Softmax,
    Pick,
    LseTransition,
    BceWithLogits,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var, usize, usize),
    SumRows(Var, usize, usize),
    Mean(Vec<Var>),
    Dropout(Var, Vec<f64>),
    Noise(Var),
    Dot(Var, Var),
    Sum(Var),
    AddN(Vec<Var>),
    LogSumExp(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Pick(Var, usize),
    LseTransition(Var, Var),
    BceWithLogits(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Constant | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::MatVec(..) => OpKind::MatVec,
            Op::VecMat(..) => OpKind::VecMat,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Concat(_) => OpKind::Concat,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Slice(..) => OpKind::Slice,
            Op::Row(..) => OpKind::Row,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Gather(..) => OpKind::Gather,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::SumRows(..) => OpKind::SumRows,
            Op::Mean(_) => OpKind::Mean,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Noise(_) => OpKind::Noise,
            Op::Dot(..) => OpKind::Dot,
            Op::Sum(_) => OpKind::Sum,
            Op::AddN(_) => OpKind::AddN,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Pick(..) => OpKind::Pick,
            Op::LseTransition(..) => OpKind::LseTransition,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    faulty: Option<OpKind>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the gradient produced by every rule of `kind` by 1.5.
    /// Exists so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn with_faulty_rule(mut self, kind: OpKind) -> Self {
        self.faulty = Some(kind);
        self
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng_all(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.ng(*v))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &aip) in ta.row(i).iter().enumerate().take(k) {
                if aip != 0.0 {
                    axpy(aip, tb.row(p), orow);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [n,k]`, `b: [m,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = ta.row(i);
            for j in 0..m {
                out[i * m + j] = dot(ar, tb.row(j));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a, b), ng))
    }

    /// `m · x` for `m: [r,c]`, `x: [c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.value(m), self.value(x));
        if tm.rank() != 2 || tx.rank() != 1 || tm.cols() != tx.len() {
            return Err(mismatch("matvec", tm, tx));
        }
        let out: Vec<f64> = (0..tm.rows()).map(|r| dot(tm.row(r), tx.data())).collect();
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(m, x), ng))
    }

    /// `xᵀ · m` for `x: [r]`, `m: [r,c]`.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(m));
        if tm.rank() != 2 || tx.rank() != 1 || tm.rows() != tx.len() {
            return Err(mismatch("vecmat", tx, tm));
        }
        let mut out = vec![0.0; tm.cols()];
        for (r, &xr) in tx.data().iter().enumerate() {
            axpy(xr, tm.row(r), &mut out);
        }
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::VecMat(x, m), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds vector `b` to every row of matrix `m` (or to vector `m`).
    pub fn add_bias(&mut self, m: Var, b: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(b));
        if tb.rank() != 1 || tm.cols() != tb.len() || tm.rank() == 0 {
            return Err(mismatch("add_bias", tm, tb));
        }
        let mut t = tm.clone();
        let c = tb.len();
        for row in t.data_mut().chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let ng = self.ng(m) || self.ng(b);
        Ok(self.push(t, Op::AddBias(m, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 1 {
                return Err(mismatch("concat", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let ng = self.ng_all(parts);
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), ng))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let n = self.value(parts[0]).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.rows() != n {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let ng = self.ng_all(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.len() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out = t.data()[start..start + len].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::Slice(a, start), ng))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || i >= t.rows() {
            return Err(Error::ShapeMismatch {
                op: "row",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let out = t.row(i).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::Row(a, i), ng))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("stack_rows"));
        }
        let c = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for r in rows {
            let t = self.value(*r);
            if t.rank() != 1 || t.len() != c {
                return Err(mismatch("stack_rows", self.value(rows[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let ng = self.ng_all(rows);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::StackRows(rows.to_vec()),
            ng,
        ))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![bad],
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::Gather(table, idx.to_vec()),
            ng,
        ))
    }

    fn check_row_range(&self, a: Var, start: usize, end: usize, op: &'static str) -> Result<()> {
        let t = self.value(a);
        if start >= end {
            return Err(Error::EmptyInput(op));
        }
        if t.rank() != 2 || end > t.rows() {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        Ok(())
    }

    /// Mean of rows `start..end`.
    pub fn mean_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_row_range(a, start, end, "mean_rows")?;
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for i in start..end {
            axpy(1.0, t.row(i), &mut out);
        }
        let inv = 1.0 / (end - start) as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a, start, end), ng))
    }

    /// Sum of rows `start..end`.
    pub fn sum_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_row_range(a, start, end, "sum_rows")?;
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for i in start..end {
            axpy(1.0, t.row(i), &mut out);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::SumRows(a, start, end), ng))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let mut t = self.value(parts[0]).clone();
        for p in &parts[1..] {
            let o = self.value(*p);
            if o.shape() != t.shape() {
                return Err(mismatch("mean", &t, o));
            }
            t.add_assign(o);
        }
        let inv = 1.0 / parts.len() as f64;
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng_all(parts);
        Ok(self.push(t, Op::Mean(parts.to_vec()), ng))
    }

    /// Inverted dropout: zeroes each entry with probability `rate`, scales survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.apply_mask(a, mask)
    }

    /// Multiplies by a fixed mask.
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let mut t = self.value(a).clone();
        assert_eq!(t.len(), mask.len(), "dropout mask length");
        for (x, m) in t.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        let ng = self.ng(a);
        self.push(t, Op::Dropout(a, mask), ng)
    }

    /// Adds zero-mean Gaussian noise; the backward rule is the identity.
    pub fn gaussian_noise<R: Rng>(&mut self, a: Var, std: f64, rng: &mut R) -> Var {
        if std <= 0.0 {
            return a;
        }
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
        let ng = self.ng(a);
        self.push(t, Op::Noise(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let v = dot(ta.data(), tb.data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    /// Sum of equally shaped tensors (typically scalars).
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("add_n"));
        }
        let mut t = self.value(parts[0]).clone();
        for p in &parts[1..] {
            let o = self.value(*p);
            if o.shape() != t.shape() {
                return Err(mismatch("add_n", &t, o));
            }
            t.add_assign(o);
        }
        let ng = self.ng_all(parts);
        Ok(self.push(t, Op::AddN(parts.to_vec()), ng))
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyInput("log_sum_exp"));
        }
        let v = lse_unchecked(t.data());
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.is_empty() {
            return Err(Error::EmptyInput("log_softmax"));
        }
        let l = lse_unchecked(t.data());
        let out: Vec<f64> = t.data().iter().map(|x| x - l).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax(a), ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.is_empty() {
            return Err(Error::EmptyInput("softmax"));
        }
        let out = softmax_unchecked(t.data());
        let ng = self.ng(a);
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), ng))
    }

    /// Scalar at flat index `i`.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![i],
            });
        }
        let v = t.data()[i];
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, i), ng))
    }

    /// One step of the log-space forward recursion:
    /// `out[j] = ln Σ_i exp(alpha[i] + trans[i, j])`.
    pub fn lse_transition(&mut self, alpha: Var, trans: Var) -> Result<Var> {
        let (ta, tt) = (self.value(alpha), self.value(trans));
        if ta.rank() != 1 || tt.rank() != 2 || tt.rows() != ta.len() {
            return Err(mismatch("lse_transition", ta, tt));
        }
        let (k, m) = (tt.rows(), tt.cols());
        let mut col = vec![0.0; k];
        let mut out = vec![0.0; m];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = ta.data()[i] + tt.at(i, j);
            }
            *o = lse_unchecked(&col);
        }
        let ng = self.ng(alpha) || self.ng(trans);
        Ok(self.push(Tensor::vector(out), Op::LseTransition(alpha, trans), ng))
    }

    /// Summed binary cross-entropy of `logits` against fixed `targets` in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "bce targets",
                got: targets.len(),
                expected: t.len(),
            });
        }
        let v: f64 = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(v), Op::BceWithLogits(logits, targets), ng))
    }

    /// Runs every backward rule from `root` (a scalar) down to the leaves.
    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.grads[root.0] = Some(Tensor::filled(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if let Some(k) = self.nodes[i].op.kind() {
                if self.faulty == Some(k) {
                    g.data_mut().iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients reaching parameter leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(g);
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) {
        // Take the op out so its operand lists can be read while grads are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
        match &op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                self.acc(a, |ga| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let garow = ga.row_mut(r);
                        for p in 0..k {
                            garow[p] += dot(grow, tb.row(p));
                        }
                    }
                });
                self.acc(b, |gb| {
                    for r in 0..n {
                        let grow = g.row(r);
                        for p in 0..k {
                            let a_rp = ta.at(r, p);
                            if a_rp != 0.0 {
                                axpy(a_rp, grow, &mut gb.data_mut()[p * m..(p + 1) * m]);
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let (n, m) = (ta.rows(), tb.rows());
                self.acc(a, |ga| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let garow = ga.row_mut(r);
                        for j in 0..m {
                            if grow[j] != 0.0 {
                                axpy(grow[j], tb.row(j), garow);
                            }
                        }
                    }
                });
                self.acc(b, |gb| {
                    for r in 0..n {
                        let grow = g.row(r);
                        let arow = ta.row(r);
                        for j in 0..m {
                            if grow[j] != 0.0 {
                                axpy(grow[j], arow, gb.row_mut(j));
                            }
                        }
                    }
                });
            }
            Op::MatVec(m, x) => {
                let (m, x) = (*m, *x);
                let tm = self.nodes[m.0].value.clone();
                let tx = self.nodes[x.0].value.clone();
                self.acc(m, |gm| {
                    for (r, &gr) in g.data().iter().enumerate() {
                        if gr != 0.0 {
                            axpy(gr, tx.data(), gm.row_mut(r));
                        }
                    }
                });
                self.acc(x, |gx| {
                    for (r, &gr) in g.data().iter().enumerate() {
                        if gr != 0.0 {
                            axpy(gr, tm.row(r), gx.data_mut());
                        }
                    }
                });
            }
            Op::VecMat(x, m) => {
                let (x, m) = (*x, *m);
                let tm = self.nodes[m.0].value.clone();
                let tx = self.nodes[x.0].value.clone();
                self.acc(m, |gm| {
                    for (r, &xr) in tx.data().iter().enumerate() {
                        if xr != 0.0 {
                            axpy(xr, g.data(), gm.row_mut(r));
                        }
                    }
                });
                self.acc(x, |gx| {
                    for (r, gxr) in gx.data_mut().iter_mut().enumerate() {
                        *gxr += dot(tm.row(r), g.data());
                    }
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga| ga.add_assign(g));
                self.acc(b, |gb| gb.add_assign(g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                self.acc(a, |ga| {
                    for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gi * bi;
                    }
                });
                self.acc(b, |gb| {
                    for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddBias(m, b) => {
                let (m, b) = (*m, *b);
                self.acc(m, |gm| gm.add_assign(g));
                self.acc(b, |gb| {
                    let c = gb.len();
                    for row in g.data().chunks(c) {
                        axpy(1.0, row, gb.data_mut());
                    }
                });
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                self.acc(a, |ga| axpy(s, g.data(), ga.data_mut()));
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let local: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gi)| gi * (1.0 - y * y))
                    .collect();
                self.acc(a, |ga| axpy(1.0, &local, ga.data_mut()));
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let local: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gi)| gi * y * (1.0 - y))
                    .collect();
                self.acc(a, |ga| axpy(1.0, &local, ga.data_mut()));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let seg = &g.data()[off..off + len];
                    self.acc(*p, |gp| axpy(1.0, seg, gp.data_mut()));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    self.acc(*p, |gp| {
                        for r in 0..gp.rows() {
                            let src = &g.data()[r * total + off..r * total + off + c];
                            axpy(1.0, src, gp.row_mut(r));
                        }
                    });
                    off += c;
                }
            }
            Op::Slice(a, start) => {
                let (a, start) = (*a, *start);
                self.acc(a, |ga| {
                    axpy(1.0, g.data(), &mut ga.data_mut()[start..start + g.len()]);
                });
            }
            Op::Row(a, r) => {
                let (a, r) = (*a, *r);
                self.acc(a, |ga| axpy(1.0, g.data(), ga.row_mut(r)));
            }
            Op::StackRows(rows) => {
                for (r, v) in rows.iter().enumerate() {
                    self.acc(*v, |gv| axpy(1.0, g.row(r), gv.data_mut()));
                }
            }
            Op::Gather(table, idx) => {
                let table = *table;
                self.acc(table, |gt| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(1.0, g.row(r), gt.row_mut(src));
                    }
                });
            }
            Op::MeanRows(a, s, e) => {
                let (a, s, e) = (*a, *s, *e);
                let inv = 1.0 / (e - s) as f64;
                self.acc(a, |ga| {
                    for r in s..e {
                        axpy(inv, g.data(), ga.row_mut(r));
                    }
                });
            }
            Op::SumRows(a, s, e) => {
                let (a, s, e) = (*a, *s, *e);
                self.acc(a, |ga| {
                    for r in s..e {
                        axpy(1.0, g.data(), ga.row_mut(r));
                    }
                });
            }
            Op::Mean(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    self.acc(*p, |gp| axpy(inv, g.data(), gp.data_mut()));
                }
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                self.acc(a, |ga| {
                    for ((o, gi), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::Noise(a) => {
                let a = *a;
                self.acc(a, |ga| ga.add_assign(g));
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let gs = g.item();
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                self.acc(a, |ga| axpy(gs, tb.data(), ga.data_mut()));
                self.acc(b, |gb| axpy(gs, ta.data(), gb.data_mut()));
            }
            Op::Sum(a) => {
                let (a, gs) = (*a, g.item());
                self.acc(a, |ga| ga.data_mut().iter_mut().for_each(|x| *x += gs));
            }
            Op::AddN(parts) => {
                for p in parts {
                    self.acc(*p, |gp| gp.add_assign(g));
                }
            }
            Op::LogSumExp(a) => {
                let a = *a;
                let p = softmax_unchecked(self.nodes[a.0].value.data());
                let gs = g.item();
                self.acc(a, |ga| axpy(gs, &p, ga.data_mut()));
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let y = self.nodes[i].value.data();
                let gsum: f64 = g.data().iter().sum();
                let local: Vec<f64> = y
                    .iter()
                    .zip(g.data())
                    .map(|(yi, gi)| gi - yi.exp() * gsum)
                    .collect();
                self.acc(a, |ga| axpy(1.0, &local, ga.data_mut()));
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[i].value.data();
                let gy = dot(g.data(), y);
                let local: Vec<f64> = y
                    .iter()
                    .zip(g.data())
                    .map(|(yi, gi)| yi * (gi - gy))
                    .collect();
                self.acc(a, |ga| axpy(1.0, &local, ga.data_mut()));
            }
            Op::Pick(a, idx) => {
                let (a, idx, gs) = (*a, *idx, g.item());
                self.acc(a, |ga| ga.data_mut()[idx] += gs);
            }
            Op::LseTransition(alpha, trans) => {
                let (alpha, trans) = (*alpha, *trans);
                let ta = self.nodes[alpha.0].value.clone();
                let tt = self.nodes[trans.0].value.clone();
                let out = self.nodes[i].value.data().to_vec();
                let (k, m) = (tt.rows(), tt.cols());
                // w[i][j] = exp(alpha[i] + T[i,j] - out[j]) is the posterior of predecessor i.
                let mut w = vec![0.0; k * m];
                for r in 0..k {
                    for j in 0..m {
                        let s = ta.data()[r] + tt.at(r, j);
                        w[r * m + j] = if s == f64::NEG_INFINITY || out[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (s - out[j]).exp() * g.data()[j]
                        };
                    }
                }
                self.acc(alpha, |ga| {
                    for r in 0..k {
                        ga.data_mut()[r] += w[r * m..(r + 1) * m].iter().sum::<f64>();
                    }
                });
                self.acc(trans, |gt| axpy(1.0, &w, gt.data_mut()));
            }
            Op::BceWithLogits(z, targets) => {
                let (z, gs) = (*z, g.item());
                let tz = self.nodes[z.0].value.clone();
                self.acc(z, |gz| {
                    for ((o, &zi), &yi) in gz.data_mut().iter_mut().zip(tz.data()).zip(targets) {
                        *o += gs * (sigmoid(zi) - yi);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
