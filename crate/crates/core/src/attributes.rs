//! Span pooling and per-span softmax attribute heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{attribute_heads, SpanKind, Task};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Forward, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

/// Pools rows `i..j` of `h` into one span vector.
pub fn aggregate(f: &mut Forward, h: Var, i: usize, j: usize, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Mean => f.g.mean_rows(h, i, j),
        Pooling::Sum => f.g.sum_rows(h, i, j),
    }
}

pub fn aggregate_rows(h: &Tensor, i: usize, j: usize, mode: Pooling) -> Result<Vec<f64>> {
    if i >= j {
        return Err(Error::EmptyInput("span"));
    }
    if j > h.rows() {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            left: h.shape().to_vec(),
            right: vec![i, j],
        });
    }
    let mut out = vec![0.0; h.cols()];
    for r in i..j {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    if mode == Pooling::Mean {
        let inv = 1.0 / (j - i) as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

/// Attribute heads a span of `kind` carries for `task`.
pub fn attributes_for(task: Task, kind: SpanKind) -> &'static [&'static str] {
    attribute_heads(task, kind)
}

/// Softmax classifier `softmax(W x + b)` over a closed label set.
#[derive(Clone, Debug)]
pub struct AttributeHead {
    pub name: String,
    pub classes: usize,
    w: ParamId,
    b: ParamId,
}

impl AttributeHead {
    pub fn new<R: Rng>(name: &str, classes: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("head {name} needs at least 2 classes")));
        }
        Ok(Self {
            name: name.to_string(),
            classes,
            w: store.add_uniform(format!("attr.{name}.w"), &[classes, dim], dim, rng),
            b: store.add_zeros(format!("attr.{name}.b"), &[classes]),
        })
    }

    pub fn logits(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let b = f.p(self.b);
        let z = f.g.matvec(w, x)?;
        f.g.add(z, b)
    }

    /// `−log P(class | x)`.
    pub fn nll(&self, f: &mut Forward, x: Var, class: usize) -> Result<Var> {
        let z = self.logits(f, x)?;
        let lp = f.g.log_softmax(z)?;
        let p = f.g.pick(lp, class)?;
        Ok(f.g.scale(p, -1.0))
    }

    /// Class distribution for a pooled span vector.
    pub fn classify(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let w = store.value(self.w);
        if w.cols() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "classify",
                left: w.shape().to_vec(),
                right: vec![x.len()],
            });
        }
        let b = store.value(self.b).data();
        let z: Vec<f64> = (0..self.classes)
            .map(|c| b[c] + w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        softmax(&z)
    }
}
