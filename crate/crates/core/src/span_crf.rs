//! BIO span tagging with a linear-chain CRF over the flattened conversation.
//!
//! Tag `0` is `O`; every span type `t` owns tags `2t+1` (B) and `2t+2` (I).
//! The boundary transitions are stored as two vectors, `start[y]` for START→y and
//! `stop[y]` for y→STOP, next to the `K×K` tag transition matrix. Transitions that
//! would make BIO ill-formed carry `−∞` at train and decode time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SpanKind, Task};
use crate::error::{Error, Result};
use crate::numerics::{lse_unchecked, Forward, ParamId, ParamStore, Tensor, Var};

pub const O: usize = 0;
/// Span types in tag order.
pub const SPAN_KINDS: [SpanKind; 2] = [SpanKind::Entity, SpanKind::Property];

pub fn n_tags(n_types: usize) -> usize {
    2 * n_types + 1
}

pub fn begin_tag(kind: SpanKind) -> usize {
    match kind {
        SpanKind::Entity => 1,
        SpanKind::Property => 3,
    }
}

/// `(type, is_begin)` of a non-O tag.
pub fn tag_type(tag: usize) -> Option<(usize, bool)> {
    (tag != O).then(|| ((tag - 1) / 2, (tag - 1) % 2 == 0))
}

/// Whether `to` may follow `from` (`None` is START).
pub fn allowed(from: Option<usize>, to: usize) -> bool {
    match tag_type(to) {
        Some((t, false)) => matches!(from.and_then(tag_type), Some((u, _)) if u == t),
        _ => true,
    }
}

pub fn is_valid(tags: &[usize]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !allowed(prev, t) {
            return false;
        }
        prev = Some(t);
    }
    true
}

pub fn tag_names(task: Task) -> [&'static str; 5] {
    match task {
        Task::Sx => ["O", "sym_B", "sym_I", "symprop_B", "symprop_I"],
        Task::Rx => ["O", "med_B", "med_I", "medsprop_B", "medsprop_I"],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

impl Span {
    pub fn new(start: usize, end: usize, kind: SpanKind) -> Self {
        debug_assert!(start < end);
        Self { start, end, kind }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Maximal `B I*` runs. A stray `I` opens a new span.
pub fn extract_spans(tags: &[usize]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        let cont = match (tag_type(tag), open) {
            (Some((t, false)), Some((_, ot))) => t == ot,
            _ => false,
        };
        if cont {
            continue;
        }
        if let Some((s, t)) = open.take() {
            out.push(Span::new(s, i, SPAN_KINDS[t]));
        }
        if let Some((t, _)) = tag_type(tag) {
            open = Some((i, t));
        }
    }
    if let Some((s, t)) = open {
        out.push(Span::new(s, tags.len(), SPAN_KINDS[t]));
    }
    out
}

/// Tag sequence encoding `spans`; spans must not overlap.
pub fn spans_to_tags(n: usize, spans: &[Span]) -> Result<Vec<usize>> {
    let mut tags = vec![O; n];
    for s in spans {
        if s.start >= s.end || s.end > n {
            return Err(Error::InvalidConfig(format!("span {}..{} outside 0..{n}", s.start, s.end)));
        }
        if tags[s.start..s.end].iter().any(|&t| t != O) {
            return Err(Error::InvalidConfig(format!("span {}..{} overlaps another span", s.start, s.end)));
        }
        let b = begin_tag(s.kind);
        tags[s.start] = b;
        tags[s.start + 1..s.end].iter_mut().for_each(|t| *t = b + 1);
    }
    Ok(tags)
}

/// Effective CRF scores with the validity mask folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfScores {
    pub start: Vec<f64>,
    pub trans: Tensor,
    pub stop: Vec<f64>,
}

fn check_emissions(emissions: &Tensor, k: usize) -> Result<()> {
    if emissions.rank() != 2 || emissions.cols() != k || emissions.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "crf emissions",
            left: emissions.shape().to_vec(),
            right: vec![k],
        });
    }
    Ok(())
}

impl CrfScores {
    pub fn k(&self) -> usize {
        self.start.len()
    }

    /// Applies the BIO mask to raw scores.
    pub fn masked(start: Vec<f64>, trans: Tensor, stop: Vec<f64>) -> Self {
        let k = start.len();
        let start = start
            .into_iter()
            .enumerate()
            .map(|(j, v)| if allowed(None, j) { v } else { f64::NEG_INFINITY })
            .collect();
        let mut trans = trans;
        for i in 0..k {
            for j in 0..k {
                if !allowed(Some(i), j) {
                    trans.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        Self { start, trans, stop }
    }

    /// `S(y, h)`: boundary, transition and emission terms of one sequence.
    pub fn score(&self, emissions: &Tensor, y: &[usize]) -> Result<f64> {
        check_emissions(emissions, self.k())?;
        if y.len() != emissions.rows() {
            return Err(Error::LengthMismatch {
                what: "tag sequence",
                got: y.len(),
                expected: emissions.rows(),
            });
        }
        let mut s = self.start[y[0]] + self.stop[y[y.len() - 1]];
        for (t, &tag) in y.iter().enumerate() {
            s += emissions.at(t, tag);
            if t > 0 {
                s += self.trans.at(y[t - 1], tag);
            }
        }
        Ok(s)
    }

    /// `log Σ_y exp S(y, h)` by the forward recursion.
    pub fn log_partition(&self, emissions: &Tensor) -> Result<f64> {
        check_emissions(emissions, self.k())?;
        let k = self.k();
        let mut alpha: Vec<f64> = (0..k).map(|j| self.start[j] + emissions.at(0, j)).collect();
        let mut col = vec![0.0; k];
        for t in 1..emissions.rows() {
            let next: Vec<f64> = (0..k)
                .map(|j| {
                    for (i, c) in col.iter_mut().enumerate() {
                        *c = alpha[i] + self.trans.at(i, j);
                    }
                    lse_unchecked(&col) + emissions.at(t, j)
                })
                .collect();
            alpha = next;
        }
        let fin: Vec<f64> = alpha.iter().zip(&self.stop).map(|(a, s)| a + s).collect();
        Ok(lse_unchecked(&fin))
    }

    /// Best sequence; among equal scores the lower tag index wins at every step.
    pub fn viterbi(&self, emissions: &Tensor) -> Result<Vec<usize>> {
        check_emissions(emissions, self.k())?;
        let (n, k) = (emissions.rows(), self.k());
        let mut delta: Vec<f64> = (0..k).map(|j| self.start[j] + emissions.at(0, j)).collect();
        let mut back = vec![vec![0usize; k]; n];
        for t in 1..n {
            let mut next = vec![f64::NEG_INFINITY; k];
            for j in 0..k {
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, d) in delta.iter().enumerate() {
                    let v = d + self.trans.at(i, j);
                    if v > best.0 {
                        best = (v, i);
                    }
                }
                next[j] = best.0 + emissions.at(t, j);
                back[t][j] = best.1;
            }
            delta = next;
        }
        let mut last = (f64::NEG_INFINITY, 0);
        for (j, d) in delta.iter().enumerate() {
            let v = d + self.stop[j];
            if v > last.0 {
                last = (v, j);
            }
        }
        let mut y = vec![last.1; n];
        for t in (1..n).rev() {
            y[t - 1] = back[t][y[t]];
        }
        Ok(y)
    }
}

/// Learned CRF parameters: boundary and transition scores plus one embedding per tag.
#[derive(Clone, Debug)]
pub struct CrfLayer {
    pub n_tags: usize,
    start: ParamId,
    trans: ParamId,
    stop: ParamId,
    tags: ParamId,
    start_mask: Tensor,
    trans_mask: Tensor,
}

impl CrfLayer {
    pub fn new<R: Rng>(n_types: usize, dim: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let k = n_tags(n_types);
        let start = store.add_zeros("crf.start", &[k]);
        let trans = store.add_zeros("crf.trans", &[k, k]);
        let stop = store.add_zeros("crf.stop", &[k]);
        let tags = store.add_uniform("crf.tags", &[k, dim], dim, rng);
        let start_mask = Tensor::vector(
            (0..k).map(|j| if allowed(None, j) { 0.0 } else { f64::NEG_INFINITY }).collect(),
        );
        let mut trans_mask = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..k {
                if !allowed(Some(i), j) {
                    trans_mask.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        Self {
            n_tags: k,
            start,
            trans,
            stop,
            tags,
            start_mask,
            trans_mask,
        }
    }

    /// `[n, K]` emission scores `h_i · t_y`.
    pub fn emissions(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let t = f.p(self.tags);
        f.g.matmul_t(h, t)
    }

    pub fn scores(&self, store: &ParamStore) -> CrfScores {
        CrfScores::masked(
            store.value(self.start).data().to_vec(),
            store.value(self.trans).clone(),
            store.value(self.stop).data().to_vec(),
        )
    }

    /// `log Z − S(y)`, differentiable in the emissions and every CRF parameter.
    pub fn nll(&self, f: &mut Forward, emissions: Var, y: &[usize]) -> Result<Var> {
        let k = self.n_tags;
        let n = f.g.value(emissions).rows();
        if y.len() != n || n == 0 {
            return Err(Error::LengthMismatch {
                what: "tag sequence",
                got: y.len(),
                expected: n,
            });
        }
        if y.iter().any(|&t| t >= k) || !is_valid(y) {
            return Err(Error::InvalidConfig("reference tags violate the BIO constraints".into()));
        }
        let start = f.p(self.start);
        let trans = f.p(self.trans);
        let stop = f.p(self.stop);

        // S(y) through count tensors so masked entries never enter the product
        let mut e_hot = Tensor::zeros(&[n, k]);
        let mut t_cnt = Tensor::zeros(&[k, k]);
        for (t, &tag) in y.iter().enumerate() {
            e_hot.set(t, tag, 1.0);
            if t > 0 {
                let c = t_cnt.at(y[t - 1], tag);
                t_cnt.set(y[t - 1], tag, c + 1.0);
            }
        }
        let e_hot = f.g.constant(e_hot);
        let t_cnt = f.g.constant(t_cnt);
        let em = f.g.mul(emissions, e_hot)?;
        let em = f.g.sum(em);
        let tr = f.g.mul(trans, t_cnt)?;
        let tr = f.g.sum(tr);
        let s0 = f.g.pick(start, y[0])?;
        let s1 = f.g.pick(stop, y[n - 1])?;
        let gold = f.g.add_n(&[em, tr, s0, s1])?;

        let sm = f.g.constant(self.start_mask.clone());
        let tm = f.g.constant(self.trans_mask.clone());
        let start_eff = f.g.add(start, sm)?;
        let trans_eff = f.g.add(trans, tm)?;
        let e0 = f.g.row(emissions, 0)?;
        let mut alpha = f.g.add(start_eff, e0)?;
        for t in 1..n {
            let et = f.g.row(emissions, t)?;
            let a = f.g.lse_transition(alpha, trans_eff)?;
            alpha = f.g.add(a, et)?;
        }
        let fin = f.g.add(alpha, stop)?;
        let log_z = f.g.log_sum_exp(fin)?;
        let neg = f.g.scale(gold, -1.0);
        f.g.add(log_z, neg)
    }

    pub fn decode(&self, store: &ParamStore, emissions: &Tensor) -> Result<Vec<usize>> {
        self.scores(store).viterbi(emissions)
    }
}
