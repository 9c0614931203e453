//! Per-conversation memory of entity mentions and bilinear selection of the
//! entity each property span describes.
//!
//! Entry `k` is `m^k = mean(P_s h^s_k, Q_s e^s_k)`; a property is
//! `y^p = mean(P_p h^p, Q_p e^p)`; its score against entry `k` is `y^pᵀ W m^k`.
//! Without context the entry keeps only `Q_s e^s_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Forward, ParamId, ParamStore, Tensor, Var};
use crate::span_crf::Span;

/// Value a memory entry stands for: a closed-set class, or the verbatim (lowercased) mention.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityValue {
    Class(usize),
    Text(Vec<String>),
}

/// Source of `e^s` for one entity mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueEmbedding {
    /// Row of the learned label-embedding table.
    Label(usize),
    /// Mean word embedding over the mention.
    Words,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub index: usize,
    pub span: Span,
    pub value: EntityValue,
}

/// Entries in conversation order, with their `[K, d_mem]` matrix in the graph.
pub struct MemoryBuffer {
    pub entries: Vec<MemoryEntry>,
    pub matrix: Option<Var>,
}

impl MemoryBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct RelationLayer {
    pub d_mem: usize,
    pub use_context: bool,
    ps: Option<ParamId>,
    qs: ParamId,
    pp: ParamId,
    qp: ParamId,
    w: ParamId,
    labels: Option<ParamId>,
}

impl RelationLayer {
    /// `n_labels` is the closed entity label count (0 for open-set entities).
    pub fn new<R: Rng>(
        d_h: usize,
        d_w: usize,
        d_mem: usize,
        n_labels: usize,
        use_context: bool,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let ps = use_context.then(|| store.add_uniform("rel.ps", &[d_mem, d_h], d_h, rng));
        let qs = store.add_uniform("rel.qs", &[d_mem, d_w], d_w, rng);
        let pp = store.add_uniform("rel.pp", &[d_mem, d_h], d_h, rng);
        let qp = store.add_uniform("rel.qp", &[d_mem, d_w], d_w, rng);
        let w = store.add_uniform("rel.w", &[d_mem, d_mem], d_mem, rng);
        let labels = (n_labels > 0).then(|| store.add_uniform("rel.labels", &[n_labels, d_w], d_w, rng));
        Self {
            d_mem,
            use_context,
            ps,
            qs,
            pp,
            qp,
            w,
            labels,
        }
    }

    fn pooled(f: &mut Forward, h: Var, spans: &[Span]) -> Result<Var> {
        let rows = spans
            .iter()
            .map(|s| f.g.mean_rows(h, s.start, s.end))
            .collect::<Result<Vec<_>>>()?;
        f.g.stack_rows(&rows)
    }

    /// Builds the buffer from entity mentions in conversation order.
    pub fn build_buffer(
        &self,
        f: &mut Forward,
        h: Var,
        words: Var,
        mentions: &[(Span, EntityValue, ValueEmbedding)],
    ) -> Result<MemoryBuffer> {
        let entries: Vec<MemoryEntry> = mentions
            .iter()
            .enumerate()
            .map(|(index, (span, value, _))| MemoryEntry {
                index,
                span: *span,
                value: value.clone(),
            })
            .collect();
        if mentions.is_empty() {
            return Ok(MemoryBuffer { entries, matrix: None });
        }
        let spans: Vec<Span> = mentions.iter().map(|m| m.0).collect();
        let word_means = Self::pooled(f, words, &spans)?;
        let mut label_rows = Vec::new();
        for (i, (_, _, e)) in mentions.iter().enumerate() {
            let row = match *e {
                ValueEmbedding::Label(c) => {
                    let table = self
                        .labels
                        .ok_or_else(|| Error::InvalidConfig("label embedding requested for an open-set task".into()))?;
                    let t = f.p(table);
                    let r = f.g.gather(t, &[c])?;
                    f.g.row(r, 0)?
                }
                ValueEmbedding::Words => f.g.row(word_means, i)?,
            };
            label_rows.push(row);
        }
        let es = f.g.stack_rows(&label_rows)?;
        let qs = f.p(self.qs);
        let qe = f.g.matmul_t(es, qs)?;
        let matrix = match self.ps {
            Some(ps) => {
                let hs = Self::pooled(f, h, &spans)?;
                let ps = f.p(ps);
                let ph = f.g.matmul_t(hs, ps)?;
                f.g.mean(&[ph, qe])?
            }
            None => qe,
        };
        Ok(MemoryBuffer {
            entries,
            matrix: Some(matrix),
        })
    }

    /// `[P, d_mem]` property representations.
    pub fn property_reprs(&self, f: &mut Forward, h: Var, words: Var, props: &[Span]) -> Result<Var> {
        let hp = Self::pooled(f, h, props)?;
        let ep = Self::pooled(f, words, props)?;
        let pp = f.p(self.pp);
        let qp = f.p(self.qp);
        let a = f.g.matmul_t(hp, pp)?;
        let b = f.g.matmul_t(ep, qp)?;
        f.g.mean(&[a, b])
    }

    /// `[P, K]` bilinear scores `y^pᵀ W m^k`; `None` when the buffer is empty.
    pub fn scores(&self, f: &mut Forward, props: Var, buffer: &MemoryBuffer) -> Result<Option<Var>> {
        let Some(m) = buffer.matrix else {
            return Ok(None);
        };
        let w = f.p(self.w);
        let yw = f.g.matmul(props, w)?;
        Ok(Some(f.g.matmul_t(yw, m)?))
    }

    /// `−log softmax(scores[p])[gold]`.
    pub fn nll(f: &mut Forward, scores: Var, p: usize, gold: usize) -> Result<Var> {
        let row = f.g.row(scores, p)?;
        let lp = f.g.log_softmax(row)?;
        let v = f.g.pick(lp, gold)?;
        Ok(f.g.scale(v, -1.0))
    }
}

/// Index of the most probable entry; the earliest entry wins ties.
pub fn select_entity(dist: &[f64]) -> Option<usize> {
    argmax(dist)
}

/// Softmax of one score row.
pub fn distribution(scores: &Tensor, p: usize) -> Result<Vec<f64>> {
    crate::numerics::softmax(scores.row(p))
}

/// Token distance between two spans (0 when they touch or overlap).
pub fn span_distance(a: &Span, b: &Span) -> usize {
    if a.end <= b.start {
        b.start - a.end
    } else if b.end <= a.start {
        a.start - b.end
    } else {
        0
    }
}

/// Entry whose value equals `value` and lies nearest to `prop`; earliest on ties.
pub fn nearest_entry(entries: &[MemoryEntry], prop: &Span, value: &EntityValue) -> Option<usize> {
    entries
        .iter()
        .filter(|e| &e.value == value)
        .min_by_key(|e| (span_distance(&e.span, prop), e.index))
        .map(|e| e.index)
}
