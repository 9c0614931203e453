//! Token embedding with optional knowledge-graph fusion, a bidirectional LSTM,
//! and the feed-forward head whose output (plus POS and KG-type features) feeds
//! every downstream layer.

mod kg;
mod pretrain;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedConversation, Corpus, MAX_POS_TAGS, POS_TAG_COUNT as DEFAULT_POS_TAGS};
use crate::error::{Error, Result};
use crate::numerics::{Forward, ParamId, ParamStore, Tensor, Var};

pub use kg::{KgNode, KnowledgeGraph, KG_FORMAT_VERSION};
pub use pretrain::{pretrain_next_turn, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub cell: usize,
    pub layers: usize,
    pub ff: Vec<usize>,
    pub dropout: f64,
    /// Probability of replacing a token by the OOV id during training, which trains the OOV row.
    pub word_dropout: f64,
    /// Size of the POS one-hot block.
    pub pos_tags: usize,
    pub use_kg: bool,
    pub use_pos: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            word_dim: 32,
            cell: 64,
            layers: 1,
            ff: vec![64, 48],
            dropout: 0.2,
            word_dropout: 0.05,
            pos_tags: DEFAULT_POS_TAGS,
            use_kg: true,
            use_pos: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            word_dim: 256,
            cell: 1024,
            layers: 1,
            ff: vec![512, 256],
            dropout: 0.4,
            word_dropout: 0.05,
            pos_tags: 47,
            use_kg: true,
            use_pos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.word_dim == 0 || self.cell == 0 || self.layers == 0 {
            return bad("dimensions and layer count must be positive");
        }
        if self.pos_tags == 0 || self.pos_tags > MAX_POS_TAGS {
            return bad("pos_tags out of range");
        }
        if self.ff.is_empty() || self.ff.contains(&0) {
            return bad("feed-forward widths must be non-empty and positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.word_dropout) {
            return bad("dropout rates must lie in [0,1)");
        }
        Ok(())
    }
}

/// Lowercased word → id. Id 0 is the out-of-vocabulary row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: BTreeMap<String, usize>,
}

pub const OOV: usize = 0;

impl Vocab {
    pub fn build(corpus: &Corpus, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in &corpus.conversations {
            for w in c.words() {
                *counts.entry(w).or_default() += 1;
            }
        }
        Self::from_words(counts.into_iter().filter(|(_, n)| *n >= min_count).map(|(w, _)| w))
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut map = BTreeMap::new();
        for w in words {
            let next = map.len() + 1;
            map.entry(w.to_lowercase()).or_insert(next);
        }
        Self { words: map }
    }

    /// Rows of the embedding table, including the OOV row.
    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.get(&word.to_lowercase()).copied().unwrap_or(OOV)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains_key(&word.to_lowercase())
    }
}

/// Per-token input features extracted from a conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub word_ids: Vec<usize>,
    pub pos: Vec<Option<u8>>,
    pub kg: Vec<Option<u32>>,
}

impl TokenFeatures {
    pub fn of(conv: &AnnotatedConversation, vocab: &Vocab) -> Self {
        let toks: Vec<_> = conv.tokens().collect();
        Self {
            word_ids: toks.iter().map(|t| vocab.id(&t.text)).collect(),
            pos: toks.iter().map(|t| t.pos).collect(),
            kg: toks.iter().map(|t| t.kg).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

struct LstmDir {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

struct Dense {
    w: ParamId,
    b: ParamId,
}

pub struct Encoder {
    pub config: EncoderConfig,
    kg_dim: usize,
    kg_types: usize,
    /// Frozen node embeddings with a leading zero row (row 0 stands for "no node").
    kg_table: Tensor,
    kg_type_table: Tensor,
    emb: ParamId,
    kg_unk: Option<ParamId>,
    lstm: Vec<[LstmDir; 2]>,
    ff: Vec<Dense>,
}

/// Encoder output for one conversation.
pub struct Encoded {
    /// `[n, out_dim]` token representations.
    pub h: Var,
    /// `[n, word_dim]` word embeddings before dropout.
    pub words: Var,
    pub n: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        config: EncoderConfig,
        vocab_size: usize,
        kg: &KnowledgeGraph,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        kg.validate()?;
        let d = config.word_dim;
        let emb = store.add_uniform("enc.emb", &[vocab_size, d], d, rng);
        let kg_unk = config
            .use_kg
            .then(|| store.add_uniform("enc.kg_unk", &[1, kg.dim], kg.dim, rng));
        let mut input = d + if config.use_kg { kg.dim } else { 0 };
        let h = config.cell;
        let mut lstm = Vec::new();
        for l in 0..config.layers {
            let mut dir = |name: &str| {
                let wx = store.add_uniform(format!("enc.lstm{l}.{name}.wx"), &[4 * h, input], input, rng);
                let wh = store.add_uniform(format!("enc.lstm{l}.{name}.wh"), &[4 * h, h], h, rng);
                let mut bias = vec![0.0; 4 * h];
                bias[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                let b = store.add(format!("enc.lstm{l}.{name}.b"), Tensor::vector(bias));
                LstmDir { wx, wh, b }
            };
            lstm.push([dir("fw"), dir("bw")]);
            input = 2 * h;
        }
        let mut ff = Vec::new();
        for (i, &w) in config.ff.iter().enumerate() {
            ff.push(Dense {
                w: store.add_uniform(format!("enc.ff{i}.w"), &[w, input], input, rng),
                b: store.add_zeros(format!("enc.ff{i}.b"), &[w]),
            });
            input = w;
        }
        let mut kg_rows = vec![0.0; (kg.len() + 1) * kg.dim];
        let mut type_rows = vec![0.0; (kg.len() + 1) * kg.n_types()];
        for n in &kg.nodes {
            let r = n.node_id as usize + 1;
            kg_rows[r * kg.dim..(r + 1) * kg.dim].copy_from_slice(&n.embedding);
            for &t in &n.type_ids {
                type_rows[r * kg.n_types() + t] = 1.0;
            }
        }
        Ok(Self {
            kg_dim: kg.dim,
            kg_types: kg.n_types(),
            kg_table: Tensor::matrix(kg.len() + 1, kg.dim, kg_rows)?,
            kg_type_table: Tensor::matrix(kg.len() + 1, kg.n_types(), type_rows)?,
            config,
            emb,
            kg_unk,
            lstm,
            ff,
        })
    }

    /// Width of the per-token input to the LSTM.
    pub fn input_dim(&self) -> usize {
        self.config.word_dim + if self.config.use_kg { self.kg_dim } else { 0 }
    }

    /// Width of the per-token representation handed to downstream layers.
    pub fn out_dim(&self) -> usize {
        self.config.ff.last().copied().unwrap_or(2 * self.config.cell)
            + if self.config.use_pos { self.config.pos_tags } else { 0 }
            + if self.config.use_kg { self.kg_types } else { 0 }
    }

    pub fn emb_param(&self) -> ParamId {
        self.emb
    }

    /// Word-embedding rows for `ids`, as fed to the LSTM (without dropout).
    pub fn word_rows(&self, f: &mut Forward, ids: &[usize]) -> Result<Var> {
        let e = f.p(self.emb);
        f.g.gather(e, ids)
    }

    /// Input vectors: word embedding, concatenated with the KG node embedding (or the UNK vector).
    pub fn embed(&self, f: &mut Forward, feats: &TokenFeatures) -> Result<(Var, Var)> {
        if feats.is_empty() {
            return Err(Error::EmptyInput("encoder input"));
        }
        let mut ids = feats.word_ids.clone();
        let wd = self.config.word_dropout;
        if wd > 0.0 {
            if let Some(rng) = f.rng() {
                for id in ids.iter_mut() {
                    if rng.random::<f64>() < wd {
                        *id = OOV;
                    }
                }
            }
        }
        let words = self.word_rows(f, &ids)?;
        let Some(unk) = self.kg_unk else {
            return Ok((words, words));
        };
        let rows: Vec<usize> = feats.kg.iter().map(|k| k.map_or(0, |k| k as usize + 1)).collect();
        if let Some(bad) = rows.iter().find(|&&r| r >= self.kg_table.rows()) {
            return Err(Error::InvalidConfig(format!("token maps to unknown KG node {}", bad - 1)));
        }
        let table = f.g.constant(self.kg_table.clone());
        let nodes = f.g.gather(table, &rows)?;
        let mask: Vec<f64> = rows.iter().map(|&r| if r == 0 { 1.0 } else { 0.0 }).collect();
        let mask = f.g.constant(Tensor::matrix(rows.len(), 1, mask)?);
        let unk = f.p(unk);
        let unk_rows = f.g.matmul(mask, unk)?;
        let kgv = f.g.add(nodes, unk_rows)?;
        let x = f.g.concat_cols(&[words, kgv])?;
        Ok((x, words))
    }

    fn run_dir(&self, f: &mut Forward, x: Var, n: usize, dir: &LstmDir, reverse: bool) -> Result<Vec<Var>> {
        let h = self.config.cell;
        let wx = f.p(dir.wx);
        let wh = f.p(dir.wh);
        let b = f.p(dir.b);
        let xw = f.g.matmul_t(x, wx)?;
        let xw = f.g.add_bias(xw, b)?;
        let mut out = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = f.g.row(xw, t)?;
            let gates = match state {
                Some((hp, _)) => {
                    let r = f.g.matvec(wh, hp)?;
                    f.g.add(xt, r)?
                }
                None => xt,
            };
            let sg = f.g.sigmoid(gates);
            let i = f.g.slice(sg, 0, h)?;
            let fg = f.g.slice(sg, h, h)?;
            let o = f.g.slice(sg, 3 * h, h)?;
            let gpre = f.g.slice(gates, 2 * h, h)?;
            let gc = f.g.tanh(gpre);
            let ig = f.g.mul(i, gc)?;
            let c = match state {
                Some((_, cp)) => {
                    let fc = f.g.mul(fg, cp)?;
                    f.g.add(fc, ig)?
                }
                None => ig,
            };
            let tc = f.g.tanh(c);
            let hn = f.g.mul(o, tc)?;
            out[t] = Some(hn);
            state = Some((hn, c));
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }

    /// `[n, 2·cell]` bidirectional states of the last layer.
    pub fn bilstm(&self, f: &mut Forward, x: Var, n: usize) -> Result<Var> {
        let mut input = x;
        for layer in &self.lstm {
            let fw = self.run_dir(f, input, n, &layer[0], false)?;
            let bw = self.run_dir(f, input, n, &layer[1], true)?;
            let fw = f.g.stack_rows(&fw)?;
            let bw = f.g.stack_rows(&bw)?;
            input = f.g.concat_cols(&[fw, bw])?;
        }
        Ok(input)
    }

    /// Feed-forward head without the fused features.
    fn mlp(&self, f: &mut Forward, mut h: Var) -> Result<Var> {
        for d in &self.ff {
            let w = f.p(d.w);
            let b = f.p(d.b);
            let z = f.g.matmul_t(h, w)?;
            let z = f.g.add_bias(z, b)?;
            h = f.g.tanh(z);
        }
        Ok(h)
    }

    /// MLP output before feature fusion, `[n, ff.last]`.
    pub fn core(&self, f: &mut Forward, feats: &TokenFeatures) -> Result<(Var, Var)> {
        let (x, words) = self.embed(f, feats)?;
        let x = f.dropout(x);
        let hp = self.bilstm(f, x, feats.len())?;
        let hp = f.dropout(hp);
        let h = self.mlp(f, hp)?;
        Ok((h, words))
    }

    pub fn encode(&self, f: &mut Forward, feats: &TokenFeatures) -> Result<Encoded> {
        let n = feats.len();
        let (h, words) = self.core(f, feats)?;
        let h = f.dropout(h);
        let mut parts = vec![h];
        if self.config.use_pos {
            let k = self.config.pos_tags;
            let mut pos = vec![0.0; n * k];
            for (i, p) in feats.pos.iter().enumerate() {
                if let Some(p) = *p {
                    if p as usize >= k {
                        return Err(Error::InvalidConfig(format!("pos tag {p} outside the {k}-tag inventory")));
                    }
                    pos[i * k + p as usize] = 1.0;
                }
            }
            parts.push(f.g.constant(Tensor::matrix(n, k, pos)?));
        }
        if self.config.use_kg {
            let rows: Vec<usize> = feats.kg.iter().map(|k| k.map_or(0, |k| k as usize + 1)).collect();
            let table = f.g.constant(self.kg_type_table.clone());
            parts.push(f.g.gather(table, &rows)?);
        }
        let h = if parts.len() == 1 { h } else { f.g.concat_cols(&parts)? };
        Ok(Encoded { h, words, n })
    }
}

#[cfg(test)]
mod tests;
