//! Flat symptom tagger over the cross product of entity classes with status and
//! property classes, decoded per token without a CRF.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{heads, AnnotatedConversation, Corpus, SpanKind, Task, TaskOntology};
use crate::encoder::{pretrain_next_turn, Encoder, EncoderConfig, KnowledgeGraph, PretrainConfig, TokenFeatures, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{gold_tuples, Counts, ExtractedTuple, Field, Prf, SX_PROPERTY, SX_STATUS};
use crate::numerics::{argmax, Adam, AdamConfig, Forward, ParamId, ParamStore, Var};
use crate::training::TrainConfig;

/// A label of the cross-product space other than O.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pair {
    Entity { sym: usize, status: usize },
    Property { sym: usize, prop: usize },
}

/// BIO labels over `{symType × symStatus} ∪ {symType × propType}` plus O (tag 0).
/// Pair `j` owns tags `2j+1` (B) and `2j+2` (I).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossProductTagSet {
    pub n_entity: usize,
    pub n_status: usize,
    pub n_prop: usize,
}

impl CrossProductTagSet {
    pub fn new(ontology: &TaskOntology) -> Result<Self> {
        if ontology.task != Task::Sx {
            return Err(Error::InvalidConfig("the cross-product baseline covers the symptom task only".into()));
        }
        Ok(Self {
            n_entity: ontology.entity_classes.len(),
            n_status: ontology.status_classes.len(),
            n_prop: ontology.prop_classes.len(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.n_entity * (self.n_status + self.n_prop)
    }

    pub fn len(&self) -> usize {
        2 * self.pairs() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pair_index(&self, pair: Pair) -> usize {
        match pair {
            Pair::Entity { sym, status } => sym * self.n_status + status,
            Pair::Property { sym, prop } => self.n_entity * self.n_status + sym * self.n_prop + prop,
        }
    }

    pub fn tag(&self, pair: Pair, begin: bool) -> usize {
        2 * self.pair_index(pair) + if begin { 1 } else { 2 }
    }

    /// Pair and B flag of a tag; `None` for O or out-of-range tags.
    pub fn decode_tag(&self, tag: usize) -> Option<(Pair, bool)> {
        if tag == 0 || tag >= self.len() {
            return None;
        }
        let j = (tag - 1) / 2;
        let begin = (tag - 1) % 2 == 0;
        let ent = self.n_entity * self.n_status;
        let pair = if j < ent {
            Pair::Entity {
                sym: j / self.n_status,
                status: j % self.n_status,
            }
        } else {
            let k = j - ent;
            Pair::Property {
                sym: k / self.n_prop,
                prop: k % self.n_prop,
            }
        };
        Some((pair, begin))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Property spans left as O because they have no related entity.
    pub unlinked_properties: usize,
}

/// Cross-product tags of an annotated conversation.
pub fn encode_cross_product(conv: &AnnotatedConversation, set: &CrossProductTagSet) -> Result<(Vec<usize>, EncodeStats)> {
    let mut tags = vec![0; conv.len()];
    let mut stats = EncodeStats::default();
    let linked = conv.linked_entity();
    let missing = |what: &str| Error::invalid_conv(&conv.id, format!("span lacks {what}"));
    for (i, s) in conv.spans.iter().enumerate() {
        let pair = match s.kind {
            SpanKind::Entity => Pair::Entity {
                sym: s.attr(heads::SYM_TYPE).ok_or_else(|| missing(heads::SYM_TYPE))?,
                status: s.attr(heads::SYM_STATUS).ok_or_else(|| missing(heads::SYM_STATUS))?,
            },
            SpanKind::Property => {
                let Some(e) = linked[i] else {
                    stats.unlinked_properties += 1;
                    continue;
                };
                Pair::Property {
                    sym: conv.spans[e].attr(heads::SYM_TYPE).ok_or_else(|| missing(heads::SYM_TYPE))?,
                    prop: s.attr(heads::PROP_TYPE).ok_or_else(|| missing(heads::PROP_TYPE))?,
                }
            }
        };
        for (k, t) in tags[s.start..s.end].iter_mut().enumerate() {
            *t = set.tag(pair, k == 0);
        }
    }
    Ok((tags, stats))
}

/// Tuples read off maximal runs of one pair; an I without a matching predecessor opens a run.
pub fn decode_cross_product(tags: &[usize], words: &[String], set: &CrossProductTagSet) -> BTreeMap<String, Vec<ExtractedTuple>> {
    let mut runs: Vec<(Pair, usize, usize)> = Vec::new();
    let mut open: Option<(Pair, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let cur = set.decode_tag(t);
        match (open, cur) {
            (Some((p, _)), Some((q, false))) if p == q => {}
            _ => {
                if let Some((p, s)) = open.take() {
                    runs.push((p, s, i));
                }
                open = cur.map(|(q, _)| (q, i));
            }
        }
    }
    if let Some((p, s)) = open {
        runs.push((p, s, tags.len()));
    }
    let mut out: BTreeMap<String, Vec<ExtractedTuple>> = [(SX_PROPERTY.to_string(), vec![]), (SX_STATUS.to_string(), vec![])].into();
    for (p, s, e) in runs {
        match p {
            Pair::Entity { sym, status } => out
                .get_mut(SX_STATUS)
                .expect("key present")
                .push(ExtractedTuple([Field::Class(sym), Field::Class(status), Field::Tokens(vec![])])),
            Pair::Property { sym, prop } => out.get_mut(SX_PROPERTY).expect("key present").push(ExtractedTuple([
                Field::Class(sym),
                Field::Class(prop),
                Field::Tokens(words[s..e].iter().map(|w| w.to_lowercase()).collect()),
            ])),
        }
    }
    out
}

/// Shared encoder followed by a per-token softmax over the cross-product labels.
pub struct BaselineModel {
    pub tagset: CrossProductTagSet,
    pub ontology: TaskOntology,
    pub vocab: Vocab,
    pub store: ParamStore,
    encoder: Encoder,
    w: ParamId,
    b: ParamId,
}

impl BaselineModel {
    pub fn new(encoder: EncoderConfig, ontology: TaskOntology, vocab: Vocab, kg: &KnowledgeGraph, seed: u64) -> Result<Self> {
        let tagset = CrossProductTagSet::new(&ontology)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(encoder, vocab.size(), kg, &mut store, &mut rng)?;
        let d = encoder.out_dim();
        let w = store.add_uniform("base.w", &[tagset.len(), d], d, &mut rng);
        let b = store.add_zeros("base.b", &[tagset.len()]);
        Ok(Self {
            tagset,
            ontology,
            vocab,
            store,
            encoder,
            w,
            b,
        })
    }

    fn logits(&self, f: &mut Forward, feats: &TokenFeatures) -> Result<Var> {
        let enc = self.encoder.encode(f, feats)?;
        let w = f.p(self.w);
        let b = f.p(self.b);
        let z = f.g.matmul_t(enc.h, w)?;
        f.g.add_bias(z, b)
    }

    /// Summed per-token cross-entropy against the cross-product tags.
    pub fn loss(&self, f: &mut Forward, conv: &AnnotatedConversation) -> Result<Var> {
        let feats = TokenFeatures::of(conv, &self.vocab);
        let (tags, _) = encode_cross_product(conv, &self.tagset)?;
        let z = self.logits(f, &feats)?;
        let mut terms = Vec::with_capacity(tags.len());
        for (i, &t) in tags.iter().enumerate() {
            let r = f.g.row(z, i)?;
            let lp = f.g.log_softmax(r)?;
            terms.push(f.g.pick(lp, t)?);
        }
        let s = f.g.add_n(&terms)?;
        Ok(f.g.scale(s, -1.0))
    }

    pub fn predict_tags(&self, conv: &AnnotatedConversation) -> Result<Vec<usize>> {
        let feats = TokenFeatures::of(conv, &self.vocab);
        let mut f = Forward::eval(&self.store);
        let z = self.logits(&mut f, &feats)?;
        let z = f.g.value(z);
        Ok((0..z.rows()).map(|i| argmax(z.row(i)).expect("non-empty label set")).collect())
    }

    pub fn extract(&self, conv: &AnnotatedConversation) -> Result<BTreeMap<String, Vec<ExtractedTuple>>> {
        Ok(decode_cross_product(&self.predict_tags(conv)?, &conv.words(), &self.tagset))
    }

    /// Micro-averaged scores per tuple kind.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<BTreeMap<String, Prf>> {
        let mut acc: BTreeMap<String, Counts> = BTreeMap::new();
        for conv in &corpus.conversations {
            for (k, preds) in self.extract(conv)? {
                let c = Counts::of(&preds, &gold_tuples(conv, &k));
                let e = acc.entry(k).or_default();
                *e = e.merge(c);
            }
        }
        Ok(acc.into_iter().map(|(k, c)| (k, c.prf())).collect())
    }
}

/// Trains the baseline with the same optimizer, pretraining and stopping rule as the full model.
pub fn baseline_train(train: &Corpus, dev: &Corpus, kg: &KnowledgeGraph, encoder: EncoderConfig, cfg: &TrainConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let vocab = Vocab::build(train, cfg.min_count);
    let mut model = BaselineModel::new(encoder, train.ontology.clone(), vocab, kg, cfg.seed)?;
    if cfg.pretrain_epochs > 0 {
        let pc = PretrainConfig {
            epochs: cfg.pretrain_epochs,
            lr: cfg.lr,
            seed: cfg.seed,
        };
        let (pre, _) = pretrain_next_turn(train, &model.vocab, kg, &model.encoder.config, &pc)?;
        model.store.copy_matching(&pre);
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e_11fe);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (j, &ci) in order.iter().enumerate() {
            let seed = rng.random::<u64>();
            let (_, g) = {
                let mut f = Forward::train(&model.store, model.encoder.config.dropout, cfg.noise_std, seed);
                let l = model.loss(&mut f, &train.conversations[ci])?;
                f.backward(l)
            };
            g.accumulate_into(&mut model.store);
            model.store.apply_l2(cfg.l2);
            if (j + 1) % cfg.accumulate == 0 || j + 1 == order.len() {
                adam.step(&mut model.store);
                model.store.zero_grad();
            }
        }
        let f1 = model.evaluate(dev)?.get(SX_PROPERTY).map_or(0.0, |p| p.f1);
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.store = best.expect("at least one epoch ran").1;
    model.store.zero_grad();
    Ok(model)
}
