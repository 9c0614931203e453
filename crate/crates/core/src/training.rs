//! Joint optimization of span, attribute and relation losses with scheduled
//! sampling of gold versus decoded spans.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{heads, AnnotatedConversation, Corpus, SpanKind, Task};
use crate::encoder::{pretrain_next_turn, KnowledgeGraph, PretrainConfig, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{span_words, ModelConfig, RsatModel};
use crate::numerics::{argmax, Adam, AdamConfig, Forward, ParamStore, Var};
use crate::relation_memory::{nearest_entry, EntityValue, MemoryEntry, RelationLayer, ValueEmbedding};
use crate::span_crf::{spans_to_tags, Span};

/// Probability of feeding gold spans downstream, decaying linearly to `p_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub p_start: f64,
    pub p_end: f64,
    /// Epochs over which `p` decays; half the epoch budget when absent.
    pub decay_epochs: Option<usize>,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            p_start: 1.0,
            p_end: 0.0,
            decay_epochs: None,
        }
    }
}

impl Curriculum {
    pub fn p_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let decay = self.decay_epochs.unwrap_or(total_epochs / 2);
        if decay == 0 || epoch >= decay {
            return self.p_end;
        }
        let t = epoch as f64 / decay as f64;
        self.p_start + (self.p_end - self.p_start) * t
    }
}

/// One Bernoulli(`p`) draw: gold spans with probability `p`, otherwise the predicted ones.
pub fn curriculum_sample<'a, R: Rng>(p: f64, gold: &'a [Span], predicted: &'a [Span], rng: &mut R) -> (bool, &'a [Span]) {
    if rng.random::<f64>() < p {
        (true, gold)
    } else {
        (false, predicted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the span CRF loss.
    pub alpha: f64,
    pub lr: f64,
    pub l2: f64,
    /// Std of the Gaussian parameter noise.
    pub noise_std: f64,
    pub epochs: usize,
    pub curriculum: Curriculum,
    pub seed: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    /// Conversations per optimizer step.
    pub accumulate: usize,
    pub clip_norm: Option<f64>,
    /// Next-turn pretraining epochs for the encoder (0 disables).
    pub pretrain_epochs: usize,
    pub min_count: usize,
    /// Threads used for dev evaluation.
    pub workers: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            alpha: 0.1,
            lr: 3e-3,
            l2: 0.0,
            noise_std: 0.0,
            epochs: 20,
            curriculum: Curriculum::default(),
            seed: 0,
            patience: 5,
            accumulate: 1,
            clip_norm: Some(5.0),
            pretrain_epochs: 0,
            min_count: 1,
            workers: 1,
        }
    }

    pub fn paper() -> Self {
        Self {
            alpha: 0.01,
            lr: 1e-2,
            l2: 1e-4,
            noise_std: 1e-3,
            epochs: 30,
            clip_norm: None,
            pretrain_epochs: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("training: {m}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 || self.noise_std < 0.0 {
            return bad("lr must be positive and l2, noise_std non-negative");
        }
        let c = self.curriculum;
        if !(0.0..=1.0).contains(&c.p_start) || !(0.0..=1.0).contains(&c.p_end) {
            return bad("curriculum probabilities must lie in [0,1]");
        }
        if self.epochs == 0 || self.accumulate == 0 {
            return bad("epochs and accumulate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Unweighted span CRF negative log-likelihood.
    pub crf: f64,
    pub attributes: f64,
    pub relations: f64,
    /// `alpha·crf + attributes + relations`.
    pub total: f64,
}

fn nll_from_logits(f: &mut Forward, z: Var, target: usize) -> Result<Var> {
    let lp = f.g.log_softmax(z)?;
    let p = f.g.pick(lp, target)?;
    Ok(f.g.scale(p, -1.0))
}

fn sum_terms(f: &mut Forward, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        Ok(None)
    } else {
        f.g.add_n(terms).map(Some)
    }
}

/// Builds the joint loss of one conversation in `f`. With `use_gold` the downstream
/// layers see annotated spans and labels; otherwise the Viterbi spans and predicted labels,
/// where only spans matching an annotation exactly receive attribute and relation targets.
pub fn joint_loss(model: &RsatModel, f: &mut Forward, conv: &AnnotatedConversation, use_gold: bool, alpha: f64) -> Result<(Var, LossTerms)> {
    let feats = model.features(conv);
    let words = conv.words();
    let pass = model.pass(f, &feats)?;
    let gold: Vec<Span> = conv.spans.iter().map(|s| Span::new(s.start, s.end, s.kind)).collect();
    let tags = spans_to_tags(feats.len(), &gold)?;
    let crf = model.crf().nll(f, pass.emissions, &tags)?;
    let predicted;
    let selected: &[Span] = if use_gold {
        &gold
    } else {
        predicted = model.decode_spans(f, &pass)?;
        &predicted
    };
    let by_extent: HashMap<Span, usize> = gold.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let linked = conv.linked_entity();
    let task = model.task();
    let gold_value = |g: usize| -> Option<EntityValue> {
        match task {
            Task::Sx => conv.spans[g].attr(heads::SYM_TYPE).map(EntityValue::Class),
            Task::Rx => Some(EntityValue::Text(span_words(&words, &gold[g]))),
        }
    };

    let mut attr_terms = Vec::new();
    let mut rel_terms = Vec::new();
    let mut pooled = Vec::with_capacity(selected.len());
    let mut mentions = Vec::new();
    let mut entries = Vec::new();
    let mut props = Vec::new();
    for s in selected {
        let x = model.pooled(f, &pass, s)?;
        pooled.push(x);
        let g = by_extent.get(s).copied();
        let mut sym_pred = None;
        for head in model.heads_for(s.kind) {
            if head.name == "cross" {
                continue;
            }
            let z = head.logits(f, x)?;
            if head.name == heads::SYM_TYPE {
                sym_pred = argmax(f.g.value(z).data());
            }
            if let Some(t) = g.and_then(|g| conv.spans[g].attr(&head.name)) {
                attr_terms.push(nll_from_logits(f, z, t)?);
            }
        }
        match s.kind {
            SpanKind::Entity => {
                let class = if use_gold { g.and_then(|g| conv.spans[g].attr(heads::SYM_TYPE)) } else { sym_pred };
                let (v, e) = match task {
                    Task::Sx => {
                        let c = class.ok_or_else(|| Error::InvalidConfig("symptom entity without a class".into()))?;
                        (EntityValue::Class(c), ValueEmbedding::Label(c))
                    }
                    Task::Rx => (EntityValue::Text(span_words(&words, s)), ValueEmbedding::Words),
                };
                if let Some(gv) = g.and_then(gold_value) {
                    entries.push(MemoryEntry {
                        index: mentions.len(),
                        span: *s,
                        value: gv,
                    });
                }
                mentions.push((*s, v, e));
            }
            SpanKind::Property => props.push((*s, g, x)),
        }
    }

    if let Some(rel) = model.relation() {
        let targets: Vec<Option<usize>> = props
            .iter()
            .map(|(s, g, _)| {
                let ge = (*g).and_then(|g| linked[g])?;
                nearest_entry(&entries, s, &gold_value(ge)?)
            })
            .collect();
        if targets.iter().any(Option::is_some) {
            let buffer = rel.build_buffer(f, pass.enc.h, pass.enc.words, &mentions)?;
            let spans: Vec<Span> = props.iter().map(|p| p.0).collect();
            let y = rel.property_reprs(f, pass.enc.h, pass.enc.words, &spans)?;
            let sc = rel.scores(f, y, &buffer)?.expect("a target implies a non-empty buffer");
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    rel_terms.push(RelationLayer::nll(f, sc, r, t)?);
                }
            }
        }
    } else if let Some(cross) = model.cross() {
        let np = model.n_prop();
        for (_, g, x) in &props {
            let Some(g) = *g else { continue };
            let (Some(ge), Some(pt)) = (linked[g], conv.spans[g].attr(heads::PROP_TYPE)) else {
                continue;
            };
            let Some(sym) = conv.spans[ge].attr(heads::SYM_TYPE) else {
                continue;
            };
            let z = cross.logits(f, *x)?;
            rel_terms.push(nll_from_logits(f, z, sym * np + pt)?);
        }
    }

    let attr = sum_terms(f, &attr_terms)?;
    let rel = sum_terms(f, &rel_terms)?;
    let mut parts = vec![f.g.scale(crf, alpha)];
    parts.extend(attr);
    parts.extend(rel);
    let total = f.g.add_n(&parts)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| f.g.scalar(v));
    let terms = LossTerms {
        crf: f.g.scalar(crf),
        attributes: val(attr),
        relations: val(rel),
        total: f.g.scalar(total),
    };
    Ok((total, terms))
}

/// Loss of one conversation in evaluation mode, with the L2 penalty.
pub fn conversation_loss(model: &RsatModel, conv: &AnnotatedConversation, use_gold: bool, cfg: &TrainConfig) -> Result<LossTerms> {
    let mut f = Forward::eval(&model.store);
    let (_, mut t) = joint_loss(model, &mut f, conv, use_gold, cfg.alpha)?;
    t.total += model.store.l2_value(cfg.l2);
    Ok(t)
}

/// Accumulates the gradient of the joint loss (plus L2) into `model.store` and returns its value.
pub fn accumulate_gradient(model: &mut RsatModel, conv: &AnnotatedConversation, use_gold: bool, cfg: &TrainConfig, step_seed: Option<u64>) -> Result<f64> {
    let graph = {
        let mut f = match step_seed {
            Some(seed) => Forward::train(&model.store, model.config.encoder.dropout, cfg.noise_std, seed),
            None => Forward::eval(&model.store),
        };
        let (root, _) = joint_loss(model, &mut f, conv, use_gold, cfg.alpha)?;
        f.backward(root)
    };
    let (loss, g) = graph;
    g.accumulate_into(&mut model.store);
    Ok(loss + model.store.apply_l2(cfg.l2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: BTreeMap<String, f64>,
    pub p: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

/// Trains a model on `train`, keeping the parameters with the best dev headline F1.
pub fn train(train: &Corpus, dev: &Corpus, kg: &KnowledgeGraph, model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<(RsatModel, TrainReport)> {
    train_with_log(train, dev, kg, model_cfg, cfg, |_| {})
}

pub fn train_with_log(
    train: &Corpus,
    dev: &Corpus,
    kg: &KnowledgeGraph,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(RsatModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if dev.ontology != train.ontology {
        return Err(Error::InvalidConfig("train and dev ontologies differ".into()));
    }
    let vocab = Vocab::build(train, cfg.min_count);
    let mut model = RsatModel::new(model_cfg, train.ontology.clone(), vocab, kg.clone(), cfg.seed)?;
    if cfg.pretrain_epochs > 0 {
        let pc = PretrainConfig {
            epochs: cfg.pretrain_epochs,
            lr: cfg.lr,
            seed: cfg.seed,
        };
        let (pre, _) = pretrain_next_turn(train, &model.vocab, kg, &model.config.encoder, &pc)?;
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
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    model.store.zero_grad();
    for epoch in 0..cfg.epochs {
        let p = cfg.curriculum.p_at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (j, &ci) in order.iter().enumerate() {
            let use_gold = rng.random::<f64>() < p;
            let seed = rng.random::<u64>();
            total += accumulate_gradient(&mut model, &train.conversations[ci], use_gold, cfg, Some(seed))?;
            if (j + 1) % cfg.accumulate == 0 || j + 1 == order.len() {
                adam.step(&mut model.store);
                model.store.zero_grad();
            }
        }
        let report = evaluate(&model, dev, cfg.workers)?;
        let dev_f1: BTreeMap<String, f64> = report.scores.iter().map(|(k, s)| (k.clone(), s.prf.f1)).collect();
        let entry = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            dev_f1,
            p,
        };
        on_epoch(&entry);
        log.push(entry);
        let f1 = report.headline_f1();
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_dev_f1, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    model.store.zero_grad();
    Ok((
        model,
        TrainReport {
            log,
            best_epoch,
            best_dev_f1,
        },
    ))
}
