//! Tuple extraction and partial-match precision / recall / F1.
//!
//! A tuple has three fields; class fields score by equality and token fields by
//! multiset overlap over the length of the side being scored. Each tuple is aligned
//! with replacement to its best counterpart within the same conversation, and the
//! per-tuple products are micro-averaged over the corpus.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{heads, AnnotatedConversation, Corpus, SpanKind, Task};
use crate::error::{Error, Result};
use crate::model::{span_words, Prediction, RsatModel, SpanSource};
use crate::relation_memory::EntityValue;
use crate::span_crf::Span;

pub const SX_PROPERTY: &str = "sx_property";
pub const SX_STATUS: &str = "sx_status";
pub const RX_PROPERTY: &str = "rx_property";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    Class(usize),
    Tokens(Vec<String>),
}

impl From<EntityValue> for Field {
    fn from(v: EntityValue) -> Self {
        match v {
            EntityValue::Class(c) => Field::Class(c),
            EntityValue::Text(t) => Field::Tokens(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExtractedTuple(pub [Field; 3]);

/// Which side's length normalizes a token overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denominator {
    Predicted,
    Reference,
}

/// Overlap of one field. An empty denominator side scores 1 only against another empty list.
pub fn partial_overlap(pred: &Field, reference: &Field, denom: Denominator) -> f64 {
    match (pred, reference) {
        (Field::Class(a), Field::Class(b)) => f64::from(u8::from(a == b)),
        (Field::Tokens(a), Field::Tokens(b)) => {
            let z = match denom {
                Denominator::Predicted => a.len(),
                Denominator::Reference => b.len(),
            };
            if z == 0 {
                return f64::from(u8::from(a.is_empty() && b.is_empty()));
            }
            let mut counts: HashMap<String, usize> = HashMap::new();
            for t in b {
                *counts.entry(t.to_lowercase()).or_default() += 1;
            }
            let mut inter = 0usize;
            for t in a {
                if let Some(c) = counts.get_mut(&t.to_lowercase()) {
                    if *c > 0 {
                        *c -= 1;
                        inter += 1;
                    }
                }
            }
            inter as f64 / z as f64
        }
        _ => 0.0,
    }
}

pub fn tuple_score(pred: &ExtractedTuple, reference: &ExtractedTuple, denom: Denominator) -> f64 {
    pred.0.iter().zip(&reference.0).map(|(a, b)| partial_overlap(a, b, denom)).product()
}

/// Additive sufficient statistics; merging is associative and order-free up to float rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub precision_mass: f64,
    pub n_pred: usize,
    pub recall_mass: f64,
    pub n_ref: usize,
}

impl Counts {
    /// Scores one conversation's tuples.
    pub fn of(preds: &[ExtractedTuple], refs: &[ExtractedTuple]) -> Self {
        let best = |x: &ExtractedTuple, others: &[ExtractedTuple], flip: bool| {
            others
                .iter()
                .map(|o| {
                    if flip {
                        tuple_score(o, x, Denominator::Reference)
                    } else {
                        tuple_score(x, o, Denominator::Predicted)
                    }
                })
                .fold(0.0, f64::max)
        };
        Self {
            precision_mass: preds.iter().map(|p| best(p, refs, false)).fold(0.0, |a, b| a + b),
            n_pred: preds.len(),
            recall_mass: refs.iter().map(|r| best(r, preds, true)).fold(0.0, |a, b| a + b),
            n_ref: refs.len(),
        }
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            precision_mass: self.precision_mass + o.precision_mass,
            n_pred: self.n_pred + o.n_pred,
            recall_mass: self.recall_mass + o.recall_mass,
            n_ref: self.n_ref + o.n_ref,
        }
    }

    pub fn prf(&self) -> Prf {
        let ratio = |mass: f64, n: usize, other: usize| match (n, other) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => mass / n as f64,
        };
        Prf::new(
            ratio(self.precision_mass, self.n_pred, self.n_ref),
            ratio(self.recall_mass, self.n_ref, self.n_pred),
            *self,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl Prf {
    pub fn new(precision: f64, recall: f64, counts: Counts) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

/// Micro-averaged scores over conversations, each aligned independently.
pub fn precision_recall_f1(preds: &[Vec<ExtractedTuple>], refs: &[Vec<ExtractedTuple>]) -> Result<Prf> {
    if preds.len() != refs.len() {
        return Err(Error::LengthMismatch {
            what: "prediction conversations",
            got: preds.len(),
            expected: refs.len(),
        });
    }
    Ok(preds
        .iter()
        .zip(refs)
        .map(|(p, r)| Counts::of(p, r))
        .fold(Counts::default(), Counts::merge)
        .prf())
}

/// Tuple kinds reported for `task`; the first is the headline.
pub fn report_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Sx => &[SX_PROPERTY, SX_STATUS],
        Task::Rx => &[RX_PROPERTY],
    }
}

fn words_field(words: &[String], span: &Span) -> Field {
    Field::Tokens(span_words(words, span))
}

/// Annotated tuples of one kind.
pub fn gold_tuples(conv: &AnnotatedConversation, kind: &str) -> Vec<ExtractedTuple> {
    let words = conv.words();
    let sp = |i: usize| {
        let s = &conv.spans[i];
        Span::new(s.start, s.end, s.kind)
    };
    match kind {
        SX_PROPERTY | RX_PROPERTY => conv
            .relations
            .iter()
            .filter_map(|r| {
                let e = &conv.spans[r.entity];
                let p = &conv.spans[r.property];
                let first = match conv.task {
                    Task::Sx => Field::Class(e.attr(heads::SYM_TYPE)?),
                    Task::Rx => words_field(&words, &sp(r.entity)),
                };
                Some(ExtractedTuple([first, Field::Class(p.attr(heads::PROP_TYPE)?), words_field(&words, &sp(r.property))]))
            })
            .collect(),
        SX_STATUS => conv
            .spans
            .iter()
            .filter(|s| s.kind == SpanKind::Entity)
            .filter_map(|s| {
                Some(ExtractedTuple([
                    Field::Class(s.attr(heads::SYM_TYPE)?),
                    Field::Class(s.attr(heads::SYM_STATUS)?),
                    Field::Tokens(vec![]),
                ]))
            })
            .collect(),
        _ => vec![],
    }
}

/// Tuples of one kind read off a prediction.
pub fn predicted_tuples(conv: &AnnotatedConversation, pred: &Prediction, kind: &str) -> Vec<ExtractedTuple> {
    let words = conv.words();
    match kind {
        SX_PROPERTY | RX_PROPERTY => pred
            .spans
            .iter()
            .filter(|s| s.span.kind == SpanKind::Property)
            .filter_map(|s| {
                let v = s.value.clone()?;
                let t = *s.attributes.get(heads::PROP_TYPE)?;
                Some(ExtractedTuple([v.into(), Field::Class(t), words_field(&words, &s.span)]))
            })
            .collect(),
        SX_STATUS => pred
            .spans
            .iter()
            .filter(|s| s.span.kind == SpanKind::Entity)
            .filter_map(|s| {
                Some(ExtractedTuple([
                    Field::Class(*s.attributes.get(heads::SYM_TYPE)?),
                    Field::Class(*s.attributes.get(heads::SYM_STATUS)?),
                    Field::Tokens(vec![]),
                ]))
            })
            .collect(),
        _ => vec![],
    }
}

/// Full-pipeline tuples of every kind for `task`.
pub fn extract_tuples(model: &RsatModel, conv: &AnnotatedConversation) -> Result<BTreeMap<String, Vec<ExtractedTuple>>> {
    let pred = model.predict(conv, SpanSource::Decoded)?;
    Ok(report_names(model.task())
        .iter()
        .map(|k| (k.to_string(), predicted_tuples(conv, &pred, k)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationScore {
    pub id: String,
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub prf: Prf,
    pub per_conversation: Vec<ConversationScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub scores: BTreeMap<String, TaskScore>,
}

impl EvalReport {
    /// F1 of the property tuples of the report's task.
    pub fn headline_f1(&self) -> f64 {
        self.scores.get(report_names(self.task)[0]).map_or(0.0, |s| s.prf.f1)
    }
}

fn score_all(ids: &[String], per: &[(Counts, String)]) -> TaskScore {
    let total = per.iter().fold(Counts::default(), |a, (c, _)| a.merge(*c));
    TaskScore {
        prf: total.prf(),
        per_conversation: per
            .iter()
            .zip(ids)
            .map(|((c, _), id)| ConversationScore { id: id.clone(), prf: c.prf() })
            .collect(),
    }
}

/// Runs `f` over conversations with at most `workers` threads, keeping corpus order.
fn map_conversations<T, F>(corpus: &Corpus, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&AnnotatedConversation) -> Result<T> + Sync + Send,
{
    if workers <= 1 {
        return corpus.conversations.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| corpus.conversations.par_iter().map(f).collect())
}

/// Full-pipeline evaluation of every tuple kind the model produces.
pub fn evaluate(model: &RsatModel, corpus: &Corpus, workers: usize) -> Result<EvalReport> {
    let preds = map_conversations(corpus, workers, |c| model.predict(c, SpanSource::Decoded))?;
    Ok(report_from_predictions(model.task(), corpus, &preds))
}

pub fn report_from_predictions(task: Task, corpus: &Corpus, preds: &[Prediction]) -> EvalReport {
    let ids: Vec<String> = corpus.conversations.iter().map(|c| c.id.clone()).collect();
    let mut scores = BTreeMap::new();
    for &kind in report_names(task) {
        let per: Vec<(Counts, String)> = corpus
            .conversations
            .iter()
            .zip(preds)
            .map(|(c, p)| (Counts::of(&predicted_tuples(c, p, kind), &gold_tuples(c, kind)), c.id.clone()))
            .collect();
        // a model without the status head produces no status tuples; leave the kind out
        if kind == SX_STATUS && per.iter().all(|(c, _)| c.n_pred == 0) && preds.iter().all(|p| !has_status(p)) {
            continue;
        }
        scores.insert(kind.to_string(), score_all(&ids, &per));
    }
    EvalReport { task, scores }
}

fn has_status(p: &Prediction) -> bool {
    p.spans.iter().any(|s| s.attributes.contains_key(heads::SYM_STATUS))
}

/// What counts as a correct relation when spans are given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMatch {
    /// Any mention carrying the linked entity's value.
    #[default]
    Value,
    /// Exactly the annotated mention.
    Mention,
}

/// Gold value of annotated entity span `i`.
fn gold_value(conv: &AnnotatedConversation, words: &[String], i: usize) -> Option<EntityValue> {
    let s = &conv.spans[i];
    match conv.task {
        Task::Sx => s.attr(heads::SYM_TYPE).map(EntityValue::Class),
        Task::Rx => Some(EntityValue::Text(span_words(words, &Span::new(s.start, s.end, s.kind)))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationOnlyReport {
    /// Property tuples built from annotated spans and attributes with predicted links.
    pub tuples: EvalReport,
    /// Share of annotated relations whose predicted link is correct under the chosen matching.
    pub accuracy: Prf,
}

/// Relation inference alone: annotated spans and attributes are supplied.
pub fn relation_only_eval(model: &RsatModel, corpus: &Corpus, matching: RelationMatch, workers: usize) -> Result<RelationOnlyReport> {
    let preds = map_conversations(corpus, workers, |c| model.predict(c, SpanSource::Gold))?;
    let mut tuples = report_from_predictions(model.task(), corpus, &preds);
    tuples.scores.retain(|k, _| k == report_names(model.task())[0]);
    Ok(RelationOnlyReport {
        tuples,
        accuracy: relation_accuracy(corpus, &preds, matching),
    })
}

/// Link accuracy of predictions made over annotated spans; `preds[c].spans` parallels `conv.spans`.
pub fn relation_accuracy(corpus: &Corpus, preds: &[Prediction], matching: RelationMatch) -> Prf {
    let mut counts = Counts::default();
    for (conv, pred) in corpus.conversations.iter().zip(preds) {
        let words = conv.words();
        for r in &conv.relations {
            counts.n_ref += 1;
            let p = &pred.spans[r.property];
            if p.value.is_none() {
                continue;
            }
            counts.n_pred += 1;
            let ok = match matching {
                RelationMatch::Value => p.value == gold_value(conv, &words, r.entity),
                RelationMatch::Mention => p.link == Some(r.entity),
            };
            if ok {
                counts.precision_mass += 1.0;
                counts.recall_mass += 1.0;
            }
        }
    }
    counts.prf()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTurnStats {
    /// Extracted relations whose property span and entity value are both right.
    pub correct: usize,
    /// Of those, relations whose selected mention lies three or more utterances away.
    pub correct_cross: usize,
    pub fraction: f64,
    /// Cross-turn fraction of the annotated relations.
    pub reference: f64,
}

/// Cross-turn share of correctly extracted relations in the full pipeline.
pub fn cross_turn_stats(model: &RsatModel, corpus: &Corpus, workers: usize) -> Result<CrossTurnStats> {
    let per = map_conversations(corpus, workers, |conv| {
        let pred = model.predict(conv, SpanSource::Decoded)?;
        let words = conv.words();
        let utt = conv.utterance_index();
        let gold: HashMap<(usize, usize), usize> = conv
            .relations
            .iter()
            .map(|r| {
                let p = &conv.spans[r.property];
                ((p.start, p.end), r.entity)
            })
            .collect();
        let mut out = (0usize, 0usize);
        for s in pred.spans.iter().filter(|s| s.span.kind == SpanKind::Property) {
            let (Some(link), Some(v)) = (s.link, &s.value) else {
                continue;
            };
            let Some(&ge) = gold.get(&(s.span.start, s.span.end)) else {
                continue;
            };
            if gold_value(conv, &words, ge).as_ref() != Some(v) {
                continue;
            }
            out.0 += 1;
            if utt[s.span.start].abs_diff(utt[pred.spans[link].span.start]) >= crate::corpus::CROSS_TURN_DISTANCE {
                out.1 += 1;
            }
        }
        Ok(out)
    })?;
    let (correct, correct_cross) = per.into_iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(CrossTurnStats {
        correct,
        correct_cross,
        fraction: if correct == 0 { 0.0 } else { correct_cross as f64 / correct as f64 },
        reference: corpus.cross_turn_fraction().unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Field {
        Field::Tokens(s.split_whitespace().map(String::from).collect())
    }

    fn t(a: usize, b: usize, c: &str) -> ExtractedTuple {
        ExtractedTuple([Field::Class(a), Field::Class(b), toks(c)])
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(partial_overlap(&toks("bad"), &toks("really bad"), Denominator::Reference), 0.5);
        assert_eq!(partial_overlap(&toks("bad"), &toks("really bad"), Denominator::Predicted), 1.0);
        assert_eq!(partial_overlap(&toks("every morning"), &toks("every morning"), Denominator::Reference), 1.0);
        assert_eq!(partial_overlap(&toks("my arm"), &toks("back"), Denominator::Reference), 0.0);
        assert_eq!(partial_overlap(&toks("a a b"), &toks("a b b"), Denominator::Reference), 2.0 / 3.0);
        assert_eq!(partial_overlap(&toks("Bad"), &toks("bad"), Denominator::Reference), 1.0);
        assert_eq!(partial_overlap(&Field::Class(2), &Field::Class(2), Denominator::Reference), 1.0);
        assert_eq!(partial_overlap(&Field::Class(2), &Field::Class(3), Denominator::Reference), 0.0);
        assert_eq!(partial_overlap(&Field::Class(2), &toks("x"), Denominator::Reference), 0.0);
        assert_eq!(partial_overlap(&toks(""), &toks(""), Denominator::Reference), 1.0);
        assert_eq!(partial_overlap(&toks("x"), &toks(""), Denominator::Reference), 0.0);
    }

    #[test]
    fn worked_example() {
        // (sym/sob, prop/severity, [bad]) against (sym/unk, prop/location, [arm]) and (sym/sob, prop/severity, [really, bad])
        let (sob, unk, sev, loc) = (1, 7, 0, 2);
        let preds = vec![vec![t(sob, sev, "bad")]];
        let refs = vec![vec![t(unk, loc, "arm"), t(sob, sev, "really bad")]];
        let r = precision_recall_f1(&preds, &refs).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.25);
        assert!((r.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let one = vec![vec![t(0, 0, "x")]];
        let none: Vec<Vec<ExtractedTuple>> = vec![vec![]];
        let r = precision_recall_f1(&none, &one).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = precision_recall_f1(&none, &none).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = precision_recall_f1(&one, &one).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert!(precision_recall_f1(&one, &[]).is_err());
    }

    #[test]
    fn conversations_are_not_matched_across() {
        let preds = vec![vec![t(0, 0, "x")], vec![]];
        let refs = vec![vec![], vec![t(0, 0, "x")]];
        let r = precision_recall_f1(&preds, &refs).unwrap();
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }

    /// Best mean over every with-replacement alignment, enumerated explicitly.
    fn oracle_side(xs: &[ExtractedTuple], ys: &[ExtractedTuple], pred_side: bool) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        if ys.is_empty() {
            return 0.0;
        }
        let n = xs.len();
        let k = ys.len();
        let mut best: f64 = 0.0;
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut s = 0.0;
            for x in xs {
                let y = &ys[c % k];
                c /= k;
                s += if pred_side {
                    tuple_score(x, y, Denominator::Predicted)
                } else {
                    tuple_score(y, x, Denominator::Reference)
                };
            }
            best = best.max(s);
        }
        best
    }

    fn small_tuple() -> impl Strategy<Value = ExtractedTuple> {
        let word = prop::sample::select(vec!["a", "b", "c"]);
        (0usize..2, 0usize..2, proptest::collection::vec(word, 0..3)).prop_map(|(a, b, w)| {
            ExtractedTuple([Field::Class(a), Field::Class(b), Field::Tokens(w.into_iter().map(String::from).collect())])
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn equals_enumeration_oracle(p in proptest::collection::vec(small_tuple(), 0..4), r in proptest::collection::vec(small_tuple(), 0..4)) {
            let got = Counts::of(&p, &r);
            prop_assert!((got.precision_mass - oracle_side(&p, &r, true)).abs() < 1e-12);
            prop_assert!((got.recall_mass - oracle_side(&r, &p, false)).abs() < 1e-12);
        }

        #[test]
        fn bounded_and_symmetric(p in proptest::collection::vec(small_tuple(), 0..5), r in proptest::collection::vec(small_tuple(), 0..5)) {
            let a = precision_recall_f1(&[p.clone()], &[r.clone()]).unwrap();
            let b = precision_recall_f1(&[r], &[p]).unwrap();
            for v in [a.precision, a.recall, a.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((a.precision - b.recall).abs() < 1e-12);
            prop_assert!((a.recall - b.precision).abs() < 1e-12);
        }

        #[test]
        fn duplicating_a_prediction_moves_precision_toward_its_score(p in proptest::collection::vec(small_tuple(), 1..5), r in proptest::collection::vec(small_tuple(), 1..5), i in 0usize..5) {
            let i = i % p.len();
            let base = Counts::of(&p, &r);
            let s = r.iter().map(|y| tuple_score(&p[i], y, Denominator::Predicted)).fold(0.0, f64::max);
            let mut q = p.clone();
            q.push(p[i].clone());
            let dup = Counts::of(&q, &r);
            let (b, d) = (base.prf(), dup.prf());
            prop_assert!((d.precision - s).abs() <= (b.precision - s).abs() + 1e-12);
            prop_assert!(d.recall <= b.recall + 1e-12);
        }
    }
}
