mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsat::corpus::{generate_synthetic, heads, AnnotatedConversation, Corpus, SpanKind, SynthConfig, Task};
use rsat::encoder::Vocab;
use rsat::evaluation::{
    gold_tuples, predicted_tuples, relation_accuracy, report_from_predictions, report_names, Field, RelationMatch,
    RX_PROPERTY, SX_PROPERTY,
};
use rsat::model::{span_words, Ablation, ModelConfig, PredictedSpan, Prediction, RsatModel, SpanSource};
use rsat::relation_memory::EntityValue;
use rsat::span_crf::Span;

fn synthetic(task: Task, n: usize, seed: u64) -> (Corpus, rsat::encoder::KnowledgeGraph) {
    let mut sc = SynthConfig::desk(task, seed);
    sc.n_conversations = n;
    generate_synthetic(&sc).unwrap()
}

fn value_of(conv: &AnnotatedConversation, i: usize) -> EntityValue {
    let s = &conv.spans[i];
    match conv.task {
        Task::Sx => EntityValue::Class(s.attr(heads::SYM_TYPE).unwrap()),
        Task::Rx => EntityValue::Text(span_words(&conv.words(), &Span::new(s.start, s.end, s.kind))),
    }
}

/// Annotated spans and attributes, with each property linked by `choose(property index)`.
fn prediction_with(conv: &AnnotatedConversation, mut choose: impl FnMut(usize) -> Option<usize>) -> Prediction {
    let spans = conv
        .spans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (link, value) = match s.kind {
                SpanKind::Entity => (None, Some(value_of(conv, i))),
                SpanKind::Property => {
                    let link = choose(i);
                    (link, link.map(|e| value_of(conv, e)))
                }
            };
            PredictedSpan {
                span: Span::new(s.start, s.end, s.kind),
                attributes: s.attributes.clone(),
                link,
                value,
            }
        })
        .collect();
    Prediction { spans, buffer_len: 0 }
}

fn gold_prediction(conv: &AnnotatedConversation) -> Prediction {
    let linked = conv.linked_entity();
    prediction_with(conv, |p| linked[p])
}

fn toks(s: &str) -> Field {
    Field::Tokens(s.split_whitespace().map(String::from).collect())
}

#[test]
fn illustrative_dialogue_yields_caption_tuples() {
    let (sx, sx_ont) = table_dialogue_sx();
    let (rx, rx_ont) = table_dialogue_rx();
    let sx_tuples = predicted_tuples(&sx, &gold_prediction(&sx), SX_PROPERTY);
    let rx_tuples = predicted_tuples(&rx, &gold_prediction(&rx), RX_PROPERTY);
    assert_eq!(sx_tuples, gold_tuples(&sx, SX_PROPERTY));
    assert_eq!(rx_tuples, gold_tuples(&rx, RX_PROPERTY));
    assert_eq!(sx_tuples.len(), 1);
    let [Field::Class(sym), Field::Class(pt), words] = &sx_tuples[0].0 else {
        panic!("unexpected tuple {:?}", sx_tuples[0]);
    };
    assert_eq!(sx_ont.class_name(heads::SYM_TYPE, *sym), "sym/msk/pain");
    assert_eq!(sx_ont.class_name(heads::PROP_TYPE, *pt), "symprop/frequency");
    assert_eq!(*words, toks("every morning"));
    assert_eq!(rx_tuples.len(), 1);
    let [med, Field::Class(pt), words] = &rx_tuples[0].0 else {
        panic!("unexpected tuple {:?}", rx_tuples[0]);
    };
    assert_eq!(*med, toks("ibuprofen"));
    assert_eq!(rx_ont.class_name(heads::PROP_TYPE, *pt), "medsprop/frequency");
    assert_eq!(*words, toks("twice a day"));
}

#[test]
fn gold_components_score_perfectly() {
    for task in [Task::Sx, Task::Rx] {
        let (corpus, _) = synthetic(task, 60, 4);
        let preds: Vec<Prediction> = corpus.conversations.iter().map(gold_prediction).collect();
        let report = report_from_predictions(task, &corpus, &preds);
        assert_eq!(report.scores.len(), report_names(task).len());
        for (k, s) in &report.scores {
            assert_eq!((s.prf.precision, s.prf.recall, s.prf.f1), (1.0, 1.0, 1.0), "{k}");
        }
        for m in [RelationMatch::Value, RelationMatch::Mention] {
            assert_eq!(relation_accuracy(&corpus, &preds, m).f1, 1.0);
        }
    }
}

#[test]
fn uniform_random_links_match_analytic_expectation() {
    for task in [Task::Sx, Task::Rx] {
        let (corpus, _) = synthetic(task, 200, 6);
        let mut mention_expect = Vec::new();
        let mut value_expect = Vec::new();
        for conv in &corpus.conversations {
            let ents: Vec<usize> = (0..conv.spans.len()).filter(|&i| conv.spans[i].kind == SpanKind::Entity).collect();
            for r in &conv.relations {
                let k = ents.len() as f64;
                let same = ents.iter().filter(|&&e| value_of(conv, e) == value_of(conv, r.entity)).count() as f64;
                mention_expect.push(1.0 / k);
                value_expect.push(same / k);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 20;
        let (mut acc_m, mut acc_v) = (0.0, 0.0);
        for _ in 0..draws {
            let preds: Vec<Prediction> = corpus
                .conversations
                .iter()
                .map(|conv| {
                    let ents: Vec<usize> =
                        (0..conv.spans.len()).filter(|&i| conv.spans[i].kind == SpanKind::Entity).collect();
                    prediction_with(conv, |_| (!ents.is_empty()).then(|| ents[rng.random_range(0..ents.len())]))
                })
                .collect();
            acc_m += relation_accuracy(&corpus, &preds, RelationMatch::Mention).precision / draws as f64;
            acc_v += relation_accuracy(&corpus, &preds, RelationMatch::Value).precision / draws as f64;
        }
        // 20 draws over thousands of relations: standard error well under 0.005
        assert!((acc_m - mean(&mention_expect)).abs() < 0.015, "{task:?} mention {acc_m} vs {}", mean(&mention_expect));
        assert!((acc_v - mean(&value_expect)).abs() < 0.015, "{task:?} value {acc_v} vs {}", mean(&value_expect));
    }
}

fn untrained(corpus: &Corpus, kg: rsat::encoder::KnowledgeGraph) -> RsatModel {
    RsatModel::new(ModelConfig::desk(), corpus.ontology.clone(), Vocab::build(corpus, 1), kg, 0).unwrap()
}

#[test]
fn gold_spans_give_one_tuple_per_linked_property() {
    for task in [Task::Sx, Task::Rx] {
        let (corpus, kg) = synthetic(task, 30, 8);
        let m = untrained(&corpus, kg);
        let kind = report_names(task)[0];
        for conv in &corpus.conversations {
            let pred = m.predict(conv, SpanSource::Gold).unwrap();
            let n_entities = conv.spans.iter().filter(|s| s.kind == SpanKind::Entity).count();
            let n_props = conv.spans.iter().filter(|s| s.kind == SpanKind::Property).count();
            assert_eq!(pred.buffer_len, n_entities);
            let expected = if n_entities == 0 { 0 } else { n_props };
            assert_eq!(predicted_tuples(conv, &pred, kind).len(), expected, "{}", conv.id);
        }
    }
}

#[test]
fn properties_without_entities_emit_no_tuples() {
    let (conv, ont) = toy_sx();
    let mut bare = conv.clone();
    bare.spans.retain(|s| s.kind == SpanKind::Property);
    bare.relations.clear();
    bare.validate(&ont).unwrap();
    let m = tiny_model(&conv, &ont, Ablation::FULL, 0);
    let pred = m.predict(&bare, SpanSource::Gold).unwrap();
    assert_eq!(pred.buffer_len, 0);
    assert!(predicted_tuples(&bare, &pred, SX_PROPERTY).is_empty());
    assert!(pred.spans.iter().all(|s| s.link.is_none() && s.value.is_none()));
}

#[test]
fn extraction_is_deterministic() {
    let (corpus, kg) = synthetic(Task::Rx, 10, 3);
    let m = untrained(&corpus, kg);
    for conv in &corpus.conversations {
        assert_eq!(m.predict(conv, SpanSource::Decoded).unwrap(), m.predict(conv, SpanSource::Decoded).unwrap());
    }
}
