#![allow(dead_code)]

use std::collections::BTreeMap;

use rsat::corpus::{
    heads, AnnotatedConversation, RelationAnnotation, SpanAnnotation, SpanKind, Speaker, Task, TaskOntology, Token,
    Utterance,
};
use rsat::encoder::{EncoderConfig, KnowledgeGraph, Vocab};
use rsat::model::{Ablation, ModelConfig, RsatModel};

pub fn utt(speaker: Speaker, text: &str) -> Utterance {
    Utterance {
        speaker,
        tokens: text.split_whitespace().map(Token::new).collect(),
    }
}

pub fn span(kind: SpanKind, start: usize, end: usize, attrs: &[(&str, usize)]) -> SpanAnnotation {
    SpanAnnotation {
        kind,
        start,
        end,
        attributes: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    }
}

pub fn rel(property: usize, entity: usize) -> RelationAnnotation {
    RelationAnnotation { property, entity }
}

/// Two symptom entities and one frequency property linked to the first.
pub fn toy_sx() -> (AnnotatedConversation, TaskOntology) {
    let ont = TaskOntology::desk(Task::Sx);
    let conv = AnnotatedConversation::new(
        "toy-sx",
        vec![utt(Speaker::Dr, "pain or cough ?"), utt(Speaker::Pt, "every morning")],
        vec![
            span(SpanKind::Entity, 0, 1, &[(heads::SYM_TYPE, 0), (heads::SYM_STATUS, 0)]),
            span(SpanKind::Entity, 2, 3, &[(heads::SYM_TYPE, 1), (heads::SYM_STATUS, 1)]),
            span(SpanKind::Property, 4, 6, &[(heads::PROP_TYPE, 3)]),
        ],
        vec![rel(2, 0)],
        &ont,
    )
    .unwrap();
    (conv, ont)
}

/// Two medication mentions and one dosage property linked to the second.
pub fn toy_rx() -> (AnnotatedConversation, TaskOntology) {
    let ont = TaskOntology::desk(Task::Rx);
    let conv = AnnotatedConversation::new(
        "toy-rx",
        vec![utt(Speaker::Pt, "aspirin and ibuprofen"), utt(Speaker::Pt, "two pills")],
        vec![
            span(SpanKind::Entity, 0, 1, &[]),
            span(SpanKind::Entity, 2, 3, &[]),
            span(SpanKind::Property, 3, 5, &[(heads::PROP_TYPE, 0)]),
        ],
        vec![rel(2, 1)],
        &ont,
    )
    .unwrap();
    (conv, ont)
}

/// The illustrative dialogue about arm pain and ibuprofen, annotated for the symptom task.
pub fn table_dialogue_sx() -> (AnnotatedConversation, TaskOntology) {
    let ont = TaskOntology::desk(Task::Sx);
    // tokens: pain = 5, every morning = 12..14, ibuprofen = 25, twice a day = 27..30
    let conv = AnnotatedConversation::new(
        "table-sx",
        dialogue(),
        vec![
            span(SpanKind::Entity, 5, 6, &[(heads::SYM_TYPE, 0), (heads::SYM_STATUS, 0)]),
            span(SpanKind::Property, 12, 14, &[(heads::PROP_TYPE, 3)]),
        ],
        vec![rel(1, 0)],
        &ont,
    )
    .unwrap();
    (conv, ont)
}

pub fn table_dialogue_rx() -> (AnnotatedConversation, TaskOntology) {
    let ont = TaskOntology::desk(Task::Rx);
    let conv = AnnotatedConversation::new(
        "table-rx",
        dialogue(),
        vec![span(SpanKind::Entity, 25, 26, &[]), span(SpanKind::Property, 27, 30, &[(heads::PROP_TYPE, 2)])],
        vec![rel(1, 0)],
        &ont,
    )
    .unwrap();
    (conv, ont)
}

fn dialogue() -> Vec<Utterance> {
    vec![
        utt(Speaker::Dr, "How often do you have pain in your arms ?"),
        utt(Speaker::Pt, "It hurts every morning ."),
        utt(Speaker::Dr, "Are you taking anything for it ?"),
        utt(Speaker::Pt, "I've been taking Ibuprofen . Twice a day ."),
    ]
}

/// Adds POS ids to every token and links the first token to KG node 0.
pub fn with_features(mut conv: AnnotatedConversation) -> AnnotatedConversation {
    let mut i = 0u8;
    for u in &mut conv.utterances {
        for t in &mut u.tokens {
            t.pos = Some(i % 4);
            i += 1;
        }
    }
    conv.utterances[0].tokens[0].kg = Some(0);
    conv
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        word_dim: 5,
        cell: 4,
        layers: 1,
        ff: vec![6],
        dropout: 0.0,
        word_dropout: 0.0,
        pos_tags: 4,
        use_kg: true,
        use_pos: true,
    }
}

pub fn tiny_kg() -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::empty(3, vec!["symptom".into(), "drug".into()]);
    kg.add_node(vec![0.3, -0.2, 0.5], vec![1]);
    kg
}

pub fn tiny_model(conv: &AnnotatedConversation, ont: &TaskOntology, ablation: Ablation, seed: u64) -> RsatModel {
    let vocab = Vocab::from_words(conv.words());
    let cfg = ModelConfig {
        encoder: tiny_encoder(),
        d_mem: Some(4),
        ablation,
        ..ModelConfig::desk()
    };
    RsatModel::new(cfg, ont.clone(), vocab, tiny_kg(), seed).unwrap()
}
