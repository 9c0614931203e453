//! Annotated conversations, the synthetic generator, and corpus files.

mod io;
mod ontology;
mod text;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus, CORPUS_FORMAT_VERSION};
pub use ontology::{heads, OntologyCounts, Task, TaskOntology};
pub use synth::{generate_synthetic, lexicon_pos, SynthConfig, CROSS_TURN_DISTANCE};
pub use text::{parse_transcript, tokenize};

/// Size of the universal part-of-speech inventory used by the generator.
pub const POS_TAG_COUNT: usize = 17;
/// Upper bound on POS tag ids accepted in corpus files.
pub const MAX_POS_TAGS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg: Option<u32>,
}

impl Token {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            pos: None,
            kg: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Entity,
    Property,
}

/// A labelled token range `[start, end)` over the flattened conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub attributes: BTreeMap<String, usize>,
}

impl SpanAnnotation {
    pub fn attr(&self, head: &str) -> Option<usize> {
        self.attributes.get(head).copied()
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Links a property span to the entity span it describes (indices into `spans`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub property: usize,
    pub entity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedConversation {
    pub id: String,
    pub task: Task,
    pub utterances: Vec<Utterance>,
    pub spans: Vec<SpanAnnotation>,
    pub relations: Vec<RelationAnnotation>,
}

/// Attribute heads a span of `kind` carries for `task`.
pub fn attribute_heads(task: Task, kind: SpanKind) -> &'static [&'static str] {
    match (task, kind) {
        (Task::Sx, SpanKind::Entity) => &[heads::SYM_TYPE, heads::SYM_STATUS],
        (Task::Sx, SpanKind::Property) => &[heads::PROP_TYPE],
        (Task::Rx, SpanKind::Entity) => &[],
        (Task::Rx, SpanKind::Property) => &[heads::PROP_TYPE],
    }
}

impl AnnotatedConversation {
    /// Builds a conversation and checks every structural invariant against `ontology`.
    pub fn new(
        id: impl Into<String>,
        utterances: Vec<Utterance>,
        spans: Vec<SpanAnnotation>,
        relations: Vec<RelationAnnotation>,
        ontology: &TaskOntology,
    ) -> Result<Self> {
        let conv = Self {
            id: id.into(),
            task: ontology.task,
            utterances,
            spans,
            relations,
        };
        conv.validate(ontology)?;
        Ok(conv)
    }

    pub fn validate(&self, ontology: &TaskOntology) -> Result<()> {
        let id = &self.id;
        if self.task != ontology.task {
            return Err(Error::invalid_conv(id, "task does not match ontology"));
        }
        if self.utterances.is_empty() {
            return Err(Error::invalid_conv(id, "conversation has no utterances"));
        }
        for (u, utt) in self.utterances.iter().enumerate() {
            if utt.tokens.is_empty() {
                return Err(Error::invalid_conv(id, format!("utterance {u} has no tokens")));
            }
            for t in &utt.tokens {
                if t.text.is_empty() {
                    return Err(Error::invalid_conv(id, format!("empty token in utterance {u}")));
                }
                if let Some(p) = t.pos {
                    if p as usize >= MAX_POS_TAGS {
                        return Err(Error::invalid_conv(id, format!("pos tag {p} out of range")));
                    }
                }
            }
        }
        let n = self.len();
        for (i, s) in self.spans.iter().enumerate() {
            if s.start >= s.end || s.end > n {
                return Err(Error::invalid_conv(
                    id,
                    format!("span {i} [{}, {}) outside 0..{n}", s.start, s.end),
                ));
            }
            let expected = attribute_heads(self.task, s.kind);
            if s.attributes.len() != expected.len()
                || expected.iter().any(|h| !s.attributes.contains_key(*h))
            {
                return Err(Error::invalid_conv(
                    id,
                    format!("span {i} attributes {:?}, expected {expected:?}", s.attributes.keys()),
                ));
            }
            for (head, &class) in &s.attributes {
                let size = ontology.head_size(head).unwrap_or(0);
                if class >= size {
                    return Err(Error::invalid_conv(
                        id,
                        format!("span {i} {head} class {class} >= {size}"),
                    ));
                }
            }
        }
        // spans of either kind share one BIO sequence, so none may overlap
        let mut ranges: Vec<(usize, usize, usize)> =
            self.spans.iter().enumerate().map(|(i, s)| (s.start, s.end, i)).collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::invalid_conv(
                    id,
                    format!("spans {} and {} overlap", w[0].2, w[1].2),
                ));
            }
        }
        let mut linked = vec![false; self.spans.len()];
        for (r, rel) in self.relations.iter().enumerate() {
            let p = self.spans.get(rel.property);
            let e = self.spans.get(rel.entity);
            match (p, e) {
                (Some(p), Some(e)) if p.kind == SpanKind::Property && e.kind == SpanKind::Entity => {}
                _ => {
                    return Err(Error::invalid_conv(
                        id,
                        format!(
                            "relation {r} must link a property span to an entity span (got {} -> {})",
                            rel.property, rel.entity
                        ),
                    ))
                }
            }
            if std::mem::replace(&mut linked[rel.property], true) {
                return Err(Error::invalid_conv(
                    id,
                    format!("property span {} appears in more than one relation", rel.property),
                ));
            }
        }
        Ok(())
    }

    /// Total token count of the flattened conversation.
    pub fn len(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated tokens and the start index of every utterance.
    pub fn flatten(&self) -> (Vec<&Token>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(self.len());
        let mut bounds = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            bounds.push(tokens.len());
            tokens.extend(u.tokens.iter());
        }
        (tokens, bounds)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.utterances.iter().flat_map(|u| u.tokens.iter())
    }

    /// Lowercased token texts of the flattened conversation.
    pub fn words(&self) -> Vec<String> {
        self.tokens().map(|t| t.text.to_lowercase()).collect()
    }

    /// Utterance index of every flattened token.
    pub fn utterance_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (u, utt) in self.utterances.iter().enumerate() {
            out.extend(std::iter::repeat_n(u, utt.tokens.len()));
        }
        out
    }

    /// Entity span linked to each span index (for properties that have a relation).
    pub fn linked_entity(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.spans.len()];
        for r in &self.relations {
            out[r.property] = Some(r.entity);
        }
        out
    }

    /// Number of utterances between a relation's property and entity spans.
    pub fn relation_turn_distance(&self, rel: &RelationAnnotation) -> usize {
        let utt = self.utterance_index();
        let p = utt[self.spans[rel.property].start];
        let e = utt[self.spans[rel.entity].start];
        p.abs_diff(e)
    }
}

/// A validated collection of conversations sharing one ontology.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub ontology: TaskOntology,
    pub conversations: Vec<AnnotatedConversation>,
}

impl Corpus {
    pub fn new(ontology: TaskOntology, conversations: Vec<AnnotatedConversation>) -> Result<Self> {
        for c in &conversations {
            c.validate(&ontology)?;
        }
        Ok(Self {
            ontology,
            conversations,
        })
    }

    pub fn task(&self) -> Task {
        self.ontology.task
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            ontology: self.ontology.clone(),
            conversations: idx.iter().map(|&i| self.conversations[i].clone()).collect(),
        }
    }

    /// Fraction of relations whose property lies three or more utterances from its entity.
    pub fn cross_turn_fraction(&self) -> Option<f64> {
        let mut total = 0usize;
        let mut cross = 0usize;
        for c in &self.conversations {
            for r in &c.relations {
                total += 1;
                if c.relation_turn_distance(r) >= synth::CROSS_TURN_DISTANCE {
                    cross += 1;
                }
            }
        }
        (total > 0).then(|| cross as f64 / total as f64)
    }
}

/// Seeded disjoint train/dev/test split. Parts keep the corpus order.
pub fn split_corpus(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let mut train = order[..n_train].to_vec();
    let mut dev = order[n_train..n_train + n_dev].to_vec();
    let mut test = order[n_train + n_dev..].to_vec();
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    Ok((corpus.subset(&train), corpus.subset(&dev), corpus.subset(&test)))
}
