//! Deterministic generator of annotated doctor–patient conversations.
//!
//! Conversations are built from topic segments. Each segment mentions one
//! entity and may attach properties to it, either inside the mentioning
//! utterance or several turns later after filler turns and a follow-up
//! question. A synthetic knowledge graph covering the lexicon is produced
//! alongside the corpus.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    heads, AnnotatedConversation, Corpus, RelationAnnotation, SpanAnnotation, SpanKind, Speaker,
    Task, TaskOntology, Token, Utterance,
};
use crate::encoder::KnowledgeGraph;
use crate::error::{Error, Result};

/// A relation counts as cross-turn when its spans are this many utterances apart or more.
pub const CROSS_TURN_DISTANCE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub task: Task,
    pub n_conversations: usize,
    pub n_entity_classes: usize,
    pub n_status_classes: usize,
    pub n_prop_classes: usize,
    pub mean_utterances: f64,
    /// Probability that a relation's property is placed at least three utterances after its entity.
    pub cross_turn_prob: f64,
    /// Probability of inserting a distractor token after each token outside a span.
    pub distractor_rate: f64,
    /// Number of distinct distractor words.
    pub vocab_size: usize,
    /// Size of the medication name pool (open set; rare names may never occur in training).
    pub n_medications: usize,
    pub kg_dim: usize,
    pub kg_types: usize,
    /// Fraction of general (non-domain) words that map to a knowledge-graph node.
    pub kg_general_fraction: f64,
}

impl SynthConfig {
    pub fn desk(task: Task, seed: u64) -> Self {
        let o = TaskOntology::desk(task);
        Self {
            seed,
            task,
            n_conversations: 450,
            n_entity_classes: o.n_entity(),
            n_status_classes: o.n_status(),
            n_prop_classes: o.n_prop(),
            mean_utterances: 14.0,
            cross_turn_prob: 0.11,
            distractor_rate: 0.05,
            vocab_size: 40,
            n_medications: 60,
            kg_dim: 16,
            kg_types: KG_TYPE_NAMES.len(),
            kg_general_fraction: 0.2,
        }
    }

    pub fn ontology(&self) -> Result<TaskOntology> {
        match self.task {
            Task::Sx => TaskOntology::symptoms(
                self.n_entity_classes,
                self.n_status_classes,
                self.n_prop_classes,
            ),
            Task::Rx => TaskOntology::medications(self.n_prop_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        for (name, r) in [
            ("cross_turn_prob", self.cross_turn_prob),
            ("distractor_rate", self.distractor_rate),
            ("kg_general_fraction", self.kg_general_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must lie in [0,1]"));
            }
        }
        if self.n_conversations == 0 || self.vocab_size == 0 || self.kg_dim == 0 {
            return bad("counts must be positive");
        }
        if self.mean_utterances < 4.0 {
            return bad("mean_utterances must be at least 4");
        }
        if self.kg_types < KG_TYPE_NAMES.len() {
            return bad(&format!("kg_types must be at least {}", KG_TYPE_NAMES.len()));
        }
        if self.task == Task::Rx && self.n_medications < 4 {
            return bad("n_medications must be at least 4");
        }
        self.ontology().map(|_| ())
    }
}

const KG_TYPE_NAMES: &[&str] = &[
    "symptom",
    "finding",
    "medication",
    "substance",
    "body_part",
    "time",
    "quantity",
    "general",
];
const T_SYMPTOM: usize = 0;
const T_FINDING: usize = 1;
const T_MEDICATION: usize = 2;
const T_SUBSTANCE: usize = 3;
const T_BODY: usize = 4;
const T_TIME: usize = 5;
const T_QUANTITY: usize = 6;
const T_GENERAL: usize = 7;

// Universal POS ids.
const ADJ: u8 = 0;
const ADP: u8 = 1;
const ADV: u8 = 2;
const AUX: u8 = 3;
const CCONJ: u8 = 4;
const DET: u8 = 5;
const INTJ: u8 = 6;
const NOUN: u8 = 7;
const NUM: u8 = 8;
const PART: u8 = 9;
const PRON: u8 = 10;
const PROPN: u8 = 11;
const PUNCT: u8 = 12;
const VERB: u8 = 15;

fn pos_of(word: &str) -> u8 {
    match word {
        "?" | "." | "," => PUNCT,
        "i" | "you" | "it" | "me" | "we" | "that" | "anything" | "they" | "anyone" => PRON,
        "my" | "your" | "the" | "a" | "any" | "some" | "every" | "all" | "each" | "this" => DET,
        "in" | "for" | "of" | "at" | "after" | "since" | "about" | "on" | "with" => ADP,
        "and" | "but" | "or" => CCONJ,
        "is" | "am" | "are" | "been" | "do" | "does" | "have" | "has" | "had" | "was" | "can" => AUX,
        "not" | "to" => PART,
        "yes" | "yeah" | "no" | "okay" | "alright" | "mm" | "hmm" | "um" | "uh" | "well" | "oh" => INTJ,
        "really" | "pretty" | "very" | "too" | "mostly" | "usually" | "still" | "exactly" | "recently"
        | "now" | "later" | "often" | "long" | "much" | "twice" | "once" | "sometimes" | "so" => ADV,
        "bad" | "mild" | "severe" | "strong" | "sore" | "few" | "loose" | "other" | "nice" | "right"
        | "new" => ADJ,
        "one" | "two" | "three" | "four" | "six" | "ten" | "20" | "500" => NUM,
        "get" | "take" | "taking" | "having" | "started" | "comes" | "happens" | "happen" | "gave"
        | "use" | "going" | "think" | "see" | "make" | "write" | "feel" | "feeling" | "doing"
        | "gets" | "talk" | "tell" | "say" | "help" | "helps" => VERB,
        _ => NOUN,
    }
}

/// POS id of a transcript word under the generator's lexicon; unknown words that the
/// knowledge graph types as medications are proper nouns.
pub fn lexicon_pos(word: &str, kg: &KnowledgeGraph) -> u8 {
    let w = word.to_lowercase();
    let pos = pos_of(&w);
    let is_med = kg
        .lookup(&w)
        .and_then(|id| kg.node(id))
        .is_some_and(|n| n.type_ids.contains(&T_MEDICATION));
    if pos == NOUN && is_med {
        PROPN
    } else {
        pos
    }
}

struct PropBank {
    phrases: Vec<Vec<String>>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn bank(list: &[&str]) -> PropBank {
    PropBank {
        phrases: list.iter().map(|s| words(s)).collect(),
    }
}

const BODY_PARTS: &[&str] = &[
    "my back",
    "my chest",
    "my head",
    "my stomach",
    "my legs",
    "my arms",
    "my neck",
    "my skin",
    "my knees",
    "my shoulder",
];

const SYMPTOM_FORMS: &[&[&str]] = &[
    &["pain", "aches"],
    &["cough", "coughing"],
    &["headache", "headaches", "migraines"],
    &["nausea", "queasiness"],
    &["fever", "fevers", "chills"],
    &["shortness of breath", "trouble breathing"],
    &["rash", "itching"],
    &["dizziness", "vertigo"],
    &["fatigue", "tiredness"],
    &["sore throat"],
    &["diarrhea", "loose stools"],
    &["anxiety", "panic attacks"],
];

const PREFERRED_LOCATIONS: &[[usize; 2]] = &[
    [0, 8],
    [1, 6],
    [2, 6],
    [3, 1],
    [2, 1],
    [1, 6],
    [7, 5],
    [2, 6],
    [4, 5],
    [6, 1],
    [3, 0],
    [1, 2],
];

const MED_NAMES: &[&str] = &[
    "ibuprofen",
    "tylenol",
    "advil",
    "aspirin",
    "lisinopril",
    "metformin",
    "insulin",
    "prednisone",
    "amoxicillin",
    "omeprazole",
    "zoloft",
    "xanax",
    "lipitor",
    "albuterol",
    "benadryl",
    "claritin",
    "melatonin",
    "gabapentin",
    "blood thinner",
    "water pill",
    "fish oil",
    "vitamin d",
];

const SYLLABLES: &[&str] = &[
    "zor", "mel", "tra", "vel", "cor", "nix", "dal", "pra", "lum", "ser", "tor", "ben", "qua", "fen",
    "lo", "ri", "ka", "mo",
];
const MED_SUFFIXES: &[&str] = &[
    "pril", "statin", "zole", "cillin", "done", "pam", "lol", "xin", "mab", "tide",
];
const DISTRACTORS: &[&str] = &[
    "um", "uh", "like", "so", "well", "actually", "basically", "oh", "hmm", "anyway",
];

const DR_FILLERS: &[&str] = &[
    "okay",
    "i see",
    "alright",
    "got it",
    "let me make a note of that",
    "okay thank you",
    "mm hmm",
    "that is good to know",
];
const PT_FILLERS: &[&str] = &[
    "yeah",
    "right",
    "um i think so",
    "that is right",
    "okay",
    "the traffic was bad today",
    "i was at work all week",
];
const DR_TOPIC: &[&str] = &[
    "anything else bothering you ?",
    "what else is going on ?",
    "how have you been otherwise ?",
    "tell me about your week",
];

/// Deterministic vocabulary of the synthetic world.
struct World {
    task: Task,
    symptom_forms: Vec<Vec<Vec<String>>>,
    preferred_locations: Vec<[usize; 2]>,
    prop_banks: Vec<PropBank>,
    meds: Vec<Vec<String>>,
    med_weights: Vec<f64>,
    distractors: Vec<String>,
    kg: KnowledgeGraph,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_a11);
        let mut used: BTreeSet<String> = BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, syl: usize, suffix: &str| loop {
            let w = format!("{}{suffix}", pseudo_word(rng, syl));
            if used.insert(w.clone()) {
                return w;
            }
        };

        let mut symptom_forms = Vec::new();
        let mut preferred_locations = Vec::new();
        if cfg.task == Task::Sx {
            for k in 0..cfg.n_entity_classes {
                let forms = match SYMPTOM_FORMS.get(k) {
                    Some(f) => f.iter().map(|s| words(s)).collect(),
                    None => vec![vec![fresh(&mut rng, 3, "itis")]],
                };
                symptom_forms.push(forms);
                preferred_locations.push(
                    PREFERRED_LOCATIONS
                        .get(k)
                        .copied()
                        .unwrap_or([k % BODY_PARTS.len(), (k * 7 + 3) % BODY_PARTS.len()]),
                );
            }
        }

        let mut prop_banks = match cfg.task {
            Task::Sx => vec![
                bank(&["really bad", "pretty bad", "mild", "severe", "very strong", "not too bad"]),
                bank(&["three days", "two weeks", "a month", "a few days", "six months"]),
                bank(BODY_PARTS),
                bank(&["every morning", "twice a day", "all the time", "at night", "once a week", "every day", "after meals"]),
            ],
            Task::Rx => vec![
                bank(&["ten mg", "two pills", "500 milligrams", "one tablet", "20 mg", "two puffs", "a teaspoon"]),
                bank(&["three months", "a year", "two weeks", "a long time", "six weeks"]),
                bank(&["twice a day", "every night", "once a day", "as needed", "every four hours", "in the morning"]),
            ],
        };
        prop_banks.truncate(cfg.n_prop_classes);
        while prop_banks.len() < cfg.n_prop_classes {
            let phrases = (0..3).map(|_| vec![fresh(&mut rng, 2, "ly")]).collect();
            prop_banks.push(PropBank { phrases });
        }

        let mut meds: Vec<Vec<String>> = Vec::new();
        if cfg.task == Task::Rx {
            meds.extend(MED_NAMES.iter().take(cfg.n_medications).map(|s| words(s)));
            while meds.len() < cfg.n_medications {
                let suffix = *MED_SUFFIXES.choose(&mut rng).expect("non-empty");
                meds.push(vec![fresh(&mut rng, 2, suffix)]);
            }
        }
        let med_weights = (0..meds.len()).map(|r| 1.0 / ((r + 1) as f64).powf(0.8)).collect();

        let mut distractors: Vec<String> = DISTRACTORS.iter().take(cfg.vocab_size).map(|s| s.to_string()).collect();
        while distractors.len() < cfg.vocab_size {
            distractors.push(fresh(&mut rng, 2, ""));
        }

        let mut world = Self {
            task: cfg.task,
            symptom_forms,
            preferred_locations,
            prop_banks,
            meds,
            med_weights,
            distractors,
            kg: KnowledgeGraph::empty(0, vec![]),
        };
        world.kg = world.build_kg(cfg, &mut rng);
        world
    }

    fn build_kg(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> KnowledgeGraph {
        let mut type_names: Vec<String> = KG_TYPE_NAMES.iter().map(|s| s.to_string()).collect();
        for t in KG_TYPE_NAMES.len()..cfg.kg_types {
            type_names.push(format!("type{t}"));
        }
        let dim = cfg.kg_dim;
        let scale = 1.0 / (dim as f64).sqrt();
        let centroids: Vec<Vec<f64>> = (0..cfg.kg_types)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
            .collect();
        let mut kg = KnowledgeGraph::empty(dim, type_names);
        let add = |kg: &mut KnowledgeGraph, rng: &mut ChaCha8Rng, ws: &[String], types: Vec<usize>| {
            let mut e = vec![0.0; dim];
            for &t in &types {
                for (x, c) in e.iter_mut().zip(&centroids[t]) {
                    *x += c;
                }
            }
            for x in e.iter_mut() {
                *x += 0.5 * scale * rng.sample::<f64, _>(StandardNormal);
            }
            let id = kg.add_node(e, types);
            for w in ws {
                kg.words.entry(w.clone()).or_insert(id);
            }
        };

        for forms in &self.symptom_forms {
            let ws: Vec<String> = forms.iter().flatten().cloned().collect();
            add(&mut kg, rng, &ws, vec![T_SYMPTOM, T_FINDING]);
        }
        for m in &self.meds {
            add(&mut kg, rng, m, vec![T_MEDICATION, T_SUBSTANCE]);
        }
        for bp in BODY_PARTS {
            add(&mut kg, rng, &words(bp)[1..], vec![T_BODY]);
        }
        for w in ["morning", "night", "day", "week", "weeks", "days", "month", "months", "year", "hours", "meals", "time"] {
            add(&mut kg, rng, &[w.to_string()], vec![T_TIME]);
        }
        for w in ["mg", "milligrams", "pills", "tablet", "puffs", "teaspoon", "one", "two", "three", "four", "six", "ten", "20", "500", "few"] {
            add(&mut kg, rng, &[w.to_string()], vec![T_QUANTITY]);
        }
        for w in ["bad", "mild", "severe", "strong"] {
            add(&mut kg, rng, &[w.to_string()], vec![T_FINDING]);
        }
        // a share of the general lexicon, in a fixed order
        let mut general: BTreeSet<String> = BTreeSet::new();
        for s in DR_FILLERS.iter().chain(PT_FILLERS).chain(DR_TOPIC) {
            general.extend(words(s));
        }
        general.extend(self.distractors.iter().cloned());
        for w in general {
            if kg.words.contains_key(&w) || pos_of(&w) == PUNCT {
                continue;
            }
            if rng.random::<f64>() < cfg.kg_general_fraction {
                let mut types = vec![T_GENERAL];
                if cfg.kg_types > KG_TYPE_NAMES.len() && rng.random::<f64>() < 0.5 {
                    types.push(rng.random_range(KG_TYPE_NAMES.len()..cfg.kg_types));
                }
                add(&mut kg, rng, &[w], types);
            }
        }
        kg
    }

    fn pick_med(&self, rng: &mut ChaCha8Rng, exclude: &BTreeSet<usize>) -> usize {
        let total: f64 = self
            .med_weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .map(|(_, w)| w)
            .sum();
        let mut x = rng.random::<f64>() * total;
        for (i, w) in self.med_weights.iter().enumerate() {
            if exclude.contains(&i) {
                continue;
            }
            if x < *w {
                return i;
            }
            x -= w;
        }
        (0..self.meds.len()).rev().find(|i| !exclude.contains(i)).unwrap_or(0)
    }
}

/// One part of a planned utterance.
enum Piece {
    Word(String),
    Span {
        key: usize,
        kind: SpanKind,
        words: Vec<String>,
        attrs: BTreeMap<String, usize>,
    },
}

struct Plan {
    speaker: Speaker,
    pieces: Vec<Piece>,
}

struct SpanSpec {
    key: usize,
    kind: SpanKind,
    words: Vec<String>,
    attrs: BTreeMap<String, usize>,
}

/// Expands a template: `{E}`, `{P}`, `{Q}` are replaced by the given spans; other tokens are literal.
fn fill(speaker: Speaker, template: &str, slots: &[(&str, &SpanSpec)]) -> Plan {
    let mut pieces = Vec::new();
    for tok in template.split_whitespace() {
        if let Some((_, s)) = slots.iter().find(|(name, _)| *name == tok) {
            pieces.push(Piece::Span {
                key: s.key,
                kind: s.kind,
                words: s.words.clone(),
                attrs: s.attrs.clone(),
            });
        } else {
            pieces.push(Piece::Word(tok.to_string()));
        }
    }
    Plan { speaker, pieces }
}

fn literal(speaker: Speaker, text: &str) -> Plan {
    fill(speaker, text, &[])
}

struct PropInstance {
    spec: SpanSpec,
    ty: usize,
    cross: bool,
}

struct ConvBuilder<'a> {
    world: &'a World,
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    plans: Vec<Plan>,
    relations: Vec<(usize, usize)>,
    next_key: usize,
}

impl<'a> ConvBuilder<'a> {
    fn key(&mut self) -> usize {
        self.next_key += 1;
        self.next_key
    }

    fn choose(&mut self, list: &[&'static str]) -> &'static str {
        list.choose(&mut self.rng).expect("non-empty")
    }

    fn filler(&mut self) {
        let (speaker, list) = if self.rng.random::<bool>() {
            (Speaker::Dr, DR_FILLERS)
        } else {
            (Speaker::Pt, PT_FILLERS)
        };
        let s = self.choose(list);
        self.plans.push(literal(speaker, s));
    }

    fn make_prop(&mut self, ty: usize, entity_class: Option<usize>) -> PropInstance {
        let bank = &self.world.prop_banks[ty];
        let loc_ty = self.world.task == Task::Sx && ty == 2 && self.cfg.n_prop_classes > 2;
        let idx = match (loc_ty, entity_class) {
            (true, Some(k)) if self.rng.random::<f64>() < 0.8 => {
                let pref = self.world.preferred_locations[k];
                pref[self.rng.random_range(0..2)]
            }
            _ => self.rng.random_range(0..bank.phrases.len()),
        };
        let words = bank.phrases[idx].clone();
        let key = self.key();
        let cross = self.rng.random::<f64>() < self.cfg.cross_turn_prob;
        PropInstance {
            spec: SpanSpec {
                key,
                kind: SpanKind::Property,
                words,
                attrs: [(heads::PROP_TYPE.to_string(), ty)].into_iter().collect(),
            },
            ty,
            cross,
        }
    }

    fn n_props(&mut self) -> usize {
        let x = self.rng.random::<f64>();
        if x < 0.15 {
            0
        } else if x < 0.65 {
            1
        } else {
            2
        }
    }

    /// Template with the property in the same utterance as the entity.
    fn same_utterance(&mut self, first: &PropInstance) -> &'static str {
        let sx = self.world.task == Task::Sx;
        let prop_first = self.rng.random::<f64>() < 0.3;
        let opts: &[&'static str] = match (sx, first.ty, prop_first) {
            (true, 0, false) => &["the {E} is {P}", "my {E} is {P}", "i have {E} and it is {P}"],
            (true, 0, true) => &["i have {P} {E}", "it is {P} {E}"],
            (true, 1, false) => &["i have had {E} for {P}", "the {E} has been going on for {P}"],
            (true, 1, true) => &["for {P} i have had {E}"],
            (true, 2, false) => &["i have {E} in {P}", "i get {E} in {P}"],
            (true, 2, true) => &["in {P} i have {E}"],
            (true, 3, false) => &["i get {E} {P}", "the {E} comes {P}"],
            (true, 3, true) => &["{P} i get {E}"],
            (false, 0, false) => &["i take {E} {P}", "i use {E} {P} each time"],
            (false, 0, true) => &["i take {P} of {E}"],
            (false, 1, false) => &["i have been taking {E} for {P}", "i have been on {E} for {P}"],
            (false, 1, true) => &["for {P} i have been taking {E}"],
            (false, 2, false) => &["i take {E} {P}", "i use {E} {P}"],
            (false, 2, true) => &["{P} i take {E}"],
            (_, _, false) => &["i have {E} {P}"],
            (_, _, true) => &["{P} i have {E}"],
        };
        self.choose(opts)
    }

    fn extra_clause(&self, p: &PropInstance) -> &'static str {
        match (self.world.task, p.ty) {
            (Task::Sx, 0) => "and it is {Q}",
            (Task::Sx, 1) | (Task::Rx, 1) => "for {Q}",
            (Task::Sx, 2) => "mostly in {Q}",
            (Task::Sx, 3) => "and it happens {Q}",
            (Task::Rx, 0) => "about {Q}",
            _ => "{Q}",
        }
    }

    fn follow_up(&mut self, p: &PropInstance) -> (&'static str, &'static str) {
        let (q, answers): (&'static str, &[&'static str]) = match (self.world.task, p.ty) {
            (Task::Sx, 0) => ("how bad is it ?", &["it is {P}", "{P} i would say"]),
            (Task::Sx, 1) => ("how long has that been going on ?", &["for {P}", "about {P} now"]),
            (Task::Sx, 2) => ("where exactly is it ?", &["in {P}", "it is in {P}"]),
            (Task::Sx, 3) => ("how often does it happen ?", &["{P}", "it happens {P}", "usually {P}"]),
            (Task::Rx, 0) => ("how much do you take ?", &["{P}", "i take {P}", "usually {P}"]),
            (Task::Rx, 1) => ("how long have you been taking it ?", &["for {P}", "about {P} now"]),
            (Task::Rx, 2) => ("how often do you take it ?", &["{P}", "i take it {P}"]),
            _ => ("can you tell me more about it ?", &["{P}", "it is {P}"]),
        };
        let a = self.choose(answers);
        (q, a)
    }

    /// Emits one segment; `entity` describes the mention and its value.
    fn segment(&mut self, entity: SpanSpec, entity_class: Option<usize>, with_props: bool) {
        let n_props = if with_props { self.n_props() } else { 0 };
        let tys: Vec<usize> = (0..n_props)
            .map(|_| self.rng.random_range(0..self.cfg.n_prop_classes))
            .collect();
        let props: Vec<PropInstance> = tys.into_iter().map(|t| self.make_prop(t, entity_class)).collect();
        let (same, cross): (Vec<_>, Vec<_>) = props.into_iter().partition(|p| !p.cross);

        let ent_key = entity.key;
        let entity_utt = match same.as_slice() {
            [] => {
                let t = match self.world.task {
                    Task::Sx => self.choose(&["i have been having {E}", "yeah i get {E}", "the {E} started recently", "i have had some {E}"]),
                    Task::Rx => self.choose(&["i take {E}", "i have been taking {E}", "i am on {E}", "they gave me {E}"]),
                };
                fill(Speaker::Pt, t, &[("{E}", &entity)])
            }
            [p] => {
                let t = self.same_utterance(p);
                fill(Speaker::Pt, t, &[("{E}", &entity), ("{P}", &p.spec)])
            }
            [p, q, ..] => {
                let t = format!("{} {}", self.same_utterance(p), self.extra_clause(q));
                fill(Speaker::Pt, &t, &[("{E}", &entity), ("{P}", &p.spec), ("{Q}", &q.spec)])
            }
        };
        for p in &same {
            self.relations.push((p.spec.key, ent_key));
        }
        self.plans.push(entity_utt);

        for (i, p) in cross.iter().enumerate() {
            // at least CROSS_TURN_DISTANCE utterances after the mention
            let fillers = if i == 0 { 1 + usize::from(self.rng.random::<f64>() < 0.3) } else { 0 };
            for _ in 0..fillers {
                self.filler();
            }
            let (q, a) = self.follow_up(p);
            self.plans.push(literal(Speaker::Dr, q));
            self.plans.push(fill(Speaker::Pt, a, &[("{P}", &p.spec)]));
            self.relations.push((p.spec.key, ent_key));
        }
    }

    fn sx_segment(&mut self, class: usize) {
        let forms = &self.world.symptom_forms[class];
        let form = forms[self.rng.random_range(0..forms.len())].clone();
        let n_status = self.cfg.n_status_classes;
        let x = self.rng.random::<f64>();
        let status = if x < 0.6 || n_status < 2 {
            0
        } else if x < 0.85 || n_status < 3 {
            1
        } else {
            self.rng.random_range(2..n_status)
        };
        let mk = |b: &mut Self| SpanSpec {
            key: b.key(),
            kind: SpanKind::Entity,
            words: form.clone(),
            attrs: [
                (heads::SYM_TYPE.to_string(), class),
                (heads::SYM_STATUS.to_string(), status),
            ]
            .into_iter()
            .collect(),
        };
        match status {
            0 => {
                if self.rng.random::<f64>() < 0.3 {
                    // doctor asks first; the patient's own mention carries the properties
                    let asked = mk(self);
                    let t = self.choose(&["do you have any {E} ?", "any {E} lately ?"]);
                    self.plans.push(fill(Speaker::Dr, t, &[("{E}", &asked)]));
                    let t = self.choose(&["yes", "yeah", "yes i do"]);
                    self.plans.push(literal(Speaker::Pt, t));
                }
                let e = mk(self);
                self.segment(e, Some(class), true);
            }
            1 => {
                let e = mk(self);
                if self.rng.random::<bool>() {
                    let t = self.choose(&["do you have any {E} ?", "any {E} lately ?"]);
                    self.plans.push(fill(Speaker::Dr, t, &[("{E}", &e)]));
                    let t = self.choose(&["no", "no not really"]);
                    self.plans.push(literal(Speaker::Pt, t));
                } else {
                    let t = self.choose(&["no {E} at all", "i do not have any {E}", "no i have not had any {E}"]);
                    self.plans.push(fill(Speaker::Pt, t, &[("{E}", &e)]));
                }
            }
            _ => {
                let e = mk(self);
                let t = self.choose(&["my mother has {E}", "my husband had {E}", "my son gets {E}"]);
                self.plans.push(fill(Speaker::Pt, t, &[("{E}", &e)]));
            }
        }
    }

    fn rx_segment(&mut self, med: usize) {
        let e = SpanSpec {
            key: self.key(),
            kind: SpanKind::Entity,
            words: self.world.meds[med].clone(),
            attrs: BTreeMap::new(),
        };
        if self.rng.random::<f64>() < 0.2 {
            let asked = SpanSpec {
                key: self.key(),
                kind: SpanKind::Entity,
                words: e.words.clone(),
                attrs: BTreeMap::new(),
            };
            self.plans.push(fill(Speaker::Dr, "are you still taking {E} ?", &[("{E}", &asked)]));
            let t = self.choose(&["yes", "yes i am"]);
            self.plans.push(literal(Speaker::Pt, t));
        }
        self.segment(e, None, true);
    }

    fn render(mut self, id: String, ontology: &TaskOntology) -> Result<AnnotatedConversation> {
        let mut utterances = Vec::with_capacity(self.plans.len());
        let mut spans: Vec<SpanAnnotation> = Vec::new();
        let mut key_to_span: BTreeMap<usize, usize> = BTreeMap::new();
        let mut offset = 0usize;
        let plans = std::mem::take(&mut self.plans);
        let kg = &self.world.kg;
        let token = |w: &str, pos: u8| Token {
            text: w.to_string(),
            pos: Some(pos),
            kg: kg.lookup(w),
        };
        for plan in plans {
            let mut toks: Vec<Token> = Vec::new();
            let n_pieces = plan.pieces.len();
            for (pi, piece) in plan.pieces.into_iter().enumerate() {
                match piece {
                    Piece::Word(w) => toks.push(token(&w, pos_of(&w))),
                    Piece::Span {
                        key,
                        kind,
                        words,
                        attrs,
                    } => {
                        let start = offset + toks.len();
                        for w in &words {
                            let pos = match (kind, self.world.task) {
                                (SpanKind::Entity, Task::Rx) => PROPN,
                                (SpanKind::Entity, Task::Sx) => match pos_of(w) {
                                    ADP => ADP,
                                    ADJ => ADJ,
                                    _ => NOUN,
                                },
                                _ => pos_of(w),
                            };
                            toks.push(token(w, pos));
                        }
                        key_to_span.insert(key, spans.len());
                        spans.push(SpanAnnotation {
                            kind,
                            start,
                            end: offset + toks.len(),
                            attributes: attrs,
                        });
                    }
                }
                let last = pi + 1 == n_pieces;
                if !last && self.rng.random::<f64>() < self.cfg.distractor_rate {
                    let d = self.world.distractors.choose(&mut self.rng).expect("non-empty").clone();
                    toks.push(token(&d, INTJ));
                }
            }
            offset += toks.len();
            utterances.push(Utterance {
                speaker: plan.speaker,
                tokens: toks,
            });
        }
        let relations = self
            .relations
            .iter()
            .map(|(p, e)| RelationAnnotation {
                property: key_to_span[p],
                entity: key_to_span[e],
            })
            .collect();
        AnnotatedConversation::new(id, utterances, spans, relations, ontology)
    }
}

/// Generates `cfg.n_conversations` annotated conversations and the matching knowledge graph.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Corpus, KnowledgeGraph)> {
    cfg.validate()?;
    let ontology = cfg.ontology()?;
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut conversations = Vec::with_capacity(cfg.n_conversations);
    for ci in 0..cfg.n_conversations {
        let conv_seed = rng.random::<u64>();
        let mut b = ConvBuilder {
            world: &world,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(conv_seed),
            plans: vec![],
            relations: vec![],
            next_key: 0,
        };
        let lo = (cfg.mean_utterances * 0.6).max(3.0);
        let hi = cfg.mean_utterances * 1.4;
        let target = b.rng.random_range(lo..=hi).round() as usize;
        b.plans.push(literal(Speaker::Dr, "how are you doing today ?"));
        let opener = b.choose(&["i am okay", "not too great", "pretty good thanks"]);
        b.plans.push(literal(Speaker::Pt, opener));
        let mut used = BTreeSet::new();
        while b.plans.len() < target {
            if b.rng.random::<f64>() < 0.35 {
                let t = b.choose(DR_TOPIC);
                b.plans.push(literal(Speaker::Dr, t));
            }
            match cfg.task {
                Task::Sx => {
                    let free: Vec<usize> = (0..cfg.n_entity_classes).filter(|k| !used.contains(k)).collect();
                    let class = match free.choose(&mut b.rng) {
                        Some(&k) => k,
                        None => b.rng.random_range(0..cfg.n_entity_classes),
                    };
                    used.insert(class);
                    b.sx_segment(class);
                }
                Task::Rx => {
                    if used.len() >= world.meds.len() {
                        used.clear();
                    }
                    let med = world.pick_med(&mut b.rng, &used);
                    used.insert(med);
                    b.rx_segment(med);
                }
            }
            if b.rng.random::<f64>() < 0.4 {
                b.filler();
            }
        }
        conversations.push(b.render(format!("{}-{ci:05}", cfg.task.name()), &ontology)?);
    }
    Ok((Corpus::new(ontology, conversations)?, world.kg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    fn bytes(c: &Corpus) -> Vec<u8> {
        let mut v = Vec::new();
        write_corpus(c, &mut v).unwrap();
        v
    }

    #[test]
    fn same_seed_same_bytes() {
        for task in [Task::Sx, Task::Rx] {
            let cfg = SynthConfig {
                n_conversations: 20,
                ..SynthConfig::desk(task, 42)
            };
            let (a, ka) = generate_synthetic(&cfg).unwrap();
            let (b, kb) = generate_synthetic(&cfg).unwrap();
            assert_eq!(bytes(&a), bytes(&b));
            assert_eq!(ka, kb);
            let (c, _) = generate_synthetic(&SynthConfig { seed: 43, ..cfg }).unwrap();
            assert_ne!(bytes(&a), bytes(&c));
        }
    }

    #[test]
    fn zero_cross_turn_keeps_relations_in_one_utterance() {
        for task in [Task::Sx, Task::Rx] {
            let cfg = SynthConfig {
                n_conversations: 60,
                cross_turn_prob: 0.0,
                ..SynthConfig::desk(task, 3)
            };
            let (c, _) = generate_synthetic(&cfg).unwrap();
            let mut n = 0;
            for conv in &c.conversations {
                for r in &conv.relations {
                    assert_eq!(conv.relation_turn_distance(r), 0);
                    n += 1;
                }
            }
            assert!(n > 50);
        }
    }

    #[test]
    fn cross_turn_fraction_tracks_config() {
        for task in [Task::Sx, Task::Rx] {
            let cfg = SynthConfig {
                n_conversations: 100,
                ..SynthConfig::desk(task, 8)
            };
            let (c, _) = generate_synthetic(&cfg).unwrap();
            let total: usize = c.conversations.iter().map(|c| c.relations.len()).sum();
            let f = c.cross_turn_fraction().unwrap();
            assert!((0.06..=0.16).contains(&f), "{task:?}: {f} over {total}");
            // every relation is either in one utterance or ≥3 apart
            for conv in &c.conversations {
                for r in &conv.relations {
                    let d = conv.relation_turn_distance(r);
                    assert!(d == 0 || d >= CROSS_TURN_DISTANCE);
                }
            }
        }
    }

    #[test]
    fn cross_turn_fraction_within_tolerance_for_large_samples() {
        for (p, seed) in [(0.11, 1), (0.3, 2), (0.5, 3)] {
            let cfg = SynthConfig {
                n_conversations: 200,
                cross_turn_prob: p,
                ..SynthConfig::desk(Task::Sx, seed)
            };
            let (c, _) = generate_synthetic(&cfg).unwrap();
            let total: usize = c.conversations.iter().map(|c| c.relations.len()).sum();
            assert!(total >= 500, "{total}");
            let f = c.cross_turn_fraction().unwrap();
            assert!((f - p).abs() <= 0.05, "p={p} got {f}");
        }
    }

    #[test]
    fn annotations_and_kg_are_consistent() {
        let cfg = SynthConfig {
            n_conversations: 50,
            ..SynthConfig::desk(Task::Rx, 5)
        };
        let (c, kg) = generate_synthetic(&cfg).unwrap();
        kg.validate().unwrap();
        assert_eq!(kg.n_types(), 8);
        for conv in &c.conversations {
            conv.validate(&c.ontology).unwrap();
            for t in conv.tokens() {
                assert_eq!(t.kg, kg.lookup(&t.text));
                assert!(t.pos.is_some());
            }
            // medication tokens always resolve to medication nodes
            for s in conv.spans.iter().filter(|s| s.kind == SpanKind::Entity) {
                let toks: Vec<_> = conv.tokens().collect();
                for t in &toks[s.start..s.end] {
                    let node = kg.node(t.kg.unwrap()).unwrap();
                    assert!(node.type_ids.contains(&T_MEDICATION));
                }
            }
        }
    }

    #[test]
    fn paper_scale_ontology_generates() {
        let cfg = SynthConfig {
            n_conversations: 5,
            n_entity_classes: 186,
            ..SynthConfig::desk(Task::Sx, 1)
        };
        let (c, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(c.ontology.n_entity(), 186);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = SynthConfig::desk(Task::Sx, 1);
        cfg.cross_turn_prob = 1.5;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = SynthConfig::desk(Task::Sx, 1);
        cfg.n_conversations = 0;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
