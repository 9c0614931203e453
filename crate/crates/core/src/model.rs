//! The assembled extractor: encoder, span CRF, attribute heads and relation layer,
//! with component ablations and a deterministic binary checkpoint.
//!
//! Checkpoint layout (little endian): magic `RSATCKPT`, `u32` version, `u64` length
//! of a JSON header (config, ontology, vocabulary, knowledge graph), the header,
//! `u64` parameter count, then per parameter: `u32` name length, name bytes,
//! `u32` rank, `u64` extents, `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{aggregate, AttributeHead, Pooling};
use crate::corpus::{heads, AnnotatedConversation, SpanKind, Task, TaskOntology};
use crate::encoder::{Encoded, Encoder, EncoderConfig, KnowledgeGraph, TokenFeatures, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Forward, ParamStore, Tensor, Var};
use crate::relation_memory::{select_entity, EntityValue, MemoryBuffer, RelationLayer, ValueEmbedding};
use crate::span_crf::{extract_spans, CrfLayer, Span, SPAN_KINDS};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Component switches. Every flag `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_kg: bool,
    /// Memory entries carry the contextual span vector, not only the value embedding.
    pub use_context: bool,
    /// Relation layer over the memory buffer; otherwise a cross-product head on property spans.
    pub use_buffer: bool,
    /// Symptom status head.
    pub multitask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        use_kg: true,
        use_context: true,
        use_buffer: true,
        multitask: true,
    };

    pub fn validate(&self, task: Task) -> Result<()> {
        if task == Task::Rx && !self.use_buffer {
            return Err(Error::InvalidConfig(
                "the medication task has no model without the memory buffer".into(),
            ));
        }
        Ok(())
    }

    /// Cumulative ablation rows valid for `task`, in table order.
    pub fn grid(task: Task) -> Vec<(&'static str, Ablation)> {
        let full = Self::FULL;
        let no_kg = Self { use_kg: false, ..full };
        let no_ctx = Self { use_context: false, ..no_kg };
        let no_buf = Self { use_buffer: false, ..no_ctx };
        let no_mt = Self { multitask: false, ..no_buf };
        let rows = vec![
            ("full", full),
            ("-KG", no_kg),
            ("-KG-Context", no_ctx),
            ("-KG-Context-Buffer", no_buf),
            ("-KG-Context-Buffer-Multitask", no_mt),
        ];
        rows.into_iter().filter(|(_, a)| a.validate(task).is_ok()).filter(|(_, a)| task == Task::Sx || a.multitask).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Memory width; the encoder output width when absent.
    pub d_mem: Option<usize>,
    pub pooling: Pooling,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            d_mem: None,
            pooling: Pooling::Mean,
            ablation: Ablation::FULL,
        }
    }

    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            ..Self::desk()
        }
    }
}

/// Where spans come from when predicting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanSource {
    /// Viterbi-decoded spans with predicted attributes.
    Decoded,
    /// Annotated spans and attributes; only relations are predicted.
    Gold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedSpan {
    pub span: Span,
    pub attributes: BTreeMap<String, usize>,
    /// Entity span index selected for a property.
    pub link: Option<usize>,
    /// Entity value of an entity span, or of the entity a property was related to.
    pub value: Option<EntityValue>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prediction {
    pub spans: Vec<PredictedSpan>,
    /// Memory entries built for this conversation.
    pub buffer_len: usize,
}

/// Lowercased words of `span`.
pub fn span_words(words: &[String], span: &Span) -> Vec<String> {
    words[span.start..span.end].iter().map(|w| w.to_lowercase()).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    ontology: TaskOntology,
    vocab: Vocab,
    kg: KnowledgeGraph,
}

pub struct RsatModel {
    pub config: ModelConfig,
    pub ontology: TaskOntology,
    pub vocab: Vocab,
    pub kg: KnowledgeGraph,
    pub store: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) crf: CrfLayer,
    pub(crate) sym_type: Option<AttributeHead>,
    pub(crate) sym_status: Option<AttributeHead>,
    pub(crate) prop_type: Option<AttributeHead>,
    pub(crate) relation: Option<RelationLayer>,
    /// `n_entity × n_prop` classes on property spans when the buffer is ablated.
    pub(crate) cross: Option<AttributeHead>,
}

/// Per-conversation encoder output plus CRF emissions.
pub(crate) struct Pass {
    pub enc: Encoded,
    pub emissions: Var,
}

impl RsatModel {
    pub fn new(mut config: ModelConfig, ontology: TaskOntology, vocab: Vocab, kg: KnowledgeGraph, seed: u64) -> Result<Self> {
        let task = ontology.task;
        config.ablation.validate(task)?;
        config.encoder.use_kg = config.ablation.use_kg;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), vocab.size(), &kg, &mut store, &mut rng)?;
        let d = encoder.out_dim();
        let crf = CrfLayer::new(SPAN_KINDS.len(), d, &mut store, &mut rng);
        let ne = ontology.entity_classes.len();
        let np = ontology.prop_classes.len();
        let ab = config.ablation;
        let (sym_type, sym_status) = match task {
            Task::Sx => (
                Some(AttributeHead::new(heads::SYM_TYPE, ne, d, &mut store, &mut rng)?),
                if ab.multitask {
                    Some(AttributeHead::new(heads::SYM_STATUS, ontology.status_classes.len(), d, &mut store, &mut rng)?)
                } else {
                    None
                },
            ),
            Task::Rx => (None, None),
        };
        let (prop_type, relation, cross) = if ab.use_buffer {
            let d_mem = config.d_mem.unwrap_or(d);
            if d_mem == 0 {
                return Err(Error::InvalidConfig("d_mem must be positive".into()));
            }
            let labels = if task == Task::Sx { ne } else { 0 };
            (
                Some(AttributeHead::new(heads::PROP_TYPE, np, d, &mut store, &mut rng)?),
                Some(RelationLayer::new(d, config.encoder.word_dim, d_mem, labels, ab.use_context, &mut store, &mut rng)),
                None,
            )
        } else {
            (None, None, Some(AttributeHead::new("cross", ne * np, d, &mut store, &mut rng)?))
        };
        Ok(Self {
            config,
            ontology,
            vocab,
            kg,
            store,
            encoder,
            crf,
            sym_type,
            sym_status,
            prop_type,
            relation,
            cross,
        })
    }

    pub fn task(&self) -> Task {
        self.ontology.task
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn features(&self, conv: &AnnotatedConversation) -> TokenFeatures {
        TokenFeatures::of(conv, &self.vocab)
    }

    pub(crate) fn pass(&self, f: &mut Forward, feats: &TokenFeatures) -> Result<Pass> {
        let enc = self.encoder.encode(f, feats)?;
        let emissions = self.crf.emissions(f, enc.h)?;
        Ok(Pass { enc, emissions })
    }

    pub(crate) fn decode_spans(&self, f: &Forward, pass: &Pass) -> Result<Vec<Span>> {
        let tags = self.crf.decode(f.store(), f.g.value(pass.emissions))?;
        Ok(extract_spans(&tags))
    }

    pub(crate) fn pooled(&self, f: &mut Forward, pass: &Pass, span: &Span) -> Result<Var> {
        aggregate(f, pass.enc.h, span.start, span.end, self.config.pooling)
    }

    /// Heads applied to spans of `kind`, paired with their annotation names.
    pub(crate) fn heads_for(&self, kind: SpanKind) -> Vec<&AttributeHead> {
        match kind {
            SpanKind::Entity => [&self.sym_type, &self.sym_status].into_iter().flatten().collect(),
            SpanKind::Property => [&self.prop_type, &self.cross].into_iter().flatten().collect(),
        }
    }

    pub(crate) fn relation(&self) -> Option<&RelationLayer> {
        self.relation.as_ref()
    }

    pub(crate) fn cross(&self) -> Option<&AttributeHead> {
        self.cross.as_ref()
    }

    pub(crate) fn crf(&self) -> &CrfLayer {
        &self.crf
    }

    pub(crate) fn n_prop(&self) -> usize {
        self.ontology.prop_classes.len()
    }

    /// Value and value-embedding source of an entity span with symptom class `class`.
    pub(crate) fn entity_value(&self, words: &[String], span: &Span, class: Option<usize>) -> Result<(EntityValue, ValueEmbedding)> {
        match self.task() {
            Task::Sx => {
                let c = class.ok_or_else(|| Error::InvalidConfig("symptom entity without a class".into()))?;
                Ok((EntityValue::Class(c), ValueEmbedding::Label(c)))
            }
            Task::Rx => Ok((EntityValue::Text(span_words(words, span)), ValueEmbedding::Words)),
        }
    }

    /// Runs the full pipeline on one conversation.
    pub fn predict(&self, conv: &AnnotatedConversation, source: SpanSource) -> Result<Prediction> {
        let feats = self.features(conv);
        let words = conv.words();
        let mut f = Forward::eval(&self.store);
        let pass = self.pass(&mut f, &feats)?;
        let mut out: Vec<PredictedSpan> = match source {
            SpanSource::Decoded => self
                .decode_spans(&f, &pass)?
                .into_iter()
                .map(|span| PredictedSpan {
                    span,
                    attributes: BTreeMap::new(),
                    link: None,
                    value: None,
                })
                .collect(),
            SpanSource::Gold => conv
                .spans
                .iter()
                .map(|s| PredictedSpan {
                    span: Span::new(s.start, s.end, s.kind),
                    attributes: s.attributes.clone(),
                    link: None,
                    value: None,
                })
                .collect(),
        };
        let mut pooled = Vec::with_capacity(out.len());
        for p in &out {
            pooled.push(self.pooled(&mut f, &pass, &p.span)?);
        }
        if source == SpanSource::Decoded {
            for (p, &x) in out.iter_mut().zip(&pooled) {
                for head in self.heads_for(p.span.kind) {
                    let z = head.logits(&mut f, x)?;
                    let c = argmax(f.g.value(z).data()).expect("heads have at least two classes");
                    p.attributes.insert(head.name.clone(), c);
                }
            }
        }
        let entities: Vec<usize> = (0..out.len()).filter(|&i| out[i].span.kind == SpanKind::Entity).collect();
        let props: Vec<usize> = (0..out.len()).filter(|&i| out[i].span.kind == SpanKind::Property).collect();
        let mut mentions = Vec::with_capacity(entities.len());
        for &i in &entities {
            let class = out[i].attributes.get(heads::SYM_TYPE).copied();
            let (v, e) = self.entity_value(&words, &out[i].span, class)?;
            out[i].value = Some(v.clone());
            mentions.push((out[i].span, v, e));
        }
        let mut buffer_len = 0;
        if let Some(rel) = &self.relation {
            let buffer = rel.build_buffer(&mut f, pass.enc.h, pass.enc.words, &mentions)?;
            buffer_len = buffer.len();
            if !props.is_empty() {
                let spans: Vec<Span> = props.iter().map(|&i| out[i].span).collect();
                let y = rel.property_reprs(&mut f, pass.enc.h, pass.enc.words, &spans)?;
                if let Some(sc) = rel.scores(&mut f, y, &buffer)? {
                    let sc = f.g.value(sc);
                    for (r, &i) in props.iter().enumerate() {
                        let k = select_entity(sc.row(r)).expect("buffer is non-empty");
                        out[i].link = Some(entities[k]);
                        out[i].value = Some(mentions[k].1.clone());
                    }
                }
            }
        } else if let Some(cross) = &self.cross {
            let np = self.n_prop();
            for &i in &props {
                let z = cross.logits(&mut f, pooled[i])?;
                let c = argmax(f.g.value(z).data()).expect("non-empty cross head");
                out[i].value = Some(EntityValue::Class(c / np));
                out[i].attributes.insert(heads::PROP_TYPE.to_string(), c % np);
            }
        }
        Ok(Prediction { spans: out, buffer_len })
    }

    /// Relation layer alone over precomputed memory, for timing.
    pub fn relation_pass(&self, conv: &AnnotatedConversation, h: &Tensor, words: &Tensor) -> Result<(usize, Option<Tensor>)> {
        let rel = self
            .relation
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no relation layer".into()))?;
        let text = conv.words();
        let mut f = Forward::eval(&self.store);
        let hv = f.g.constant(h.clone());
        let wv = f.g.constant(words.clone());
        let mut mentions = Vec::new();
        let mut props = Vec::new();
        for s in &conv.spans {
            let span = Span::new(s.start, s.end, s.kind);
            match s.kind {
                SpanKind::Entity => {
                    let (v, e) = self.entity_value(&text, &span, s.attr(heads::SYM_TYPE))?;
                    mentions.push((span, v, e));
                }
                SpanKind::Property => props.push(span),
            }
        }
        let buffer: MemoryBuffer = rel.build_buffer(&mut f, hv, wv, &mentions)?;
        if props.is_empty() {
            return Ok((buffer.len(), None));
        }
        let y = rel.property_reprs(&mut f, hv, wv, &props)?;
        let sc = rel.scores(&mut f, y, &buffer)?;
        Ok((buffer.len(), sc.map(|v| f.g.value(v).clone())))
    }

    /// Encoder states and word embeddings of one conversation (evaluation mode).
    pub fn encode_values(&self, conv: &AnnotatedConversation) -> Result<(Tensor, Tensor)> {
        let feats = self.features(conv);
        let mut f = Forward::eval(&self.store);
        let enc = self.encoder.encode(&mut f, &feats)?;
        Ok((f.g.value(enc.h).clone(), f.g.value(enc.words).clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            ontology: self.ontology.clone(),
            vocab: self.vocab.clone(),
            kg: self.kg.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for p in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let mut model = Self::new(header.config, header.ontology, header.vocab, header.kg, 0)?;
        let count = r.u64()? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!("{count} parameters, model has {}", model.store.len())));
        }
        for i in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let p = model.store.get_mut(crate::numerics::ParamId(i));
            if p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {i} is {name} {shape:?}, expected {} {:?}", p.name, p.value.shape())));
            }
            for v in p.value.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn small(task: Task, ablation: Ablation) -> (RsatModel, crate::corpus::Corpus) {
        let (corpus, kg) = generate_synthetic(&SynthConfig {
            n_conversations: 3,
            ..SynthConfig::desk(task, 4)
        })
        .unwrap();
        let vocab = Vocab::build(&corpus, 1);
        let mut cfg = ModelConfig::desk();
        cfg.encoder.cell = 8;
        cfg.encoder.ff = vec![8];
        cfg.encoder.word_dim = 6;
        cfg.ablation = ablation;
        let m = RsatModel::new(cfg, corpus.ontology.clone(), vocab, kg, 9).unwrap();
        (m, corpus)
    }

    #[test]
    fn grid_rows() {
        let sx: Vec<_> = Ablation::grid(Task::Sx).into_iter().map(|r| r.0).collect();
        assert_eq!(sx.len(), 5);
        let rx: Vec<_> = Ablation::grid(Task::Rx).into_iter().map(|r| r.0).collect();
        assert_eq!(rx, ["full", "-KG", "-KG-Context"]);
        let no_buf = Ablation { use_buffer: false, ..Ablation::FULL };
        assert!(no_buf.validate(Task::Rx).is_err());
        assert!(no_buf.validate(Task::Sx).is_ok());
    }

    #[test]
    fn checkpoint_round_trips_bytes() {
        for task in [Task::Sx, Task::Rx] {
            let (m, c) = small(task, Ablation::FULL);
            let bytes = m.to_bytes().unwrap();
            let back = RsatModel::from_bytes(&bytes).unwrap();
            assert_eq!(back.store, m.store);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let conv = &c.conversations[0];
            assert_eq!(back.predict(conv, SpanSource::Decoded).unwrap(), m.predict(conv, SpanSource::Decoded).unwrap());
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let (m, _) = small(Task::Rx, Ablation::FULL);
        let bytes = m.to_bytes().unwrap();
        assert!(RsatModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RsatModel::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(RsatModel::from_bytes(&bad), Err(Error::FormatVersion { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(RsatModel::from_bytes(&long).is_err());
    }

    #[test]
    fn ablations_change_components() {
        let (m, c) = small(Task::Sx, Ablation::grid(Task::Sx)[4].1);
        assert!(m.relation.is_none() && m.cross.is_some() && m.sym_status.is_none());
        assert!(m.store.id("enc.kg_unk").is_none());
        let p = m.predict(&c.conversations[0], SpanSource::Gold).unwrap();
        for s in p.spans.iter().filter(|s| s.span.kind == SpanKind::Property) {
            assert!(matches!(s.value, Some(EntityValue::Class(_))));
        }
        let (m, _) = small(Task::Sx, Ablation { use_context: false, ..Ablation::FULL });
        assert!(m.store.id("rel.ps").is_none());
    }

    #[test]
    fn gold_source_links_every_property_and_fills_buffer() {
        let (m, c) = small(Task::Rx, Ablation::FULL);
        for conv in &c.conversations {
            let p = m.predict(conv, SpanSource::Gold).unwrap();
            let ents = conv.spans.iter().filter(|s| s.kind == SpanKind::Entity).count();
            assert_eq!(p.buffer_len, ents);
            for s in &p.spans {
                if s.span.kind == SpanKind::Property {
                    let l = s.link.unwrap();
                    assert_eq!(p.spans[l].span.kind, SpanKind::Entity);
                }
            }
        }
    }
}
