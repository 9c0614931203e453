use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub node_id: u32,
    pub embedding: Vec<f64>,
    pub type_ids: Vec<usize>,
}

/// Node embeddings, node types and the word → node map used for feature fusion.
/// Node embeddings are frozen; only the UNK vector (owned by the encoder) is learned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub format_version: u32,
    pub dim: usize,
    pub type_names: Vec<String>,
    pub nodes: Vec<KgNode>,
    pub words: BTreeMap<String, u32>,
}

impl KnowledgeGraph {
    pub fn empty(dim: usize, type_names: Vec<String>) -> Self {
        Self {
            format_version: KG_FORMAT_VERSION,
            dim,
            type_names,
            nodes: vec![],
            words: BTreeMap::new(),
        }
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(&mut self, embedding: Vec<f64>, type_ids: Vec<usize>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(KgNode {
            node_id: id,
            embedding,
            type_ids,
        });
        id
    }

    pub fn node(&self, id: u32) -> Option<&KgNode> {
        self.nodes.get(id as usize)
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.words.get(&word.to_lowercase()).copied()
    }

    /// Multi-hot type vector of a node (all zeros for unmapped tokens).
    pub fn type_vector(&self, id: Option<u32>) -> Vec<f64> {
        let mut v = vec![0.0; self.n_types()];
        if let Some(n) = id.and_then(|i| self.node(i)) {
            for &t in &n.type_ids {
                v[t] = 1.0;
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("knowledge graph: {m}")));
        if self.format_version != KG_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "knowledge graph",
                found: self.format_version,
                expected: KG_FORMAT_VERSION,
            });
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.node_id as usize != i {
                return bad(format!("node {i} has id {}", n.node_id));
            }
            if n.embedding.len() != self.dim {
                return bad(format!("node {i} embedding has {} values, expected {}", n.embedding.len(), self.dim));
            }
            if let Some(t) = n.type_ids.iter().find(|&&t| t >= self.n_types()) {
                return bad(format!("node {i} type {t} out of range"));
            }
        }
        if let Some((w, id)) = self.words.iter().find(|(_, &id)| id as usize >= self.nodes.len()) {
            return bad(format!("word {w:?} maps to missing node {id}"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let kg: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        kg.validate()?;
        Ok(kg)
    }
}
