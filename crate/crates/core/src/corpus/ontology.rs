use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extraction task a corpus or model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Symptoms: closed-set entity classes with a status, plus symptom properties.
    Sx,
    /// Medications: open-set entities (verbatim text) plus medication properties.
    Rx,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sx => "sx",
            Task::Rx => "rx",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sx" => Ok(Task::Sx),
            "rx" => Ok(Task::Rx),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Names of the attribute heads stored on span annotations.
pub mod heads {
    pub const SYM_TYPE: &str = "symType";
    pub const SYM_STATUS: &str = "symStatus";
    pub const PROP_TYPE: &str = "propType";
}

const SX_ENTITY_NAMES: &[&str] = &[
    "sym/msk/pain",
    "sym/resp/cough",
    "sym/neuro/headache",
    "sym/gi/nausea",
    "sym/const/fever",
    "sym/resp/shortness_of_breath",
    "sym/derm/rash",
    "sym/neuro/dizziness",
    "sym/const/fatigue",
    "sym/ent/sore_throat",
    "sym/gi/diarrhea",
    "sym/psych/anxiety",
];

const SX_PROP_NAMES: &[&str] = &[
    "symprop/severity",
    "symprop/duration",
    "symprop/location",
    "symprop/frequency",
];

const SX_STATUS_NAMES: &[&str] = &["experienced", "not_experienced", "other"];

const RX_PROP_NAMES: &[&str] = &["medsprop/dosage", "medsprop/duration", "medsprop/frequency"];

/// Label inventories of one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOntology {
    pub task: Task,
    pub entity_classes: Vec<String>,
    pub status_classes: Vec<String>,
    pub prop_classes: Vec<String>,
}

/// Serialized form: the class names are a deterministic function of the counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyCounts {
    pub entity_classes: usize,
    pub status_classes: usize,
    pub prop_classes: usize,
}

fn names(base: &[&str], n: usize, fallback: &str) -> Vec<String> {
    (0..n)
        .map(|i| match base.get(i) {
            Some(s) => s.to_string(),
            None => format!("{fallback}{i:03}"),
        })
        .collect()
}

impl TaskOntology {
    pub fn symptoms(n_entity: usize, n_status: usize, n_prop: usize) -> Result<Self> {
        if n_entity < 2 || n_status < 2 || n_prop < 2 {
            return Err(Error::InvalidConfig(format!(
                "symptom ontology needs at least 2 classes per head, got {n_entity}/{n_status}/{n_prop}"
            )));
        }
        Ok(Self {
            task: Task::Sx,
            entity_classes: names(SX_ENTITY_NAMES, n_entity, "sym/other/"),
            status_classes: names(SX_STATUS_NAMES, n_status, "status/other"),
            prop_classes: names(SX_PROP_NAMES, n_prop, "symprop/other"),
        })
    }

    pub fn medications(n_prop: usize) -> Result<Self> {
        if n_prop < 2 {
            return Err(Error::InvalidConfig(format!(
                "medication ontology needs at least 2 property classes, got {n_prop}"
            )));
        }
        Ok(Self {
            task: Task::Rx,
            entity_classes: vec![],
            status_classes: vec![],
            prop_classes: names(RX_PROP_NAMES, n_prop, "medsprop/other"),
        })
    }

    /// Small inventories that are learnable from a few hundred conversations.
    pub fn desk(task: Task) -> Self {
        match task {
            Task::Sx => Self::symptoms(12, 3, 4).expect("valid"),
            Task::Rx => Self::medications(3).expect("valid"),
        }
    }

    /// Full-size inventories (186 symptom classes).
    pub fn paper(task: Task) -> Self {
        match task {
            Task::Sx => Self::symptoms(186, 3, 4).expect("valid"),
            Task::Rx => Self::medications(3).expect("valid"),
        }
    }

    pub fn from_counts(task: Task, c: OntologyCounts) -> Result<Self> {
        match task {
            Task::Sx => Self::symptoms(c.entity_classes, c.status_classes, c.prop_classes),
            Task::Rx => {
                if c.entity_classes != 0 || c.status_classes != 0 {
                    return Err(Error::InvalidConfig(
                        "medication ontology has no entity or status classes".into(),
                    ));
                }
                Self::medications(c.prop_classes)
            }
        }
    }

    pub fn counts(&self) -> OntologyCounts {
        OntologyCounts {
            entity_classes: self.entity_classes.len(),
            status_classes: self.status_classes.len(),
            prop_classes: self.prop_classes.len(),
        }
    }

    pub fn n_entity(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn n_status(&self) -> usize {
        self.status_classes.len()
    }

    pub fn n_prop(&self) -> usize {
        self.prop_classes.len()
    }

    /// Class count of a named head, if the task uses it.
    pub fn head_size(&self, head: &str) -> Option<usize> {
        let n = match head {
            heads::SYM_TYPE => self.n_entity(),
            heads::SYM_STATUS => self.n_status(),
            heads::PROP_TYPE => self.n_prop(),
            _ => 0,
        };
        (n > 0).then_some(n)
    }

    pub fn class_name(&self, head: &str, id: usize) -> &str {
        match head {
            heads::SYM_TYPE => &self.entity_classes[id],
            heads::SYM_STATUS => &self.status_classes[id],
            _ => &self.prop_classes[id],
        }
    }
}
