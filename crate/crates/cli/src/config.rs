//! Run configuration: profile defaults, then the flat TOML file, then `--set` pairs, then flags.

use std::path::{Path, PathBuf};

use rsat::attributes::Pooling;
use rsat::corpus::{SynthConfig, Task, TaskOntology};
use rsat::evaluation::RelationMatch;
use rsat::model::ModelConfig;
use rsat::training::TrainConfig;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub task: Task,
    pub profile: Profile,
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthConfig,
    /// Train, dev and test fractions used by `generate`.
    pub split: (f64, f64, f64),
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub relation_match: RelationMatch,
    pub paths: Paths,
}

/// Flags shared by every command; `None` leaves the file or profile value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub workers: Option<usize>,
    pub task: Option<Task>,
    pub set: Vec<String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    s.parse().map_err(|_| usage(format!("unknown task {s:?} (expected sx or rx)")))
}

fn parse_profile(s: &str) -> Result<Profile, CliError> {
    match s {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        _ => Err(usage(format!("unknown profile {s:?} (expected desk or paper)"))),
    }
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| usage(format!("{}: {}", path.display(), e.message())))
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to a bare string.
fn parse_pair(pair: &str) -> Result<(String, Value), CliError> {
    let (k, v) = pair
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

fn f64_of(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(usage(format!("{key} must be a number"))),
    }
}

fn usize_of(key: &str, v: &Value) -> Result<usize, CliError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(usage(format!("{key} must be a non-negative integer"))),
    }
}

fn bool_of(key: &str, v: &Value) -> Result<bool, CliError> {
    v.as_bool().ok_or_else(|| usage(format!("{key} must be true or false")))
}

fn str_of<'a>(key: &str, v: &'a Value) -> Result<&'a str, CliError> {
    v.as_str().ok_or_else(|| usage(format!("{key} must be a string")))
}

impl RunConfig {
    pub fn defaults(task: Task, profile: Profile) -> Self {
        let (synth, train, model) = match profile {
            Profile::Desk => (SynthConfig::desk(task, 0), TrainConfig::desk(), ModelConfig::desk()),
            Profile::Paper => {
                let o = TaskOntology::paper(task);
                let synth = SynthConfig {
                    n_entity_classes: o.n_entity(),
                    n_status_classes: o.n_status(),
                    n_prop_classes: o.n_prop(),
                    ..SynthConfig::desk(task, 0)
                };
                (synth, TrainConfig::paper(), ModelConfig::paper())
            }
        };
        Self {
            task,
            profile,
            seed: 0,
            workers: 1,
            synth,
            split: (300.0 / 450.0, 50.0 / 450.0, 100.0 / 450.0),
            train,
            model,
            relation_match: RelationMatch::Value,
            paths: Paths::default(),
        }
    }

    /// Resolves the layered configuration.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut file = match &o.config {
            Some(p) => read_table(p)?,
            None => Table::new(),
        };
        let from_file = |file: &mut Table, key: &str| -> Result<Option<String>, CliError> {
            file.remove(key).map(|v| str_of(key, &v).map(String::from)).transpose()
        };
        let mut pairs = Vec::with_capacity(o.set.len());
        for p in &o.set {
            pairs.push(parse_pair(p)?);
        }
        let set_str = |key: &str| -> Result<Option<String>, CliError> {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| str_of(key, v).map(String::from))
                .transpose()
        };
        let task = match (o.task, set_str("task")?, from_file(&mut file, "task")?) {
            (Some(t), _, _) => t,
            (None, Some(s), _) | (None, None, Some(s)) => parse_task(&s)?,
            (None, None, None) => Task::Sx,
        };
        let profile = match (o.profile, set_str("profile")?, from_file(&mut file, "profile")?) {
            (Some(p), _, _) => p,
            (None, Some(s), _) | (None, None, Some(s)) => parse_profile(&s)?,
            (None, None, None) => Profile::Desk,
        };
        let mut cfg = Self::defaults(task, profile);
        for (k, v) in &file {
            cfg.apply(k, v)?;
        }
        for (k, v) in &pairs {
            if k != "task" && k != "profile" {
                cfg.apply(k, v)?;
            }
        }
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(w) = o.workers {
            cfg.workers = w;
        }
        cfg.finish()
    }

    fn finish(mut self) -> Result<Self, CliError> {
        if self.workers == 0 {
            return Err(usage("workers must be at least 1"));
        }
        self.synth.seed = self.seed;
        self.synth.task = self.task;
        self.train.seed = self.seed;
        self.train.workers = self.workers;
        self.synth.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.model.encoder.validate().map_err(|e| usage(e.to_string()))?;
        self.model.ablation.validate(self.task).map_err(|e| usage(e.to_string()))?;
        let (a, b, c) = self.split;
        if a <= 0.0 || b < 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(usage("train/dev/test fractions must be positive and sum to 1"));
        }
        Ok(self)
    }

    /// Applies one flat key.
    pub fn apply(&mut self, key: &str, v: &Value) -> Result<(), CliError> {
        let s = &mut self.synth;
        let t = &mut self.train;
        let m = &mut self.model;
        let path = |v: &Value| str_of(key, v).map(|p| Some(PathBuf::from(p)));
        match key {
            "task" | "profile" => {}
            "seed" => self.seed = usize_of(key, v)? as u64,
            "workers" => self.workers = usize_of(key, v)?,

            "n_conversations" => s.n_conversations = usize_of(key, v)?,
            "n_entity_classes" => s.n_entity_classes = usize_of(key, v)?,
            "n_status_classes" => s.n_status_classes = usize_of(key, v)?,
            "n_prop_classes" => s.n_prop_classes = usize_of(key, v)?,
            "mean_utterances" => s.mean_utterances = f64_of(key, v)?,
            "cross_turn_prob" => s.cross_turn_prob = f64_of(key, v)?,
            "distractor_rate" => s.distractor_rate = f64_of(key, v)?,
            "vocab_size" => s.vocab_size = usize_of(key, v)?,
            "n_medications" => s.n_medications = usize_of(key, v)?,
            "kg_dim" => s.kg_dim = usize_of(key, v)?,
            "kg_general_fraction" => s.kg_general_fraction = f64_of(key, v)?,
            "train_fraction" => self.split.0 = f64_of(key, v)?,
            "dev_fraction" => self.split.1 = f64_of(key, v)?,
            "test_fraction" => self.split.2 = f64_of(key, v)?,

            "alpha" => t.alpha = f64_of(key, v)?,
            "lr" => t.lr = f64_of(key, v)?,
            "l2" => t.l2 = f64_of(key, v)?,
            "noise_std" => t.noise_std = f64_of(key, v)?,
            "epochs" => t.epochs = usize_of(key, v)?,
            "p_start" => t.curriculum.p_start = f64_of(key, v)?,
            "p_end" => t.curriculum.p_end = f64_of(key, v)?,
            "decay_epochs" => t.curriculum.decay_epochs = Some(usize_of(key, v)?),
            "patience" => t.patience = usize_of(key, v)?,
            "accumulate" => t.accumulate = usize_of(key, v)?,
            // 0 disables clipping
            "clip_norm" => t.clip_norm = Some(f64_of(key, v)?).filter(|c| *c > 0.0),
            "pretrain_epochs" => t.pretrain_epochs = usize_of(key, v)?,
            "min_count" => t.min_count = usize_of(key, v)?,

            "word_dim" => m.encoder.word_dim = usize_of(key, v)?,
            "cell" => m.encoder.cell = usize_of(key, v)?,
            "layers" => m.encoder.layers = usize_of(key, v)?,
            "ff" => {
                let arr = v.as_array().ok_or_else(|| usage("ff must be an array of widths"))?;
                m.encoder.ff = arr.iter().map(|x| usize_of(key, x)).collect::<Result<_, _>>()?;
            }
            "dropout" => m.encoder.dropout = f64_of(key, v)?,
            "word_dropout" => m.encoder.word_dropout = f64_of(key, v)?,
            "use_pos" => m.encoder.use_pos = bool_of(key, v)?,

            "d_mem" => m.d_mem = Some(usize_of(key, v)?),
            "pooling" => {
                m.pooling = match str_of(key, v)? {
                    "mean" => Pooling::Mean,
                    "sum" => Pooling::Sum,
                    p => return Err(usage(format!("unknown pooling {p:?}"))),
                }
            }
            "use_kg" => m.ablation.use_kg = bool_of(key, v)?,
            "use_context" => m.ablation.use_context = bool_of(key, v)?,
            "use_buffer" => m.ablation.use_buffer = bool_of(key, v)?,
            "multitask" => m.ablation.multitask = bool_of(key, v)?,
            "relation_match" => {
                self.relation_match = match str_of(key, v)? {
                    "value" => RelationMatch::Value,
                    "mention" => RelationMatch::Mention,
                    r => return Err(usage(format!("unknown relation_match {r:?}"))),
                }
            }

            "data" => self.paths.data = path(v)?,
            "out" => self.paths.out = path(v)?,
            "checkpoint" => self.paths.checkpoint = path(v)?,
            "corpus" => self.paths.corpus = path(v)?,
            "report" => self.paths.report = path(v)?,
            "input" => self.paths.input = path(v)?,
            "log" => self.paths.log = path(v)?,
            _ => return Err(usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn layers_apply_in_order() {
        let f = write("task = \"rx\"\nseed = 4\nepochs = 7\nlr = 0.5\nff = [3, 2]\n");
        let mut o = Overrides {
            config: Some(f.path().into()),
            set: vec!["epochs=9".into(), "pooling=sum".into()],
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!(c.task, Task::Rx);
        assert_eq!((c.seed, c.train.seed, c.synth.seed), (4, 4, 4));
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.model.encoder.ff, vec![3, 2]);
        assert_eq!(c.model.pooling, Pooling::Sum);
        o.seed = Some(11);
        o.task = Some(Task::Sx);
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!((c.task, c.seed, c.synth.task), (Task::Sx, 11, Task::Sx));
    }

    #[test]
    fn bad_keys_and_values_are_usage_errors() {
        for text in ["nope = 1", "epochs = -1", "lr = \"fast\"", "use_buffer = false\ntask = \"rx\""] {
            let f = write(text);
            let o = Overrides {
                config: Some(f.path().into()),
                ..Overrides::default()
            };
            let err = RunConfig::resolve(&o).unwrap_err();
            assert_eq!(err.code(), 1, "{text}: {err}");
        }
        let o = Overrides {
            set: vec!["epochs".into()],
            ..Overrides::default()
        };
        assert_eq!(RunConfig::resolve(&o).unwrap_err().code(), 1);
    }

    #[test]
    fn paper_profile_uses_full_ontology() {
        let o = Overrides {
            profile: Some(Profile::Paper),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!(c.synth.n_entity_classes, 186);
        assert_eq!(c.model.encoder.cell, 1024);
        assert_eq!(c.train.alpha, 0.01);
    }
}
