//! Command-line front end: corpus generation, training, evaluation, inference and ablation grids.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rsat::corpus::{
    generate_synthetic, heads, load_corpus, parse_transcript, save_corpus, split_corpus, AnnotatedConversation, Corpus,
    Task,
};
use rsat::encoder::KnowledgeGraph;
use rsat::evaluation::{
    cross_turn_stats, evaluate, extract_tuples, relation_only_eval, report_names, CrossTurnStats, EvalReport, Field,
    RelationOnlyReport, SX_STATUS,
};
use rsat::model::{Ablation, RsatModel};
use rsat::training::train_with_log;
use serde::Serialize;

pub use config::{Overrides, Profile, RunConfig};
pub use error::CliError;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const KG_FILE: &str = "kg.json";

#[derive(Parser, Debug)]
#[command(name = "rsat", version, about = "Joint entity, attribute and relation extraction from conversations")]
pub struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Threads used for evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Overrides one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: rsat::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a synthetic corpus split and its knowledge graph into a directory.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a model and writes its checkpoint and per-epoch log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Scores a checkpoint on an annotated corpus.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Prints the tuples extracted from a transcript or corpus file.
    Infer {
        /// May be repeated to run several models over the same input.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Trains and scores every ablation row on one split.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated row names; defaults to every row valid for the task.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rows: Option<Vec<String>>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory written by `generate`; a corpus is synthesized from the configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        config: cli.config,
        seed: cli.seed,
        profile: cli.profile,
        workers: cli.workers,
        task: cli.task,
        set: cli.set,
    };
    let mut cfg = RunConfig::resolve(&overrides)?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Generate { out: dir } => {
            set(&mut cfg.paths.out, dir);
            let s = cmd_generate(&cfg)?;
            writeln!(out, "{}", serde_json::to_string(&s)?)?;
        }
        Command::Train { data, checkpoint, log } => {
            set(&mut cfg.paths.data, data.data);
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.log, log);
            cmd_train(&cfg, |line| {
                let _ = writeln!(std::io::stdout(), "{line}");
            })?;
        }
        Command::Eval { checkpoint, corpus, report } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.corpus, corpus);
            set(&mut cfg.paths.report, report);
            let r = cmd_eval(&cfg)?;
            for (k, s) in &r.pipeline.scores {
                writeln!(out, "{k}\tP={:.4}\tR={:.4}\tF1={:.4}", s.prf.precision, s.prf.recall, s.prf.f1)?;
            }
            writeln!(out, "relation_only\tF1={:.4}", r.relation_only.tuples.headline_f1())?;
        }
        Command::Infer { checkpoint, input } => {
            set(&mut cfg.paths.input, input);
            let ckpts = if checkpoint.is_empty() {
                cfg.paths.checkpoint.clone().into_iter().collect()
            } else {
                checkpoint
            };
            for line in cmd_infer(&cfg, &ckpts)? {
                writeln!(out, "{line}")?;
            }
        }
        Command::Ablate { data, rows, report } => {
            set(&mut cfg.paths.data, data.data);
            set(&mut cfg.paths.report, report);
            let table = cmd_ablate(&cfg, rows.as_deref())?;
            write!(out, "{}", table.render())?;
        }
    }
    Ok(())
}

fn set(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = required(p, flag)?;
    if !p.exists() {
        return Err(CliError::data(format!("{}: no such file or directory", p.display())));
    }
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Corpus splits and knowledge graph, from `paths.data` or synthesized from the configuration.
pub struct Splits {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub kg: KnowledgeGraph,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let splits = match &cfg.paths.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::data(format!("{}: not a data directory", dir.display())));
            }
            let load = |f: &str| -> Result<Corpus, CliError> {
                let p = dir.join(f);
                existing(&Some(p.clone()), "data")?;
                Ok(load_corpus(&p)?)
            };
            let kg_path = dir.join(KG_FILE);
            existing(&Some(kg_path.clone()), "data")?;
            Splits {
                train: load(TRAIN_FILE)?,
                dev: load(DEV_FILE)?,
                test: load(TEST_FILE)?,
                kg: KnowledgeGraph::load(&kg_path)?,
            }
        }
        None => {
            let (corpus, kg) = generate_synthetic(&cfg.synth)?;
            let (train, dev, test) = split_corpus(&corpus, cfg.split, cfg.seed)?;
            Splits { train, dev, test, kg }
        }
    };
    if splits.train.task() != cfg.task {
        return Err(CliError::usage(format!(
            "data is for task {}, configuration says {}",
            splits.train.task().name(),
            cfg.task.name()
        )));
    }
    Ok(splits)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSummary {
    pub task: Task,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub cross_turn_fraction: Option<f64>,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary, CliError> {
    let dir = required(&cfg.paths.out, "out")?;
    let (corpus, kg) = generate_synthetic(&cfg.synth)?;
    let (train, dev, test) = split_corpus(&corpus, cfg.split, cfg.seed)?;
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    save_corpus(&train, dir.join(TRAIN_FILE))?;
    save_corpus(&dev, dir.join(DEV_FILE))?;
    save_corpus(&test, dir.join(TEST_FILE))?;
    kg.save(dir.join(KG_FILE))?;
    Ok(GenerateSummary {
        task: cfg.task,
        train: train.len(),
        dev: dev.len(),
        test: test.len(),
        cross_turn_fraction: corpus.cross_turn_fraction(),
    })
}

/// Trains, writes the checkpoint and log, and returns the model.
pub fn cmd_train(cfg: &RunConfig, mut on_line: impl FnMut(&str)) -> Result<RsatModel, CliError> {
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?.to_path_buf();
    let log_path = cfg.paths.log.clone().unwrap_or_else(|| {
        let mut p = ckpt.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let s = load_splits(cfg)?;
    let mut log = String::new();
    let (model, _) = train_with_log(&s.train, &s.dev, &s.kg, cfg.model.clone(), &cfg.train, |e| {
        let line = e.to_line();
        on_line(&line);
        log.push_str(&line);
        log.push('\n');
    })?;
    model.save(&ckpt)?;
    fs::write(&log_path, log).map_err(|e| CliError::runtime(format!("{}: {e}", log_path.display())))?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub task: Task,
    pub pipeline: EvalReport,
    pub relation_only: RelationOnlyReport,
    pub cross_turn: CrossTurnStats,
}

pub fn evaluate_model(model: &RsatModel, corpus: &Corpus, cfg: &RunConfig) -> Result<EvalOutput, CliError> {
    if corpus.task() != model.task() {
        return Err(CliError::usage("corpus and checkpoint are for different tasks"));
    }
    Ok(EvalOutput {
        task: model.task(),
        pipeline: evaluate(model, corpus, cfg.workers)?,
        relation_only: relation_only_eval(model, corpus, cfg.relation_match, cfg.workers)?,
        cross_turn: cross_turn_stats(model, corpus, cfg.workers)?,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput, CliError> {
    let model = RsatModel::load(existing(&cfg.paths.checkpoint, "checkpoint")?)?;
    let corpus = match (&cfg.paths.corpus, &cfg.paths.data) {
        (Some(_), _) => load_corpus(existing(&cfg.paths.corpus, "corpus")?)?,
        (None, Some(dir)) => load_corpus(existing(&Some(dir.join(TEST_FILE)), "data")?)?,
        (None, None) => return Err(CliError::usage("--corpus is required")),
    };
    let out = evaluate_model(&model, &corpus, cfg)?;
    if let Some(p) = &cfg.paths.report {
        write_json(p, &out)?;
    }
    Ok(out)
}

fn field_text(model: &RsatModel, f: &Field, head: &str) -> String {
    match f {
        Field::Class(c) => model.ontology.class_name(head, *c).to_string(),
        Field::Tokens(t) => t.join(" "),
    }
}

/// `kind<TAB>first<TAB>second[<TAB>content]` per tuple, with class ids replaced by names.
pub fn tuple_lines(model: &RsatModel, conv: &AnnotatedConversation) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    for (kind, tuples) in extract_tuples(model, conv)? {
        let second = if kind == SX_STATUS { heads::SYM_STATUS } else { heads::PROP_TYPE };
        for t in tuples {
            let [a, b, c] = &t.0;
            let mut line = format!("{kind}\t{}\t{}", field_text(model, a, heads::SYM_TYPE), field_text(model, b, second));
            if kind != SX_STATUS {
                line.push('\t');
                line.push_str(&field_text(model, c, ""));
            }
            lines.push(line);
        }
    }
    Ok(lines)
}

pub fn cmd_infer(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<String>, CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::usage("--checkpoint is required"));
    }
    let input = existing(&cfg.paths.input, "input")?;
    let mut lines = Vec::new();
    for ck in checkpoints {
        let model = RsatModel::load(existing(&Some(ck.clone()), "checkpoint")?)?;
        let convs: Vec<AnnotatedConversation> = if input.extension().is_some_and(|e| e == "jsonl") {
            let c = load_corpus(input)?;
            if c.task() != model.task() {
                return Err(CliError::usage("input corpus and checkpoint are for different tasks"));
            }
            c.conversations
        } else {
            let text = fs::read_to_string(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
            let id = input.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            vec![parse_transcript(&text, &id, model.task(), &model.kg)?]
        };
        for conv in &convs {
            lines.extend(tuple_lines(&model, conv)?);
        }
    }
    Ok(lines)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub best_epoch: usize,
    pub f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub task: Task,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width text table, one row per ablation.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
        let mut s = format!("{:width$}", "row");
        for c in &self.columns {
            s.push_str(&format!("  {c:>11}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:width$}", r.name));
            for c in &self.columns {
                match r.f1.get(c) {
                    Some(v) => s.push_str(&format!("  {v:>11.3}")),
                    None => s.push_str(&format!("  {:>11}", "n/a")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Resolves row names against the full grid and rejects rows the task cannot run.
pub fn ablation_rows(task: Task, names: Option<&[String]>) -> Result<Vec<(String, Ablation)>, CliError> {
    let Some(names) = names else {
        return Ok(Ablation::grid(task).into_iter().map(|(n, a)| (n.to_string(), a)).collect());
    };
    let all = Ablation::grid(Task::Sx);
    names
        .iter()
        .map(|n| {
            let (name, ab) = all
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case(n.trim()))
                .ok_or_else(|| CliError::usage(format!("unknown ablation row {n:?}")))?;
            ab.validate(task)
                .map_err(|e| CliError::usage(format!("row {name} is not available for task {}: {e}", task.name())))?;
            Ok((name.to_string(), *ab))
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, names: Option<&[String]>) -> Result<AblationTable, CliError> {
    let rows = ablation_rows(cfg.task, names)?;
    let s = load_splits(cfg)?;
    let mut out = AblationTable {
        task: cfg.task,
        columns: report_names(cfg.task).iter().map(|s| s.to_string()).collect(),
        rows: Vec::new(),
    };
    for (name, ab) in rows {
        let mut mc = cfg.model.clone();
        mc.ablation = ab;
        let (model, rep) = train_with_log(&s.train, &s.dev, &s.kg, mc, &cfg.train, |_| {})?;
        let report = evaluate(&model, &s.test, cfg.workers)?;
        out.rows.push(AblationRow {
            name,
            ablation: ab,
            best_epoch: rep.best_epoch,
            f1: report.scores.iter().map(|(k, v)| (k.clone(), v.prf.f1)).collect(),
        });
    }
    if let Some(p) = &cfg.paths.report {
        write_json(p, &out)?;
    }
    Ok(out)
}
