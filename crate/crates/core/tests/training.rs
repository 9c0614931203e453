use rsat::baseline::baseline_train;
use rsat::corpus::{generate_synthetic, Corpus, SynthConfig, Task};
use rsat::encoder::KnowledgeGraph;
use rsat::evaluation::{evaluate, SX_PROPERTY};
use rsat::model::{Ablation, ModelConfig, RsatModel};
use rsat::training::{train, train_with_log, Curriculum, TrainConfig};

fn synthetic(task: Task, n: usize, seed: u64) -> (Corpus, KnowledgeGraph) {
    let mut sc = SynthConfig::desk(task, seed);
    sc.n_conversations = n;
    generate_synthetic(&sc).unwrap()
}

fn overfit_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience: epochs,
        curriculum: Curriculum {
            p_start: 1.0,
            p_end: 0.0,
            decay_epochs: Some(epochs / 2),
        },
        ..TrainConfig::desk()
    }
}

fn no_dropout() -> ModelConfig {
    let mut mc = ModelConfig::desk();
    mc.encoder.dropout = 0.0;
    mc.encoder.word_dropout = 0.0;
    mc
}

#[test]
fn same_seed_gives_identical_runs() {
    let (corpus, kg) = synthetic(Task::Sx, 16, 1);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    };
    let run = || {
        let mut lines = Vec::new();
        let (m, _) = train_with_log(&corpus, &corpus, &kg, ModelConfig::desk(), &cfg, |e| lines.push(e.to_line())).unwrap();
        (m.to_bytes().unwrap(), lines)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(a == b, "checkpoints differ");
    let other = TrainConfig { seed: cfg.seed + 1, ..cfg };
    let (m, _) = train(&corpus, &corpus, &kg, ModelConfig::desk(), &other).unwrap();
    assert!(m.to_bytes().unwrap() != a);
}

#[test]
fn fifty_conversations_overfit() {
    for task in [Task::Sx, Task::Rx] {
        let (corpus, kg) = synthetic(task, 50, 7);
        let (m, rep) = train(&corpus, &corpus, &kg, no_dropout(), &overfit_config(40)).unwrap();
        let f1 = evaluate(&m, &corpus, 1).unwrap().headline_f1();
        assert!(f1 >= 0.95, "{task:?} training F1 {f1}, log {:?}", rep.log.last());
    }
}

#[test]
fn baseline_overfits_twenty_conversations() {
    let (corpus, kg) = synthetic(Task::Sx, 20, 9);
    let b = baseline_train(&corpus, &corpus, &kg, no_dropout().encoder, &overfit_config(100)).unwrap();
    let f1 = b.evaluate(&corpus).unwrap()[SX_PROPERTY].f1;
    assert!(f1 >= 0.9, "baseline training F1 {f1}");
}

#[test]
fn buffer_ablation_is_rejected_for_medications_at_train_time() {
    let (corpus, kg) = synthetic(Task::Rx, 4, 0);
    let mut mc = ModelConfig::desk();
    mc.ablation = Ablation {
        use_buffer: false,
        ..Ablation::FULL
    };
    assert!(train(&corpus, &corpus, &kg, mc.clone(), &TrainConfig::desk()).is_err());
    assert!(RsatModel::new(mc, corpus.ontology.clone(), rsat::encoder::Vocab::build(&corpus, 1), kg, 0).is_err());
}
