use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_synthetic, SynthConfig, Task};
use crate::numerics::{grad_check, GradCheck};

fn tiny_kg(types: usize, dim: usize) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::empty(dim, (0..types).map(|t| format!("t{t}")).collect());
    for i in 0..3 {
        let n = kg.add_node((0..dim).map(|d| 0.1 * (i + d) as f64).collect(), vec![i % types]);
        kg.words.insert(format!("w{i}"), n);
    }
    kg
}

fn cfg(use_kg: bool, use_pos: bool) -> EncoderConfig {
    EncoderConfig {
        word_dim: 4,
        cell: 3,
        layers: 1,
        ff: vec![5, 4],
        dropout: 0.0,
        word_dropout: 0.0,
        pos_tags: 17,
        use_kg,
        use_pos,
    }
}

fn feats(n: usize) -> TokenFeatures {
    TokenFeatures {
        word_ids: (0..n).map(|i| (i * 3) % 6).collect(),
        pos: (0..n).map(|i| Some((i % 17) as u8)).collect(),
        kg: (0..n).map(|i| if i % 2 == 0 { Some((i % 3) as u32) } else { None }).collect(),
    }
}

fn build(c: EncoderConfig, kg: &KnowledgeGraph, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Encoder::new(c, 6, kg, &mut store, &mut rng).unwrap();
    (e, store)
}

#[test]
fn embed_dims_follow_kg_flag() {
    let kg = tiny_kg(3, 5);
    for (use_kg, want) in [(false, 4), (true, 9)] {
        let (e, s) = build(cfg(use_kg, false), &kg, 1);
        let mut f = Forward::eval(&s);
        let (x, _) = e.embed(&mut f, &feats(4)).unwrap();
        assert_eq!(f.g.value(x).shape(), &[4, want]);
        assert_eq!(e.input_dim(), want);
    }
}

#[test]
fn same_word_same_vector() {
    let kg = tiny_kg(3, 5);
    let (e, s) = build(cfg(true, false), &kg, 2);
    let mut f = Forward::eval(&s);
    let ft = TokenFeatures {
        word_ids: vec![2, 4, 2],
        pos: vec![None; 3],
        kg: vec![Some(1), None, Some(1)],
    };
    let (x, _) = e.embed(&mut f, &ft).unwrap();
    let t = f.g.value(x);
    assert_eq!(t.row(0), t.row(2));
    assert_ne!(t.row(0), t.row(1));
    // unmapped tokens carry the UNK vector
    let unk = s.value(s.id("enc.kg_unk").unwrap()).data();
    assert_eq!(&t.row(1)[4..], unk);
}

#[test]
fn zero_weights_and_inputs_give_zero_states() {
    let kg = tiny_kg(3, 5);
    let (e, mut s) = build(cfg(false, false), &kg, 3);
    for p in s.iter_mut() {
        p.value.fill(0.0);
    }
    let mut f = Forward::eval(&s);
    let (x, _) = e.embed(&mut f, &feats(5)).unwrap();
    let h = e.bilstm(&mut f, x, 5).unwrap();
    assert!(f.g.value(h).data().iter().all(|&v| v == 0.0));
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn single_step_matches_hand_computed_cell() {
    let kg = tiny_kg(3, 5);
    let mut c = cfg(false, false);
    c.word_dim = 2;
    c.cell = 1;
    let (e, mut s) = build(c, &kg, 4);
    let x = [0.5, -1.0];
    let wx = [[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8]];
    let b = [0.05, 1.0, -0.1, 0.2];
    let emb = s.id("enc.emb").unwrap();
    s.get_mut(emb).value.row_mut(1).copy_from_slice(&x);
    let id = s.id("enc.lstm0.fw.wx").unwrap();
    s.get_mut(id).value.data_mut().copy_from_slice(&wx.concat());
    let id = s.id("enc.lstm0.fw.b").unwrap();
    s.get_mut(id).value.data_mut().copy_from_slice(&b);
    let mut f = Forward::eval(&s);
    let ft = TokenFeatures {
        word_ids: vec![1],
        pos: vec![None],
        kg: vec![None],
    };
    let (xv, _) = e.embed(&mut f, &ft).unwrap();
    let h = e.bilstm(&mut f, xv, 1).unwrap();
    let pre: Vec<f64> = (0..4).map(|r| wx[r][0] * x[0] + wx[r][1] * x[1] + b[r]).collect();
    let cell = sig(pre[0]) * pre[2].tanh();
    let want = sig(pre[3]) * cell.tanh();
    assert!((f.g.value(h).at(0, 0) - want).abs() < 1e-14);
}

fn states(e: &Encoder, s: &ParamStore, ft: &TokenFeatures) -> Tensor {
    let mut f = Forward::eval(s);
    let (x, _) = e.embed(&mut f, ft).unwrap();
    let h = e.bilstm(&mut f, x, ft.len()).unwrap();
    f.g.value(h).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn directions_are_causal(n in 2usize..8, t in 0usize..8, seed in 0u64..1000) {
        let t = t % n;
        let kg = tiny_kg(3, 5);
        let (e, s) = build(cfg(true, false), &kg, seed);
        let a = feats(n);
        let mut b = a.clone();
        b.word_ids[t] = (b.word_ids[t] + 1) % 6;
        let (ha, hb) = (states(&e, &s, &a), states(&e, &s, &b));
        let cell = 3;
        for k in 0..n {
            let fw_same = ha.row(k)[..cell] == hb.row(k)[..cell];
            let bw_same = ha.row(k)[cell..] == hb.row(k)[cell..];
            prop_assert_eq!(fw_same, k < t);
            prop_assert_eq!(bw_same, k > t);
        }
    }

    #[test]
    fn output_dims_follow_fusion(n in 1usize..7, use_kg: bool, use_pos: bool) {
        let kg = tiny_kg(3, 5);
        let (e, s) = build(cfg(use_kg, use_pos), &kg, 7);
        let mut f = Forward::eval(&s);
        let out = e.encode(&mut f, &feats(n)).unwrap();
        let want = 4 + if use_pos { 17 } else { 0 } + if use_kg { 3 } else { 0 };
        prop_assert_eq!(f.g.value(out.h).shape(), &[n, want]);
        prop_assert_eq!(e.out_dim(), want);
    }
}

#[test]
fn paper_inventories_give_width_plus_47_plus_87() {
    let kg = tiny_kg(87, 4);
    let mut c = cfg(true, true);
    c.pos_tags = 47;
    let (e, _) = build(c, &kg, 1);
    assert_eq!(e.out_dim(), 4 + 47 + 87);
    let (e, _) = build(cfg(false, false), &kg, 1);
    assert_eq!(e.out_dim(), 4);
}

fn encode_loss(e: &Encoder, s: &mut ParamStore, ft: &TokenFeatures) -> f64 {
    s.zero_grad();
    let snapshot = s.clone();
    let mut f = Forward::eval(&snapshot);
    let out = e.encode(&mut f, ft).unwrap();
    let w: Vec<f64> = (0..f.g.value(out.h).len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let w = f.g.constant(Tensor::new(f.g.value(out.h).shape().to_vec(), w).unwrap());
    let p = f.g.mul(out.h, w).unwrap();
    let t = f.g.tanh(p);
    let root = f.g.sum(t);
    let (loss, g) = f.backward(root);
    g.accumulate_into(s);
    loss
}

#[test]
fn encode_gradients_match_finite_differences() {
    let kg = tiny_kg(3, 5);
    let (e, mut s) = build(cfg(true, true), &kg, 11);
    let ft = feats(5);
    let report = grad_check(&mut s, |st| encode_loss(&e, st, &ft), GradCheck::default());
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let kg = tiny_kg(3, 5);
    let (e, mut s) = build(cfg(true, true), &kg, 12);
    encode_loss(&e, &mut s, &feats(6));
    for p in s.iter() {
        assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} has no gradient", p.name);
    }
}

#[test]
fn vocab_reserves_oov_row() {
    let v = Vocab::from_words(["Pain".to_string(), "back".to_string(), "pain".to_string()]);
    assert_eq!(v.size(), 3);
    assert_eq!(v.id("PAIN"), v.id("pain"));
    assert_eq!(v.id("unseen"), OOV);
    assert_ne!(v.id("back"), OOV);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = EncoderConfig::desk();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    let mut c = EncoderConfig::desk();
    c.ff.clear();
    assert!(c.validate().is_err());
    assert!(EncoderConfig::paper().validate().is_ok());
}

fn one_word_corpus() -> Corpus {
    use crate::corpus::{AnnotatedConversation, Speaker, Token, TaskOntology, Utterance};
    let o = TaskOntology::desk(Task::Rx);
    let convs = (0..4)
        .map(|i| {
            let utts = (0..4)
                .map(|_| Utterance {
                    speaker: Speaker::Pt,
                    tokens: vec![Token::new("hello"); 3],
                })
                .collect();
            AnnotatedConversation::new(format!("c{i}"), utts, vec![], vec![], &o).unwrap()
        })
        .collect();
    Corpus::new(o, convs).unwrap()
}

#[test]
fn pretraining_degenerate_task_converges() {
    let corpus = one_word_corpus();
    let vocab = Vocab::build(&corpus, 1);
    let kg = tiny_kg(3, 5);
    let pc = PretrainConfig {
        epochs: 40,
        lr: 5e-2,
        seed: 1,
    };
    let (_, rep) = pretrain_next_turn(&corpus, &vocab, &kg, &cfg(false, false), &pc).unwrap();
    assert!(rep.epoch_loss[0] > 0.3);
    assert!(*rep.epoch_loss.last().unwrap() < 0.02, "{:?}", rep.epoch_loss);
}

#[test]
fn pretraining_is_deterministic() {
    let (corpus, kg) = generate_synthetic(&SynthConfig {
        n_conversations: 6,
        ..SynthConfig::desk(Task::Sx, 2)
    })
    .unwrap();
    let vocab = Vocab::build(&corpus, 1);
    let pc = PretrainConfig {
        epochs: 1,
        lr: 1e-2,
        seed: 5,
    };
    let mut c = cfg(true, true);
    c.dropout = 0.2;
    let (a, _) = pretrain_next_turn(&corpus, &vocab, &kg, &c, &pc).unwrap();
    let (b, _) = pretrain_next_turn(&corpus, &vocab, &kg, &c, &pc).unwrap();
    assert_eq!(a, b);
}
