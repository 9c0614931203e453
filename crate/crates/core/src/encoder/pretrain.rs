use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, KnowledgeGraph, TokenFeatures, Vocab};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Forward, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean per-utterance loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains the encoder to predict the bag of words of the next utterance from the
/// mean-pooled encoding of the current one. Returns a store holding the encoder
/// parameters (names prefixed `enc.`) plus the discarded prediction head (`pre.`).
pub fn pretrain_next_turn(
    corpus: &Corpus,
    vocab: &Vocab,
    kg: &KnowledgeGraph,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(enc.clone(), vocab.size(), kg, &mut store, &mut rng)?;
    let width = *enc.ff.last().expect("validated");
    let w = store.add_uniform("pre.w", &[vocab.size(), width], width, &mut rng);
    let b = store.add_zeros("pre.b", &[vocab.size()]);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let feats: Vec<TokenFeatures> = corpus.conversations.iter().map(|c| TokenFeatures::of(c, vocab)).collect();
    let bounds: Vec<Vec<usize>> = corpus.conversations.iter().map(|c| c.flatten().1).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = PretrainReport { epoch_loss: vec![] };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for &ci in &order {
            let ft = &feats[ci];
            let bd = &bounds[ci];
            if bd.len() < 2 {
                continue;
            }
            store.zero_grad();
            let seed = rand::Rng::random::<u64>(&mut rng);
            let mut f = Forward::train(&store, enc.dropout, 0.0, seed);
            let (h, _) = encoder.core(&mut f, ft)?;
            let wv = f.p(w);
            let bv = f.p(b);
            let mut losses = Vec::new();
            for u in 0..bd.len() - 1 {
                let end = bd[u + 1];
                let next_end = bd.get(u + 2).copied().unwrap_or(ft.len());
                let pooled = f.g.mean_rows(h, bd[u], end)?;
                let z = f.g.matvec(wv, pooled)?;
                let z = f.g.add(z, bv)?;
                let mut target = vec![0.0; vocab.size()];
                for &id in &ft.word_ids[end..next_end] {
                    target[id] = 1.0;
                }
                losses.push(f.g.bce_with_logits(z, target)?);
            }
            let sum = f.g.add_n(&losses)?;
            let mean = f.g.scale(sum, 1.0 / losses.len() as f64);
            let (loss, g) = f.backward(mean);
            g.accumulate_into(&mut store);
            total += loss * losses.len() as f64;
            count += losses.len();
            adam.step(&mut store);
        }
        report.epoch_loss.push(total / count.max(1) as f64);
    }
    store.zero_grad();
    Ok((store, report))
}
