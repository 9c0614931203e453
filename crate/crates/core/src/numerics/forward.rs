use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};

/// Training-time stochastic regularizers applied during one forward pass.
pub struct Regularizer {
    pub dropout: f64,
    /// Std of the Gaussian perturbation added to every parameter read.
    pub noise_std: f64,
    pub rng: ChaCha8Rng,
}

/// A graph bound to a parameter store. Each parameter enters the graph once per pass,
/// so a noisy parameter carries the same perturbation at every use.
pub struct Forward<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    cache: Vec<Option<Var>>,
    reg: Option<Regularizer>,
}

impl<'s> Forward<'s> {
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::with_graph(Graph::new(), store, None)
    }

    pub fn train(store: &'s ParamStore, dropout: f64, noise_std: f64, seed: u64) -> Self {
        let reg = Regularizer {
            dropout,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        Self::with_graph(Graph::new(), store, Some(reg))
    }

    pub fn with_graph(g: Graph, store: &'s ParamStore, reg: Option<Regularizer>) -> Self {
        Self {
            g,
            store,
            cache: vec![None; store.len()],
            reg,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.reg.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let mut v = self.g.param(self.store, id);
        if let Some(r) = self.reg.as_mut() {
            v = self.g.gaussian_noise(v, r.noise_std, &mut r.rng);
        }
        self.cache[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, v: Var) -> Var {
        match self.reg.as_mut() {
            Some(r) => self.g.dropout(v, r.dropout, &mut r.rng),
            None => v,
        }
    }

    /// Rng of the regularizer, if training.
    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.reg.as_mut().map(|r| &mut r.rng)
    }

    /// Runs backward from `root`; the returned graph holds the gradients and
    /// no longer borrows the store, so they can be added with `accumulate_into`.
    pub fn backward(mut self, root: Var) -> (f64, Graph) {
        let loss = self.g.scalar(root);
        self.g.backward(root);
        (loss, self.g)
    }
}
