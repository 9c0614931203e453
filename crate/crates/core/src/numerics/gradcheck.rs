use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Tensors larger than this are checked on a random subset of this many coordinates.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
            floor: 1e-8,
        }
    }
}

/// Result of a gradient check: worst relative error and where it occurred.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares analytic gradients with central finite differences.
///
/// `loss_fn` must zero the store's gradients, evaluate the loss, write the
/// analytic gradients into the store and return the loss value.
/// The relative error per coordinate is `|a - n| / max(floor, |a| + |n|)`.
/// Central differences of a loss `L` carry rounding noise near `ulp(L) / eps`, so the
/// floor must sit well above that for coordinates whose true gradient is zero.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, cfg: GradCheck) -> GradCheckReport
where
    F: FnMut(&mut ParamStore) -> f64,
{
    loss_fn(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let n_params = store.len();
    for pi in 0..n_params {
        let len = store.iter().nth(pi).map(|p| p.value.len()).unwrap_or(0);
        let coords: Vec<usize> = if len > cfg.max_coords_per_param {
            let mut c = sample(&mut rng, len, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..len).collect()
        };
        for idx in coords {
            let orig = store.iter().nth(pi).unwrap().value.data()[idx];
            set(store, pi, idx, orig + cfg.eps);
            let fp = loss_fn(store);
            set(store, pi, idx, orig - cfg.eps);
            let fm = loss_fn(store);
            set(store, pi, idx, orig);
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = store.iter().nth(pi).unwrap().name.clone();
                report.worst_index = idx;
            }
        }
    }
    // leave the store holding the analytic gradients at the original point
    loss_fn(store);
    report
}

fn set(store: &mut ParamStore, pi: usize, idx: usize, v: f64) {
    store.iter_mut().nth(pi).unwrap().value.data_mut()[idx] = v;
}
