use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = store.global_grad_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let vals = p.value.data_mut();
            for (((theta, &g), mi), vi) in vals
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * scale;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.25, 40.0] {
            let mut s = scalar_store(1.0);
            let mut opt = Adam::new(AdamConfig::default(), &s);
            s.iter_mut().next().unwrap().grad.data_mut()[0] = g;
            opt.step(&mut s);
            let delta = (s.iter().next().unwrap().value.data()[0] - 1.0).abs();
            let lr = opt.config.lr;
            assert!((delta - lr).abs() < 1e-6 * lr, "delta {delta}");
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(0.75);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..100 {
            s.zero_grad();
            opt.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 0.75);
    }

    #[test]
    fn quadratic_two_step_trajectory() {
        // loss = θ², grad = 2θ, θ0 = 1, lr 0.1, β = (0.9, 0.999), ε = 1e-8.
        // Step 1: g=2, m=0.2, v=0.004, m̂=2, v̂=4 → θ1 = 1 - 0.1·2/(2+1e-8).
        let theta1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        // Step 2: g=2θ1, m=0.9·0.2+0.1·g, v=0.999·0.004+0.001·g².
        let g2 = 2.0 * theta1;
        let m2 = 0.9 * 0.2 + 0.1 * g2;
        let v2 = 0.999 * 0.004 + 0.001 * g2 * g2;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64 * 0.999);
        let theta2 = theta1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);

        let mut s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        let mut traj = vec![];
        for _ in 0..2 {
            let th = s.iter().next().unwrap().value.data()[0];
            s.zero_grad();
            s.iter_mut().next().unwrap().grad.data_mut()[0] = 2.0 * th;
            opt.step(&mut s);
            traj.push(s.iter().next().unwrap().value.data()[0]);
        }
        assert!((traj[0] - theta1).abs() < 1e-14);
        assert!((traj[1] - theta2).abs() < 1e-14);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        s.iter_mut().next().unwrap().grad.data_mut()[0] = 50.0;
        opt.step(&mut s);
        // first step magnitude stays ≈ lr regardless of scale
        assert!((s.iter().next().unwrap().value.data()[0] + 0.01).abs() < 1e-8);
    }
}
