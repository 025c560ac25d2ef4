//! AdamW with decoupled weight decay and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::nn::params::{Gradients, ParamStore};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![None; num_params],
            v: vec![None; num_params],
            steps: vec![0; num_params],
        }
    }

    /// One update of every unfrozen parameter that has a gradient. Values are
    /// then rounded to f32 so a checkpoint reload reproduces them exactly.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(RadError::input("gradient / optimizer state does not match parameters"));
        }
        let c = self.config;
        for (id, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if store.is_frozen(id) {
                continue;
            }
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let p = store.value_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let x = p.data[i] * (1.0 - lr * c.weight_decay) - lr * mhat / (vhat.sqrt() + c.eps);
                p.data[i] = x as f32 as f64;
            }
        }
        Ok(())
    }
}

/// Multiplies the rate by `factor` once `patience` consecutive epochs fail to
/// improve on the best loss by more than `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub tolerance: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 0.1,
            patience: 5,
            tolerance: 1e-4,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Records one epoch's loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.tolerance {
            self.best = loss;
            self.stagnant = 0;
        } else {
            self.best = self.best.min(loss);
            self.stagnant += 1;
            if self.stagnant >= self.patience {
                self.lr *= self.factor;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_decays_after_five_stagnant_epochs() {
        let mut s = PlateauScheduler::new(5e-5);
        s.observe(1.0);
        for _ in 0..4 {
            assert_eq!(s.observe(1.0 - 5e-5), 5e-5);
        }
        assert!((s.observe(1.0) - 5e-6).abs() < 1e-20);
        assert_eq!(s.observe(0.5), 5e-6);
    }

    #[test]
    fn adamw_moves_against_gradient_and_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("input.patch.b", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        store.insert("decoder.out.b", Tensor::from_vec(1, 1, vec![0.3]));
        store.set_frozen(crate::nn::params::ParamGroup::Decoder, true);
        let before = store.clone();
        let mut g = Gradients::empty(2);
        g.grads[0] = Some(Tensor::from_vec(1, 2, vec![0.5, -0.5]));
        g.grads[1] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        opt.step(&mut store, &g, 1e-2).unwrap();
        let p = store.get("input.patch.b").unwrap();
        assert!(p.data[0] < 1.0 && p.data[1] > -1.0);
        assert_eq!(store.get("decoder.out.b").unwrap(), before.get("decoder.out.b").unwrap());
    }
}
