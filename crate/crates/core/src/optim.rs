use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter in a store, indexed like the store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let ok = self.first.len() == store.len()
            && self.second.len() == store.len()
            && store
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .all(|((_, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
        if !ok {
            return Err(Error::config(
                "optimizer state was not initialized for this parameter set",
            ));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every trainable parameter, then zeroes all
/// gradient buffers.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.check(store)?;
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if p.trainable {
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.5]);
    }

    #[test]
    fn first_step_magnitude() {
        let g = -0.3;
        let lr = 0.01;
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Tensor::scalar(g);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, lr).unwrap();
        let delta = s.value(id).data()[0];
        assert_abs_diff_eq!(delta.abs(), lr * g.abs() / (g.abs() + 1e-8), epsilon = 1e-15);
        assert!(delta > 0.0);
        assert_eq!(s.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn two_steps_follow_closed_form_ema() {
        let g = 0.5;
        let cfg = AdamConfig::default();
        let mut s = scalar_store(0.0);
        let id = s.id("w").unwrap();
        let mut st = AdamState::new(&s, cfg);
        for _ in 0..2 {
            s.get_mut(id).grad = Tensor::scalar(g);
            adam_step(&mut s, &mut st, 1e-3).unwrap();
        }
        assert_eq!(st.step, 2);
        let m = (1.0 - cfg.beta1) * g * (1.0 + cfg.beta1);
        let v = (1.0 - cfg.beta2) * g * g * (1.0 + cfg.beta2);
        assert_abs_diff_eq!(st.first[0].data()[0], m, epsilon = 1e-15);
        assert_abs_diff_eq!(st.second[0].data()[0], v, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_state_is_config_error() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&ParamStore::new(), AdamConfig::default());
        assert!(matches!(adam_step(&mut s, &mut st, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("frozen", Tensor::scalar(2.0), false).unwrap();
        s.get_mut(id).grad = Tensor::scalar(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[2.0]);
    }
}
