//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{invalid, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment estimates are kept per parameter name so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates taken.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient; the rest are left
    /// untouched, including their weight decay.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let theta = var.as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            let g = g.detach();
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = (m_prev.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let v = (v_prev.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + c.eps)?;
            let decayed = theta.detach().affine(1.0 - c.lr * c.weight_decay, 0.0)?;
            let next = (decayed - (m_hat / denom)?.affine(c.lr, 0.0)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }

    /// Restores moments saved from an earlier run.
    pub fn restore(cfg: AdamWConfig, t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<Self> {
        if m.keys().ne(v.keys()) {
            return invalid("first and second moments cover different parameters");
        }
        Ok(Self { cfg, t, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;

    #[test]
    fn first_step_matches_hand_computation() {
        let store = ParamStore::new(DType::F64, 0);
        let x = store.root().get(&[2], "x", Init::Const(1.0)).unwrap();
        let loss = (x.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut opt = AdamW::new(cfg);
        opt.step(&store, &grads).unwrap();
        // g = 1: m_hat = 1, v_hat = 1, so x = 1 (1 - lr wd) - lr / (1 + eps).
        let want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 / (1.0 + 1e-8);
        let got = store.get_var("x").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!(got.iter().all(|v| (v - want).abs() < 1e-15), "{got:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let store = ParamStore::new(DType::F64, 0);
        store.root().get(&[3], "x", Init::Const(2.0)).unwrap();
        let cfg = AdamWConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = AdamW::new(cfg);
        for _ in 0..500 {
            let x = store.get_var("x").unwrap();
            let loss = (x.as_tensor() - 0.5).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap()).unwrap();
        }
        let x = store.get_var("x").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!(x.iter().all(|v| (v - 0.5).abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let store = ParamStore::new(DType::F64, 0);
        let a = store.root().get(&[1], "a", Init::Const(1.0)).unwrap();
        store.root().get(&[1], "b", Init::Const(1.0)).unwrap();
        let grads = a.sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 });
        opt.step(&store, &grads).unwrap();
        assert_eq!(store.get_var("b").unwrap().as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert!(!opt.m.contains_key("b"));
    }
}
