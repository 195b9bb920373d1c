use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdamError {
    #[error("non-finite gradient for {name} at element {index} (value {value}); step refused")]
    NonFinite { name: String, index: usize, value: f64 },
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    Shape { name: String, grad: Vec<usize>, param: Vec<usize> },
    #[error("gradient for unknown parameter {0}")]
    Unknown(String),
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every parameter named in `grads`. Nothing is
    /// modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<(), AdamError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| AdamError::Unknown(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(AdamError::Shape { name: name.clone(), grad: g.shape().to_vec(), param: p.shape().to_vec() });
            }
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(AdamError::NonFinite { name: name.clone(), index, value });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::from_vec(vec![v]));
        p
    }

    fn grad(name: &str, g: f64) -> ParamGrads {
        [(name.to_string(), Tensor::from_vec(vec![g]))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_on_fresh_state_leaves_params() {
        let mut p = one("w", 0.7);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grad("w", 0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(s.m["w"].item(), 0.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = one("w", 0.0);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grad("w", 2.0)).unwrap();
        let (m, v) = (s.m["w"].item(), s.v["w"].item());
        s.step(&mut p, &grad("w", 0.0)).unwrap();
        assert_eq!(s.m["w"].item(), 0.9 * m);
        assert_eq!(s.v["w"].item(), 0.999 * v);
    }

    #[test]
    fn hand_trace_three_steps() {
        // lr 0.1, gradients 1, 2, -1 from p = 1; trace worked independently.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut s = AdamState::new(cfg);
        let mut p = one("w", 1.0);
        let trace = [0.9000000009999999, 0.8034817990281662, 0.7614728689681867];
        for (g, want) in [1.0, 2.0, -1.0].into_iter().zip(trace) {
            s.step(&mut p, &grad("w", g)).unwrap();
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_approaches_lr_sign() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut s = AdamState::new(cfg);
        let mut p = one("w", 0.0);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.get("w").unwrap().item();
            s.step(&mut p, &grad("w", -3.0)).unwrap();
            last = p.get("w").unwrap().item() - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn nan_gradient_is_refused() {
        let mut p = one("w", 1.0);
        let mut s = AdamState::new(AdamConfig::default());
        let err = s.step(&mut p, &grad("w", f64::NAN)).unwrap_err();
        assert!(matches!(err, AdamError::NonFinite { ref name, index: 0, .. } if name == "w"));
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }
}
