use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradientMap, ParamId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    shape: Vec<usize>,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params` using its entry in
    /// `grads`. Parameters without a gradient entry are treated as having a
    /// zero gradient.
    pub fn step(&mut self, params: &mut [(ParamId, &mut Tensor)], grads: &GradientMap) -> Result<()> {
        for (id, p) in params.iter() {
            if let Some(g) = grads.get(id) {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("param {id}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                    ));
                }
            }
            if let Some(m) = self.moments.get(id) {
                if m.shape != p.shape() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("param {id}: {:?} vs state {:?}", p.shape(), m.shape),
                    ));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (id, p) in params.iter_mut() {
            let n = p.len();
            let state = self.moments.entry(*id).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
                shape: p.shape().to_vec(),
            });
            let g = grads.get(id).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * gi;
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * gi * gi;
                let m_hat = state.first[i] / bc1;
                let v_hat = state.second[i] / bc2;
                p.data_mut()[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = GradientMap::new();
        grads.insert(0, Tensor::zeros(&[3]));
        opt.step(&mut [(0, &mut p)], &grads).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut grads = GradientMap::new();
        grads.insert(0, Tensor::zeros(&[3]));
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut [(0, &mut p)], &grads).is_err());
        assert_eq!(opt.steps(), 0);
    }

    fn minimise_quadratic() -> f64 {
        // (p - 3)^2, minimiser 3.
        let target = 3.0;
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.param(0, &p);
            let c = tape.constant(Tensor::scalar(-target));
            let d = tape.add(x, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut [(0, &mut p)], &grads).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn quadratic_converges() {
        let p = minimise_quadratic();
        assert!((p - 3.0).abs() < 1e-2, "p = {p}");
    }

    #[test]
    fn deterministic() {
        assert_eq!(minimise_quadratic().to_bits(), minimise_quadratic().to_bits());
    }
}
