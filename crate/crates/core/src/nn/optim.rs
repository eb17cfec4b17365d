use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters. Defaults: lr 1e-4, weight decay 1e-2, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentState<T = f64> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> MomentState<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// `step` is 1-based and drives the bias correction.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut MomentState<T>,
    config: &OptimizerConfig,
    step: u64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw params/grads/moments",
            &[params.len(); 3],
            &[grads.len(), state.m.len(), state.v.len()],
        ));
    }
    if step == 0 {
        return Err(Error::Config("adamw step index is 1-based".into()));
    }
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let lr = T::of(config.learning_rate);
    let wd = T::of(config.weight_decay);
    let eps = T::of(config.epsilon);
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (T::one() - b1) * g;
        let v = b2 * state.v[i] + (T::one() - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        params[i] = params[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * params[i]);
    }
    Ok(())
}

/// AdamW over a set of named parameter tensors, reading gradients from their buffers.
#[derive(Clone, Debug)]
pub struct AdamW<T = f64> {
    config: OptimizerConfig,
    step: u64,
    states: BTreeMap<String, MomentState<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            states: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter; parameters without a gradient buffer see a zero
    /// gradient (weight decay still applies).
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>) -> Result<()> {
        self.step += 1;
        for (name, tensor) in params {
            let state = self
                .states
                .entry(name)
                .or_insert_with(|| MomentState::zeros(tensor.len()));
            let (data, grad) = tensor.data_and_grad_mut();
            adamw_step(data, grad, state, &self.config, self.step)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let mut s = MomentState::zeros(3);
        for step in 1..=5 {
            adamw_step(&mut p, &[0.0; 3], &mut s, &cfg, step).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn single_step_hand_value() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = [1.0f64];
        let mut s = MomentState::zeros(1);
        adamw_step(&mut p, &[1.0], &mut s, &cfg, 1).unwrap();
        // m_hat = v_hat = 1: 1 - 0.1 * (1 / (1 + 1e-8) + 0.01 * 1)
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.899).abs() < 1e-8);
    }

    #[test]
    fn minimises_a_parabola() {
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut x = [1.0f64];
        let mut s = MomentState::zeros(1);
        let reached = (1..=2000).find(|&t| {
            let g = 2.0 * x[0];
            adamw_step(&mut x, &[g], &mut s, &cfg, t).unwrap();
            x[0].abs() < 1e-2
        });
        assert!(reached.is_some());
    }

    #[test]
    fn deterministic_bits() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            learning_rate: 0.05,
            ..Default::default()
        };
        let run = || {
            let mut p = vec![0.1f64, 0.7, -0.4];
            let mut s = MomentState::zeros(3);
            for t in 1..=50 {
                let g: Vec<f64> = p.iter().map(|v| v * v.sin() + 0.1).collect();
                adamw_step(&mut p, &g, &mut s, &cfg, t).unwrap();
            }
            p.iter().map(|v: &f64| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn errors() {
        let cfg = OptimizerConfig::default();
        let mut s = MomentState::zeros(2);
        assert!(adamw_step(&mut [0.0; 2], &[0.0; 3], &mut s, &cfg, 1).is_err());
        assert!(adamw_step(&mut [0.0; 2], &[0.0; 2], &mut s, &cfg, 0).is_err());
        let bad = OptimizerConfig {
            beta1: 1.0,
            ..cfg
        };
        assert!(AdamW::<f64>::new(bad).is_err());
    }
}
