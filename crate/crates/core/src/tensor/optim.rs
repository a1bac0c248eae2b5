use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters for decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

/// AdamW over a [`ParamSet`]. Parameters for which `trainable` returns false are
/// never touched; `decays` selects the parameters that receive weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    state: OptimizerState<T>,
    trainable: Vec<bool>,
    decays: Vec<bool>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(
        params: &ParamSet<T>,
        config: AdamWConfig,
        trainable: impl Fn(&str) -> bool,
        decays: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        config.validate()?;
        let zeros = |_: (&str, _)| -> Vec<T> { Vec::new() };
        let mut first_moment: Vec<Vec<T>> = params.iter().map(zeros).collect();
        let mut second_moment = first_moment.clone();
        let mut train_flags = Vec::with_capacity(params.len());
        let mut decay_flags = Vec::with_capacity(params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            let train = trainable(name);
            if train {
                first_moment[i] = vec![T::zero(); t.numel()];
                second_moment[i] = vec![T::zero(); t.numel()];
            }
            train_flags.push(train);
            decay_flags.push(train && decays(name));
        }
        Ok(Self {
            config,
            state: OptimizerState {
                step_count: 0,
                first_moment,
                second_moment,
            },
            trainable: train_flags,
            decays: decay_flags,
        })
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One update using the gradients accumulated in `params` and learning rate `lr`.
    /// Any non-finite gradient aborts the step before a single value is written.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {name}")));
                }
            }
        }
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr_t = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.epsilon);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);

        for i in 0..params.len() {
            if !self.trainable[i] {
                continue;
            }
            let tensor = params.tensor_at_mut(i);
            let grad = tensor.grad().map(<[T]>::to_vec);
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            let apply_decay = self.decays[i];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                if apply_decay {
                    data[j] = data[j] * decay;
                }
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] = data[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linearly decayed learning rate for optimizer step `step` (0-based) of `total`.
pub fn linear_decay(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![value])).unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(1.25);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg, |_| true, |_| true).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(opt.state().step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&p, cfg, |_| true, |_| true).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        // m_hat = v_hat = 1 after bias correction: p' = 1 - 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = single(2.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default(), |_| true, |_| true).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default(), |_| true, |_| true).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        let err = opt.step(&mut p, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
        assert_eq!(opt.state().step_count, 0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = single(3.0);
        p.insert("frozen", Tensor::from_vec(vec![4.0])).unwrap();
        let mut opt = AdamW::new(&p, AdamWConfig::default(), |n| n != "frozen", |_| true).unwrap();
        p.get_mut("frozen").unwrap().accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        assert_eq!(p.get("frozen").unwrap().data(), &[4.0]);
        assert!(opt.state().first_moment[1].is_empty());
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::zeros(vec![2, 3])).unwrap();
        p.insert("b", Tensor::zeros(vec![5])).unwrap();
        let opt = AdamW::new(&p, AdamWConfig::default(), |_| true, |_| true).unwrap();
        for (i, (_, t)) in p.iter().enumerate() {
            assert_eq!(opt.state().first_moment[i].len(), t.numel());
            assert_eq!(opt.state().second_moment[i].len(), t.numel());
        }
    }

    #[test]
    fn linear_schedule_reaches_zero_at_end() {
        assert_eq!(linear_decay(1.0, 0, 4), 1.0);
        assert_eq!(linear_decay(1.0, 2, 4), 0.5);
        assert_eq!(linear_decay(1.0, 4, 4), 0.0);
    }
}
