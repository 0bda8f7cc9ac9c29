//! Adam with bias correction and per-epoch learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        AdamState {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One Adam update over `(name, param)` pairs with matching `grads`.
    ///
    /// All gradients are checked before any parameter is touched, so a
    /// non-finite gradient leaves params and state unchanged.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (((name, p), g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam_step", format!("{name}: {}", m.len()), g.len()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr0: f64 },
    /// `lr0 · rate^(t−1)`.
    Exponential { lr0: f64, rate: f64 },
    /// `lr0 / (1 + gamma·(t−1))^power`.
    Inverse { lr0: f64, gamma: f64, power: f64 },
}

impl LrSchedule {
    pub fn lr0(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr0 } | LrSchedule::Exponential { lr0, .. } | LrSchedule::Inverse { lr0, .. } => lr0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr0 } => lr0 > 0.0,
            LrSchedule::Exponential { lr0, rate } => lr0 > 0.0 && rate > 0.0,
            LrSchedule::Inverse { lr0, gamma, power } => lr0 > 0.0 && gamma >= 0.0 && power >= 0.0,
        };
        if ok && self.lr0().is_finite() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("learning-rate schedule {self:?}")))
        }
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 {
            return Err(Error::Invalid("epochs are numbered from 1".into()));
        }
        let steps = (epoch - 1) as f64;
        Ok(match *self {
            LrSchedule::Constant { lr0 } => lr0,
            LrSchedule::Exponential { lr0, rate } => lr0 * rate.powf(steps),
            LrSchedule::Inverse { lr0, gamma, power } => lr0 / (1.0 + gamma * steps).powf(power),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_steps(g: f64, steps: usize, lr: f64) -> f64 {
        let mut p = Tensor::vector(vec![0.5]);
        let grad = Tensor::vector(vec![g]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..steps {
            state.step(&mut [("p".into(), &mut p)], &[&grad], lr).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn first_step_closed_form() {
        let p = run_steps(1.0, 1, 1e-4);
        let expected = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15);
        assert!(((p - 0.5) + 1e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_keeps_params_and_counts_step() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        state.step(&mut [("p".into(), &mut p)], &[&g], 1e-3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.t(), 1);
    }

    #[test]
    fn two_steps_match_scalar_reimplementation() {
        let (lr, g) = (1e-2, 0.3);
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let (mut theta, mut m, mut v) = (0.5_f64, 0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(run_steps(g, 2, lr), theta);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let err = state
            .step(&mut [("task.0.w".into(), &mut p)], &[&g], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("task.0.w"));
        assert_eq!(state.t(), 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn schedules() {
        let inv = LrSchedule::Inverse { lr0: 1e-4, gamma: 1e-4, power: 0.75 };
        assert_eq!(inv.lr_at(1).unwrap(), 1e-4);
        let lr101 = inv.lr_at(101).unwrap();
        // 1e-4 / 1.01^0.75
        assert!((lr101 - 9.925650290240804e-5).abs() < 1e-12, "{lr101}");
        let exp = LrSchedule::Exponential { lr0: 1e-4, rate: 0.99 };
        assert!((exp.lr_at(2).unwrap() - 9.9e-5).abs() < 1e-18);
        assert!(inv.lr_at(0).is_err());
        let mut prev = f64::INFINITY;
        for t in 1..200 {
            let lr = inv.lr_at(t).unwrap();
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }
}
