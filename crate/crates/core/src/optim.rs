//! Cosine learning-rate decay and SGD with Nesterov momentum.

use thiserror::Error;

use crate::model::{Gradients, ParamVector, Real};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("step {step} is past the schedule end {total}")]
    PastEnd { step: u64, total: u64 },
    #[error("non-finite gradient; step skipped")]
    NonFiniteGradient,
    #[error("gradient layout does not match parameters")]
    Layout,
}

/// `η(k) = η0 · cos(γπk / 2K)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub eta0: f64,
    pub gamma: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(eta0: f64, gamma: f64, total_steps: u64) -> Self {
        Self {
            eta0,
            gamma,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::PastEnd {
                step,
                total: self.total_steps,
            });
        }
        let k = step as f64;
        let big_k = self.total_steps.max(1) as f64;
        Ok(self.eta0 * (self.gamma * std::f64::consts::PI * k / (2.0 * big_k)).cos())
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub velocity: Gradients<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamVector<T>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }
}

/// One Nesterov step, in the form used by common deep-learning frameworks:
///
/// ```text
/// v ← μ v + g
/// θ ← θ − lr (g + μ v)
/// ```
///
/// Weight decay is not applied here; it enters through the gradient of the
/// loss. A non-finite gradient leaves parameters and velocity untouched.
pub fn sgd_step<T: Real>(
    params: &mut ParamVector<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<(), OptimError> {
    if grads.tensors.len() != params.len() || state.velocity.tensors.len() != params.len() {
        return Err(OptimError::Layout);
    }
    if !grads.is_finite() {
        return Err(OptimError::NonFiniteGradient);
    }
    let mu = T::from(state.momentum).unwrap();
    let lr = T::from(lr).unwrap();
    for ((p, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut state.velocity.tensors) {
        if p.value.shape() != g.shape() {
            return Err(OptimError::Layout);
        }
        ndarray::Zip::from(&mut p.value).and(g).and(v).for_each(|p, &g, v| {
            *v = mu * *v + g;
            *p = *p - lr * (g + mu * *v);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use ndarray::{ArrayD, IxDyn};

    fn scalar(v: f64) -> ParamVector<f64> {
        let mut p = ParamVector::new();
        p.push("f.x".into(), ParamGroup::Backbone, ArrayD::from_elem(IxDyn(&[1]), v));
        p
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::new(0.3, 7.0 / 8.0, 1000);
        assert_eq!(s.lr_at(0).unwrap(), 0.3);
        assert!((s.lr_at(1000).unwrap() - 0.3 * (7.0 * std::f64::consts::PI / 16.0).cos()).abs() < 1e-15);
        assert!((s.lr_at(1000).unwrap() - 0.0585).abs() < 1e-4);
        let s = LrSchedule::new(0.3, 5.0 / 8.0, 1000);
        assert!((s.lr_at(1000).unwrap() - 0.1667).abs() < 1e-4);
        assert_eq!(
            s.lr_at(1001),
            Err(OptimError::PastEnd {
                step: 1001,
                total: 1000
            })
        );
    }

    #[test]
    fn schedule_is_monotone() {
        let s = LrSchedule::new(0.3, 7.0 / 8.0, 500);
        let lrs: Vec<f64> = (0..=500).map(|k| s.lr_at(k).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, 0.9);
        let mut g = p.zeros_like();
        g.tensors[0][[0]] = 0.5;
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        // v1 = 0.5, θ1 = 1 - 0.1(0.5 + 0.45) = 0.905
        assert!((p.flat_get(0) - 0.905).abs() < 1e-12);
        g.tensors[0][[0]] = -0.2;
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        // v2 = 0.45 - 0.2 = 0.25, θ2 = 0.905 - 0.1(-0.2 + 0.225)
        assert!((st.velocity.flat_get(0) - 0.25).abs() < 1e-12);
        assert!((p.flat_get(0) - 0.9025).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_fixed_point() {
        let mut p = scalar(3.0);
        let mut st = OptimizerState::new(&p, 0.9);
        let g = p.zeros_like();
        sgd_step(&mut p, &g, &mut st, 0.3).unwrap();
        assert_eq!(p.flat_get(0), 3.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p, 0.9);
        let mut g = p.zeros_like();
        g.tensors[0][[0]] = f64::NAN;
        assert_eq!(sgd_step(&mut p, &g, &mut st, 0.1), Err(OptimError::NonFiniteGradient));
        assert_eq!(p.flat_get(0), 1.0);
        assert_eq!(st.velocity.flat_get(0), 0.0);
    }

    #[test]
    fn decays_quadratic_with_weight_decay_gradient() {
        // minimising ½ w θ² through the loss gradient alone
        let mut p = scalar(2.0);
        let mut st = OptimizerState::new(&p, 0.9);
        for _ in 0..200 {
            let mut g = p.zeros_like();
            g.add_scaled_params(&p, 0.5);
            sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert!(p.flat_get(0).abs() < 1e-3);
    }
}
