//! Exponential moving average of model parameters.

use crate::model::{ParamVector, Real};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T> {
    pub momentum: f64,
    pub shadow: ParamVector<T>,
}

/// Shadow copy initialised to the current parameters.
pub fn ema_init<T: Real>(params: &ParamVector<T>, momentum: f64) -> Ema<T> {
    Ema {
        momentum,
        shadow: params.clone(),
    }
}

/// `shadow ← m · shadow + (1 − m) · params`.
pub fn ema_update<T: Real>(ema: &mut Ema<T>, params: &ParamVector<T>) {
    assert!(ema.shadow.same_layout(params), "EMA layout mismatch");
    let m = T::from(ema.momentum).unwrap();
    let one_m = T::one() - m;
    for (s, p) in ema.shadow.iter_mut().zip(params.iter()) {
        ndarray::Zip::from(&mut s.value)
            .and(&p.value)
            .for_each(|s, &p| *s = m * *s + one_m * p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use ndarray::{ArrayD, IxDyn};

    fn scalar(v: f64) -> ParamVector<f64> {
        let mut p = ParamVector::new();
        p.push("f.x".into(), ParamGroup::Backbone, ArrayD::from_elem(IxDyn(&[2]), v));
        p
    }

    #[test]
    fn half_momentum_sequence() {
        let mut e = ema_init(&scalar(0.0), 0.5);
        let one = scalar(1.0);
        let mut seen = Vec::new();
        for _ in 0..3 {
            ema_update(&mut e, &one);
            seen.push(e.shadow.flat_get(0));
        }
        assert_eq!(seen, vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn closed_form_for_constant_params() {
        let m = 0.999;
        let mut e = ema_init(&scalar(2.0), m);
        let target = scalar(-1.0);
        for _ in 0..500 {
            ema_update(&mut e, &target);
        }
        let expect = -1.0 + 3.0 * m.powi(500);
        assert!((e.shadow.flat_get(1) - expect).abs() < 1e-10);
    }

    #[test]
    fn zero_momentum_copies() {
        let mut e = ema_init(&scalar(5.0), 0.0);
        ema_update(&mut e, &scalar(1.5));
        assert_eq!(e.shadow, scalar(1.5));
    }
}
