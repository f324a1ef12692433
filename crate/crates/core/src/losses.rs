//! Loss terms and their gradients.
//!
//! Each loss returns its value together with the gradient with respect to its
//! live (student) input. Teacher inputs are passed as [`StopGrad`], which has no
//! gradient slot at all: nothing computed here can flow back into them.

use ndarray::{Array1, Array2, Axis, Zip};
use thiserror::Error;

use crate::model::{ParamGroup, ParamVector, Real};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label row {0} is not one-hot")]
    NotOneHot(usize),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("tau = {0} is outside [0,1]")]
    Tau(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

/// Smallest norm used in the cosine loss denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// A teacher-side value treated as a constant during backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGrad<T>(Array2<T>);

impl<T: Real> StopGrad<T> {
    pub fn new(value: Array2<T>) -> Self {
        Self(value)
    }

    pub fn value(&self) -> &Array2<T> {
        &self.0
    }
}

/// Loss value and gradient with respect to the live input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelLoss<T> {
    pub value: T,
    pub grad: Array2<T>,
    /// Fraction of rows whose teacher confidence exceeds τ.
    pub mask_rate: f64,
    pub mask: Vec<bool>,
    pub pseudo_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslLoss<T> {
    pub value: T,
    pub grad: Array2<T>,
    /// Rows whose norm had to be clamped (cosine loss only).
    pub degenerate: usize,
}

/// Per-step scalars.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_l: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub l_wd: f64,
    pub total: f64,
    pub mask_rate: f64,
    pub degenerate: usize,
}

fn check_finite<T: Real>(x: &Array2<T>, what: &'static str) -> Result<(), LossError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

fn check_same<T>(a: &Array2<T>, b: &Array2<T>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::Shape(a.dim(), b.dim()));
    }
    Ok(())
}

/// Row-wise log-softmax computed with the log-sum-exp shift.
pub fn log_softmax<T: Real>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<T: Real>(x: &Array2<T>) -> Array2<T> {
    log_softmax(x).mapv(|v| v.exp())
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax<T: Real>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy between one-hot labels and softmax(logits).
pub fn supervised_loss<T: Real>(labels: &Array2<T>, logits: &Array2<T>) -> Result<LossGrad<T>, LossError> {
    check_same(labels, logits)?;
    check_finite(logits, "logits")?;
    for (i, row) in labels.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(LossError::NotOneHot(i));
        }
    }
    let n = T::from(logits.nrows()).unwrap();
    let logp = log_softmax(logits);
    let value = -Zip::from(labels).and(&logp).fold(T::zero(), |acc, &y, &lp| acc + y * lp) / n;
    let grad = (logp.mapv(|v| v.exp()) - labels) / n;
    Ok(LossGrad { value, grad })
}

/// Confidence-masked cross-entropy against the teacher's hard pseudo-labels.
/// The mask uses a strict `max(w_i) > tau`; any `tau ≥ 1` masks every sample.
pub fn pseudo_label_loss<T: Real>(
    weak_logits: &StopGrad<T>,
    strong_logits: &Array2<T>,
    tau: f64,
) -> Result<PseudoLabelLoss<T>, LossError> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(LossError::Tau(tau));
    }
    let weak = weak_logits.value();
    check_same(weak, strong_logits)?;
    check_finite(weak, "weak logits")?;
    check_finite(strong_logits, "strong logits")?;
    let m = strong_logits.nrows();
    let mf = T::from(m).unwrap();
    let teacher = softmax(weak);
    let logq = log_softmax(strong_logits);
    let mut grad = Array2::<T>::zeros(strong_logits.raw_dim());
    let mut value = T::zero();
    let mut mask = Vec::with_capacity(m);
    let mut pseudo_labels = Vec::with_capacity(m);
    for i in 0..m {
        let row = teacher.row(i);
        let label = argmax(row);
        let confident = row[label].to_f64().unwrap() > tau;
        mask.push(confident);
        pseudo_labels.push(label);
        if confident {
            value = value - logq[[i, label]];
            let mut g = grad.row_mut(i);
            Zip::from(&mut g).and(logq.row(i)).for_each(|g, &lq| *g = lq.exp() / mf);
            g[label] = g[label] - T::one() / mf;
        }
    }
    let masked = mask.iter().filter(|&&b| b).count();
    Ok(PseudoLabelLoss {
        value: value / mf,
        grad,
        mask_rate: if m == 0 { 0.0 } else { masked as f64 / m as f64 },
        mask,
        pseudo_labels,
    })
}

/// Negative mean cosine similarity between `projected = h(v)` and teacher
/// features `z`. Norms below [`COSINE_EPS`] are clamped and counted.
pub fn cosine_ssl_loss<T: Real>(projected: &Array2<T>, teacher: &StopGrad<T>) -> Result<SslLoss<T>, LossError> {
    let z = teacher.value();
    check_same(projected, z)?;
    check_finite(projected, "projected features")?;
    check_finite(z, "teacher features")?;
    let m = projected.nrows();
    let mf = T::from(m).unwrap();
    let eps = T::from(COSINE_EPS).unwrap();
    let mut grad = Array2::<T>::zeros(projected.raw_dim());
    let mut total = T::zero();
    let mut degenerate = 0;
    for i in 0..m {
        let a = projected.row(i);
        let b = z.row(i);
        let na_raw = a.dot(&a).sqrt();
        let nb_raw = b.dot(&b).sqrt();
        if na_raw < eps || nb_raw < eps {
            degenerate += 1;
        }
        let na = na_raw.max(eps);
        let nb = nb_raw.max(eps);
        let cos = a.dot(&b) / (na * nb);
        total = total + cos;
        let mut g = grad.row_mut(i);
        if na_raw >= eps {
            Zip::from(&mut g)
                .and(&a)
                .and(&b)
                .for_each(|g, &av, &bv| *g = -(bv / (na * nb) - cos * av / (na * na)) / mf);
        } else {
            Zip::from(&mut g).and(&b).for_each(|g, &bv| *g = -(bv / (na * nb)) / mf);
        }
    }
    Ok(SslLoss {
        value: -total / mf,
        grad,
        degenerate,
    })
}

/// Mean squared error per feature dimension.
pub fn mse_ssl_loss<T: Real>(projected: &Array2<T>, teacher: &StopGrad<T>) -> Result<SslLoss<T>, LossError> {
    let z = teacher.value();
    check_same(projected, z)?;
    let (m, d) = projected.dim();
    let scale = T::from(m * d).unwrap();
    let diff = projected - z;
    let value = diff.iter().map(|&v| v * v).sum::<T>() / scale;
    let two = T::one() + T::one();
    Ok(SslLoss {
        value,
        grad: diff.mapv(|v| two * v / scale),
        degenerate: 0,
    })
}

/// Mean of `H(σ(h(v)), σ(z/λ))` with `H(x, y) = -Σ x log y`. The student
/// distribution is the weighting argument, the sharpened teacher the log
/// argument.
pub fn softmax_ssl_loss<T: Real>(
    projected: &Array2<T>,
    teacher: &StopGrad<T>,
    temperature: f64,
) -> Result<SslLoss<T>, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let z = teacher.value();
    check_same(projected, z)?;
    let m = T::from(projected.nrows()).unwrap();
    let lambda = T::from(temperature).unwrap();
    let log_t = log_softmax(&z.mapv(|v| v / lambda));
    let p = softmax(projected);
    let mut grad = Array2::<T>::zeros(projected.raw_dim());
    let mut total = T::zero();
    for i in 0..projected.nrows() {
        let (pi, li) = (p.row(i), log_t.row(i));
        let pl = pi.dot(&li);
        total = total - pl;
        Zip::from(grad.row_mut(i))
            .and(&pi)
            .and(&li)
            .for_each(|g, &pk, &lk| *g = -pk * (lk - pl) / m);
    }
    Ok(SslLoss {
        value: total / m,
        grad,
        degenerate: 0,
    })
}

/// `w_d · ½ (‖θ_f‖² + ‖θ_g‖² + ‖θ_h‖²)`.
pub fn weight_decay_term<T: Real>(params: &ParamVector<T>, w_d: f64) -> T {
    let sum: T = ParamGroup::ALL.iter().map(|&g| params.squared_norm(g)).sum();
    T::from(w_d * 0.5).unwrap() * sum
}

pub fn total_loss(l_l: f64, l_p: f64, l_s: f64, w_s: f64, l_wd: f64) -> f64 {
    l_l + l_p + w_s * l_s + l_wd
}

/// One-hot encode class indices.
pub fn one_hot<T: Real>(labels: &[usize], num_classes: usize) -> Array2<T> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &c) in labels.iter().enumerate() {
        out[[i, c]] = T::one();
    }
    out
}

/// Per-row sum, used by tests and diagnostics.
pub fn row_sums<T: Real>(x: &Array2<T>) -> Array1<T> {
    x.sum_axis(Axis(1))
}
