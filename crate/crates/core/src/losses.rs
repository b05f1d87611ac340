//! Temperature-scaled contrastive losses over a sample x class similarity matrix.

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("label {label} at row {row} is out of range for {n_classes} classes")]
    LabelOutOfRange { row: usize, label: usize, n_classes: usize },
    #[error("{labels} labels for {rows} similarity rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("empty batch")]
    EmptyBatch,
}

/// Scalar loss and its gradient with respect to the similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad_s: Matrix,
}

fn check_inputs(s: &Matrix, labels: &[usize], tau: f64) -> Result<(), LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::InvalidTau(tau));
    }
    if s.rows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != s.rows() {
        return Err(LossError::LengthMismatch {
            labels: labels.len(),
            rows: s.rows(),
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= s.cols() {
            return Err(LossError::LabelOutOfRange {
                row,
                label,
                n_classes: s.cols(),
            });
        }
    }
    Ok(())
}

/// Softmax cross-entropy of each row of `s / tau` against its label, with the
/// softmax restricted to the columns where `active[j]` is true.
fn restricted_cross_entropy(s: &Matrix, labels: &[usize], tau: f64, active: &[bool]) -> LossResult {
    let (b, c) = (s.rows(), s.cols());
    let inv_tau = 1.0 / tau;
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    for (i, &k) in labels.iter().enumerate() {
        let row = s.row(i);
        let max = row
            .iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v * inv_tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(i);
        let mut denom = 0.0;
        for j in 0..c {
            if active[j] {
                let e = (row[j] * inv_tau - max).exp();
                g[j] = e;
                denom += e;
            }
        }
        // shift first so large logits do not swamp the log term
        total += denom.ln() + (max - row[k] * inv_tau);
        for j in 0..c {
            if active[j] {
                g[j] /= denom;
            }
        }
        g[k] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_tau * inv_b;
        }
    }
    LossResult {
        // rounding can leave a tiny negative when one class dominates
        loss: (total * inv_b).max(0.0),
        grad_s: grad,
    }
}

/// Mean over the batch of `-log softmax(S_i / tau)[k_i]`, computed with a
/// max-shifted log-sum-exp.
///
/// `grad_s = (softmax(S / tau) - onehot(labels)) / (tau * B)`.
pub fn contrastive_loss(s: &Matrix, labels: &[usize], tau: f64) -> Result<LossResult, LossError> {
    check_inputs(s, labels, tau)?;
    let active = vec![true; s.cols()];
    Ok(restricted_cross_entropy(s, labels, tau, &active))
}

/// Supervised-contrastive variant: the softmax denominator only runs over the
/// classes present among the batch labels, so negatives are in-batch classes.
pub fn supervised_contrastive_loss(s: &Matrix, labels: &[usize], tau: f64) -> Result<LossResult, LossError> {
    check_inputs(s, labels, tau)?;
    let mut active = vec![false; s.cols()];
    for &k in labels {
        active[k] = true;
    }
    Ok(restricted_cross_entropy(s, labels, tau, &active))
}

/// Which loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Contrastive,
    SupervisedContrastive,
}

impl LossKind {
    pub fn compute(self, s: &Matrix, labels: &[usize], tau: f64) -> Result<LossResult, LossError> {
        match self {
            LossKind::Contrastive => contrastive_loss(s, labels, tau),
            LossKind::SupervisedContrastive => supervised_contrastive_loss(s, labels, tau),
        }
    }
}
