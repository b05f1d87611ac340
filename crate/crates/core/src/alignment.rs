//! Cosine-similarity alignment of image and image-text embeddings against the
//! class-text matrix, and the convex fusion `S = alpha * W + (1 - alpha) * Q`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, l2_norm, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("row {row} of {matrix} has zero norm")]
    ZeroNormRow { matrix: &'static str, row: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
}

/// Fusion weight and softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.6, tau: 0.1 }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64, tau: f64) -> Result<Self, AlignmentError> {
        let c = Self { alpha, tau };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AlignmentError::InvalidAlpha(self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AlignmentError::InvalidTau(self.tau));
        }
        Ok(())
    }
}

fn row_norms(m: &Matrix, name: &'static str) -> Result<Vec<f64>, AlignmentError> {
    m.row_iter()
        .enumerate()
        .map(|(row, r)| {
            let n = l2_norm(r);
            if n == 0.0 {
                Err(AlignmentError::ZeroNormRow { matrix: name, row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// `C[i][j] = <a_i, t_j> / (|a_i| |t_j|)` for every row of `a` against every row of `t`.
pub fn cosine_similarity_matrix(a: &Matrix, t: &Matrix) -> Result<Matrix, AlignmentError> {
    if a.cols() != t.cols() {
        return Err(AlignmentError::DimMismatch {
            left: a.cols(),
            right: t.cols(),
        });
    }
    let a_norms = row_norms(a, "embeddings")?;
    let t_norms = row_norms(t, "text")?;
    let n = t.rows();
    let mut out = Matrix::zeros(a.rows(), n);
    if n == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| {
            let ai = a.row(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(ai, t.row(j)) / (a_norms[i] * t_norms[j]);
            }
        });
    Ok(out)
}

/// Gradient of a scalar through `C = cosine_similarity_matrix(a, t)` with respect to `a`.
///
/// With `u_i = a_i / |a_i|`, `dC_ij/da_i = (t_j/|t_j| - C_ij u_i) / |a_i|`.
pub fn cosine_similarity_backward(
    a: &Matrix,
    t: &Matrix,
    cos: &Matrix,
    grad_cos: &Matrix,
) -> Result<Matrix, AlignmentError> {
    if !grad_cos.same_shape(cos) || cos.rows() != a.rows() || cos.cols() != t.rows() {
        return Err(AlignmentError::ShapeMismatch {
            left: (cos.rows(), cos.cols()),
            right: (grad_cos.rows(), grad_cos.cols()),
        });
    }
    let a_norms = row_norms(a, "embeddings")?;
    let t_norms = row_norms(t, "text")?;
    let dim = a.cols();
    let mut out = Matrix::zeros(a.rows(), dim);
    if dim == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(dim).enumerate().for_each(|(i, g)| {
        let ai = a.row(i);
        let inv = 1.0 / a_norms[i];
        let mut radial = 0.0;
        for (j, tn) in t_norms.iter().enumerate() {
            let gc = grad_cos.get(i, j);
            if gc == 0.0 {
                continue;
            }
            let scale = gc * inv / tn;
            for (gk, tk) in g.iter_mut().zip(t.row(j)) {
                *gk += scale * tk;
            }
            radial += gc * cos.get(i, j);
        }
        let r = radial * inv * inv;
        for (gk, ak) in g.iter_mut().zip(ai) {
            *gk -= r * ak;
        }
    });
    Ok(out)
}

/// `S = alpha * W + (1 - alpha) * Q`.
pub fn fuse(w: &Matrix, q: &Matrix, config: &FusionConfig) -> Result<Matrix, AlignmentError> {
    if !w.same_shape(q) {
        return Err(AlignmentError::ShapeMismatch {
            left: (w.rows(), w.cols()),
            right: (q.rows(), q.cols()),
        });
    }
    let alpha = config.alpha;
    let beta = 1.0 - alpha;
    let data = w
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&wv, &qv)| alpha * wv + beta * qv)
        .collect();
    Ok(Matrix::from_vec(w.rows(), w.cols(), data).expect("same shape"))
}
