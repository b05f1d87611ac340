//! Projection head: an MLP mapping image-description embeddings (`F'`) into the
//! image embedding space (`F`).
//!
//! Hidden layers are `affine -> GELU -> dropout`; the output layer is affine
//! only. Dropout is inverted (kept units scaled by `1 / (1 - p)`) and drawn from
//! an explicit seed, so a pass is a pure function of its inputs. Gradients are
//! derived by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::matrix::Matrix;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("invalid layer dims {0:?}: need at least two positive sizes")]
    InvalidDims(Vec<usize>),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("input has dim {actual}, network expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("forward cache does not match parameters or gradient shape")]
    CacheMismatch,
    #[error("flat parameter vector has length {actual}, expected {expected}")]
    FlatLength { expected: usize, actual: usize },
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights (`fan_in x fan_out`) and biases of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    dropout_rate: f64,
}

/// Tensors shaped like [`MlpParams`]: gradients or optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

fn check_dims(layer_dims: &[usize]) -> Result<(), MlpError> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(MlpError::InvalidDims(layer_dims.to_vec()));
    }
    Ok(())
}

fn check_dropout(p: f64) -> Result<(), MlpError> {
    if !(0.0..1.0).contains(&p) {
        return Err(MlpError::InvalidDropout(p));
    }
    Ok(())
}

fn flat_len(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn flatten(weights: &[Matrix], biases: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        out.extend_from_slice(w.as_slice());
        out.extend_from_slice(b);
    }
    out
}

fn unflatten(layer_dims: &[usize], flat: &[f64]) -> Result<(Vec<Matrix>, Vec<Vec<f64>>), MlpError> {
    let expected = flat_len(layer_dims);
    if flat.len() != expected {
        return Err(MlpError::FlatLength {
            expected,
            actual: flat.len(),
        });
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut at = 0;
    for w in layer_dims.windows(2) {
        let n = w[0] * w[1];
        weights.push(Matrix::from_vec(w[0], w[1], flat[at..at + n].to_vec()).expect("sized"));
        at += n;
        biases.push(flat[at..at + w[1]].to_vec());
        at += w[1];
    }
    Ok((weights, biases))
}

impl MlpParams {
    /// Assembles parameters from explicit weights and biases.
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>, dropout_rate: f64) -> Result<Self, MlpError> {
        check_dropout(dropout_rate)?;
        let Some(first) = weights.first() else {
            return Err(MlpError::InvalidDims(vec![]));
        };
        let mut layer_dims = vec![first.rows()];
        for w in &weights {
            if w.rows() != *layer_dims.last().unwrap() {
                return Err(MlpError::InvalidDims(layer_dims));
            }
            layer_dims.push(w.cols());
        }
        check_dims(&layer_dims)?;
        if biases.len() != weights.len() || biases.iter().zip(&weights).any(|(b, w)| b.len() != w.cols()) {
            return Err(MlpError::InvalidDims(layer_dims));
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            dropout_rate,
        })
    }

    /// Rebuilds parameters from the layer-ordered, weights-then-biases flat layout.
    pub fn from_flat(layer_dims: &[usize], dropout_rate: f64, flat: &[f64]) -> Result<Self, MlpError> {
        check_dims(layer_dims)?;
        check_dropout(dropout_rate)?;
        let (weights, biases) = unflatten(layer_dims, flat)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            dropout_rate,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn n_params(&self) -> usize {
        flat_len(&self.layer_dims)
    }

    /// Layer-ordered, weights-then-biases per layer.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.first_non_finite().is_none())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Zero tensors of matching shape.
    pub fn zeros_like(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub(crate) fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(&mut f);
        }
        self.biases.iter_mut().flatten().for_each(f);
    }
}

impl MlpGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn from_flat(layer_dims: &[usize], flat: &[f64]) -> Result<Self, MlpError> {
        check_dims(layer_dims)?;
        let (weights, biases) = unflatten(layer_dims, flat)?;
        Ok(Self { weights, biases })
    }

    /// True when every tensor has the same shape as the matching parameter tensor.
    pub fn matches(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self.biases.len() == params.biases.len()
            && self.weights.iter().zip(&params.weights).all(|(a, b)| a.same_shape(b))
            && self.biases.iter().zip(&params.biases).all(|(a, b)| a.len() == b.len())
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }

    pub(crate) fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(&mut f);
        }
        self.biases.iter_mut().flatten().for_each(f);
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(layer_dims: &[usize], dropout_rate: f64, seed: u64) -> Result<MlpParams, MlpError> {
    check_dims(layer_dims)?;
    check_dropout(dropout_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        weights.push(Matrix::from_vec(fan_in, fan_out, values).expect("sized"));
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpParams {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        dropout_rate,
    })
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx gelu(x) = Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input to each layer: `X` for layer 0, the (dropped-out) activation otherwise.
    pub inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pub pre_activations: Vec<Matrix>,
    /// Per hidden layer, the dropout multipliers (0 or `1 / (1 - p)`); `None` when no dropout ran.
    pub masks: Vec<Option<Matrix>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

fn add_bias(z: &mut Matrix, b: &[f64]) {
    let cols = z.cols();
    if cols == 0 {
        return;
    }
    for row in z.as_mut_slice().chunks_mut(cols) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Runs the network on `x` (one row per item).
///
/// `seed` drives the dropout masks in [`Mode::Train`] and is ignored in [`Mode::Eval`].
pub fn forward(x: &Matrix, params: &MlpParams, mode: Mode, seed: u64) -> Result<(Matrix, ForwardCache), MlpError> {
    if x.cols() != params.input_dim() {
        return Err(MlpError::DimMismatch {
            expected: params.input_dim(),
            actual: x.cols(),
        });
    }
    let p = params.dropout_rate;
    let apply_dropout = mode == Mode::Train && p > 0.0;
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n = params.n_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n - 1);
    let mut masks = Vec::with_capacity(n - 1);
    let mut h = x.clone();
    for l in 0..n {
        let mut z = h.matmul(&params.weights[l]);
        add_bias(&mut z, &params.biases[l]);
        inputs.push(h);
        if l + 1 == n {
            return Ok((
                z,
                ForwardCache {
                    inputs,
                    pre_activations,
                    masks,
                },
            ));
        }
        let mut a = z.map(gelu);
        let mask = if apply_dropout {
            let m = Matrix::from_vec(
                z.rows(),
                z.cols(),
                (0..z.rows() * z.cols())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect(),
            )
            .expect("sized");
            for (v, k) in a.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= k;
            }
            Some(m)
        } else {
            None
        };
        pre_activations.push(z);
        masks.push(mask);
        h = a;
    }
    unreachable!("at least one layer")
}

/// Back-propagates `grad_out` (dLoss/dOutput) through the pass recorded in `cache`.
///
/// Returns parameter gradients and the gradient with respect to the input.
pub fn backward(cache: &ForwardCache, params: &MlpParams, grad_out: &Matrix) -> Result<(MlpGrads, Matrix), MlpError> {
    let n = params.n_layers();
    let batch = cache.batch_size();
    let consistent = cache.inputs.len() == n
        && cache.pre_activations.len() + 1 == n
        && cache.masks.len() + 1 == n
        && cache
            .inputs
            .iter()
            .zip(&params.weights)
            .all(|(x, w)| x.rows() == batch && x.cols() == w.rows())
        && cache
            .pre_activations
            .iter()
            .zip(&params.weights)
            .all(|(z, w)| z.rows() == batch && z.cols() == w.cols())
        && cache
            .masks
            .iter()
            .zip(&cache.pre_activations)
            .all(|(m, z)| m.as_ref().is_none_or(|m| m.same_shape(z)))
        && grad_out.rows() == batch
        && grad_out.cols() == params.output_dim();
    if !consistent {
        return Err(MlpError::CacheMismatch);
    }

    let mut grads = params.zeros_like();
    let mut g = grad_out.clone();
    for l in (0..n).rev() {
        grads.weights[l] = cache.inputs[l].t_matmul(&g);
        grads.biases[l] = g.column_sums();
        let mut upstream = g.matmul_t(&params.weights[l]);
        if l > 0 {
            let z = &cache.pre_activations[l - 1];
            let mask = cache.masks[l - 1].as_ref();
            for (idx, v) in upstream.as_mut_slice().iter_mut().enumerate() {
                let m = mask.map_or(1.0, |m| m.as_slice()[idx]);
                *v *= m * gelu_derivative(z.as_slice()[idx]);
            }
        }
        g = upstream;
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64, dims: &[usize], p: f64) -> MlpParams {
        let mut params = init_params(dims, p, seed).unwrap();
        // non-zero biases so their gradients are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for b in params.biases.iter_mut().flatten() {
            *b = rng.random_range(-0.5..0.5);
        }
        params
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn glorot_bound() {
        let p = init_params(&[4, 4], 0.0, 7).unwrap();
        let limit = (6.0f64 / 8.0).sqrt();
        assert!((limit - 0.866).abs() < 1e-3);
        assert!(p.weights[0].as_slice().iter().all(|w| w.abs() <= limit));
        assert!(p.biases[0].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(
            init_params(&[5, 3, 2], 0.1, 42).unwrap(),
            init_params(&[5, 3, 2], 0.1, 42).unwrap()
        );
        assert_ne!(
            init_params(&[5, 3, 2], 0.1, 42).unwrap(),
            init_params(&[5, 3, 2], 0.1, 43).unwrap()
        );
    }

    #[test]
    fn out_of_domain_shapes() {
        let p = init_params(&[768, 1045, 512], 0.27, 0).unwrap();
        assert_eq!((p.weights[0].rows(), p.weights[0].cols()), (768, 1045));
        assert_eq!((p.weights[1].rows(), p.weights[1].cols()), (1045, 512));
    }

    #[test]
    fn invalid_dims_and_dropout() {
        assert!(matches!(init_params(&[4], 0.0, 0), Err(MlpError::InvalidDims(_))));
        assert!(matches!(init_params(&[4, 0, 2], 0.0, 0), Err(MlpError::InvalidDims(_))));
        assert!(matches!(init_params(&[4, 2], 1.0, 0), Err(MlpError::InvalidDropout(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-8);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = MlpParams::from_parts(vec![Matrix::identity(3)], vec![vec![0.0; 3]], 0.0).unwrap();
        let x = random_matrix(4, 3, 1);
        let (out, _) = forward(&x, &params, Mode::Train, 9).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let params = small_net(3, &[5, 6, 4], 0.0);
        let x = random_matrix(7, 5, 2);
        let (a, _) = forward(&x, &params, Mode::Train, 1).unwrap();
        let (b, _) = forward(&x, &params, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_forward_is_deterministic() {
        let params = small_net(3, &[5, 6, 6, 4], 0.4);
        let x = random_matrix(7, 5, 2);
        let (a, ca) = forward(&x, &params, Mode::Train, 11).unwrap();
        let (b, cb) = forward(&x, &params, Mode::Train, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca.masks, cb.masks);
        let (c, _) = forward(&x, &params, Mode::Train, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = small_net(3, &[5, 4], 0.0);
        assert_eq!(
            forward(&Matrix::zeros(2, 6), &params, Mode::Eval, 0).unwrap_err(),
            MlpError::DimMismatch { expected: 5, actual: 6 }
        );
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let params = small_net(5, &[4, 6, 3], 0.3);
        let x = random_matrix(5, 4, 3);
        let (_, cache) = forward(&x, &params, Mode::Train, 4).unwrap();
        let (g, gx) = backward(&cache, &params, &Matrix::zeros(5, 3)).unwrap();
        assert!(g.is_zero());
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_sum_loss_closed_form() {
        let params = small_net(8, &[3, 2], 0.0);
        let x = random_matrix(4, 3, 5);
        let (_, cache) = forward(&x, &params, Mode::Eval, 0).unwrap();
        let ones = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let (g, _) = backward(&cache, &params, &ones).unwrap();
        // dL/dW[i][j] = sum_b X[b][i]
        for i in 0..3 {
            let col_sum: f64 = (0..4).map(|b| x.get(b, i)).sum();
            for j in 0..2 {
                assert!((g.weights[0].get(i, j) - col_sum).abs() < 1e-14);
            }
        }
        assert_eq!(g.biases[0], vec![4.0, 4.0]);
    }

    #[test]
    fn cache_mismatch_detected() {
        let params = small_net(5, &[4, 6, 3], 0.0);
        let other = small_net(5, &[4, 5, 3], 0.0);
        let (_, cache) = forward(&random_matrix(2, 4, 1), &other, Mode::Eval, 0).unwrap();
        assert_eq!(
            backward(&cache, &params, &Matrix::zeros(2, 3)).unwrap_err(),
            MlpError::CacheMismatch
        );
        let (_, cache) = forward(&random_matrix(2, 4, 1), &params, Mode::Eval, 0).unwrap();
        assert_eq!(
            backward(&cache, &params, &Matrix::zeros(3, 3)).unwrap_err(),
            MlpError::CacheMismatch
        );
    }

    #[test]
    fn flat_round_trip() {
        let params = small_net(2, &[3, 4, 2], 0.2);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.n_params());
        assert_eq!(MlpParams::from_flat(params.layer_dims(), 0.2, &flat).unwrap(), params);
        assert!(matches!(
            MlpParams::from_flat(params.layer_dims(), 0.2, &flat[1..]),
            Err(MlpError::FlatLength { .. })
        ));
    }
}
