//! Mini-batch SGD with momentum for the projection head, driven by the
//! contrastive loss over fused similarities.
//!
//! Only the MLP is trainable. `W` depends on frozen image and text embeddings,
//! so the loss gradient reaches the parameters through `Q` alone, scaled by
//! `1 - alpha`.
//!
//! Parameters and velocity are rounded to `f32` after every step. Arithmetic is
//! `f64`; the rounding keeps in-memory state identical to what a checkpoint stores.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{cosine_similarity_backward, cosine_similarity_matrix, fuse, AlignmentError, FusionConfig};
use crate::evaluator::{classify_with_text, compose_text, score, EvalError, PromptSelection};
use crate::losses::{LossError, LossKind};
use crate::matrix::Matrix;
use crate::mlp::{backward, forward, init_params, MlpError, MlpGrads, MlpParams, Mode};
use crate::store::{self, EmbeddingBundle, StoreError};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.f32";
pub const VELOCITY_FILE: &str = "velocity.f32";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bundle has no {0:?} split")]
    MissingSplit(String),
    #[error("shape mismatch between parameters, gradients and velocity")]
    ShapeMismatch,
    #[error("checkpoint schema error in {file}: {detail}")]
    Schema { file: String, detail: String },
    #[error("checkpoint i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<StoreError> for TrainError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => TrainError::Io(e.to_string()),
            StoreError::MissingFile(p) => TrainError::Io(format!("missing file {}", p.display())),
            StoreError::DimensionMismatch { ref file, .. }
            | StoreError::ChecksumMismatch { ref file, .. }
            | StoreError::NonFiniteValue { ref file, .. }
            | StoreError::ManifestSchema { ref file, .. }
            | StoreError::LabelOutOfRange { ref file, .. } => TrainError::Schema {
                file: file.display().to_string(),
                detail: e.to_string(),
            },
            StoreError::InvalidSplitName(_) => TrainError::Io(e.to_string()),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub mlp_hidden_dims: Vec<usize>,
    #[serde(default)]
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::out_of_domain()
    }
}

impl TrainConfig {
    /// Cross-dataset setting: train on one dataset, evaluate on another.
    pub fn out_of_domain() -> Self {
        Self {
            alpha: 0.6,
            tau: 0.1,
            learning_rate: 0.08,
            momentum: 0.8,
            batch_size: 48,
            epochs: 8,
            dropout_rate: 0.27,
            patience: 0,
            seed: 0,
            mlp_hidden_dims: vec![1045],
            loss: LossKind::Contrastive,
        }
    }

    /// In-domain MLP hyperparameters for Snapshot Serengeti.
    pub fn serengeti() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 100,
            epochs: 86,
            dropout_rate: 0.4,
            patience: 20,
            mlp_hidden_dims: vec![1743; 4],
            ..Self::out_of_domain()
        }
    }

    /// In-domain MLP hyperparameters for Terra Incognita.
    pub fn terra() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 100,
            epochs: 86,
            dropout_rate: 0.5,
            patience: 20,
            mlp_hidden_dims: vec![1045],
            ..Self::out_of_domain()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "out_of_domain" => Some(Self::out_of_domain()),
            "serengeti" => Some(Self::serengeti()),
            "terra" => Some(Self::terra()),
            _ => None,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.mlp_hidden_dims.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        Ok(())
    }

    /// `[F', hidden..., F]`.
    pub fn layer_dims(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.mlp_hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.mlp_hidden_dims);
        dims.push(output_dim);
        dims
    }
}

/// Loss and validation accuracy after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Parameters of the best validation epoch (or the initialization when no epoch ran).
    pub params: MlpParams,
    /// Optimizer velocity after the last epoch run.
    pub velocity: MlpGrads,
    pub config: TrainConfig,
    pub prompts: PromptSelection,
    /// Number of epochs run.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Classical momentum: `v <- momentum * v + grad`, `p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    velocity: &mut MlpGrads,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if !grads.matches(params) || !velocity.matches(params) {
        return Err(TrainError::ShapeMismatch);
    }
    let layers = params.weights.len();
    for l in 0..layers {
        let p = params.weights[l].as_mut_slice();
        let v = velocity.weights[l].as_mut_slice();
        let g = grads.weights[l].as_slice();
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
        for ((pi, vi), gi) in params.biases[l]
            .iter_mut()
            .zip(velocity.biases[l].iter_mut())
            .zip(&grads.biases[l])
        {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Item order for one epoch, a deterministic function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, u64::MAX));
    order.shuffle(&mut rng);
    order
}

/// Loss, parameter gradients and fused similarities for one mini-batch.
pub struct BatchGradient {
    pub loss: f64,
    pub grads: MlpGrads,
    pub fused: Matrix,
}

/// Forward and backward pass for one batch: `S = alpha W + (1 - alpha) Q`,
/// loss on `S`, gradient back through `Q` and the MLP.
pub fn batch_gradient(
    image: &Matrix,
    image_text: &Matrix,
    labels: &[usize],
    text: &Matrix,
    params: &MlpParams,
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<BatchGradient, TrainError> {
    let fusion = config.fusion();
    let alpha = fusion.alpha;
    if alpha == 1.0 {
        // the image-text branch has zero weight: no path from the loss to the MLP
        let w = cosine_similarity_matrix(image, text)?;
        let loss = config.loss.compute(&w, labels, fusion.tau)?;
        return Ok(BatchGradient {
            loss: loss.loss,
            grads: params.zeros_like(),
            fused: w,
        });
    }
    let (projected, cache) = forward(image_text, params, Mode::Train, dropout_seed)?;
    let q = cosine_similarity_matrix(&projected, text)?;
    let s = if alpha == 0.0 {
        q.clone()
    } else {
        let w = cosine_similarity_matrix(image, text)?;
        fuse(&w, &q, &fusion)?
    };
    let loss = config.loss.compute(&s, labels, fusion.tau)?;
    let grad_q = loss.grad_s.map(|g| (1.0 - alpha) * g);
    let grad_projected = cosine_similarity_backward(&projected, text, &q, &grad_q)?;
    let (grads, _) = backward(&cache, params, &grad_projected)?;
    Ok(BatchGradient {
        loss: loss.loss,
        grads,
        fused: s,
    })
}

/// One pass over `split` in a shuffled order, one optimizer step per batch
/// (the final partial batch included). Returns the per-item mean loss.
pub fn train_epoch(
    bundle: &EmbeddingBundle,
    split: &str,
    text: &Matrix,
    params: &mut MlpParams,
    velocity: &mut MlpGrads,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    config.validate()?;
    let view = bundle
        .split(split)
        .ok_or_else(|| TrainError::MissingSplit(split.to_string()))?;
    let labels = view.split.labels_usize();
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let order = epoch_order(n, config.seed, epoch);
    let mut weighted_loss = 0.0;
    for (b, idx) in order.chunks(config.batch_size).enumerate() {
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let step = batch_gradient(
            &view.image.select_rows(idx),
            &view.image_text.select_rows(idx),
            &batch_labels,
            text,
            params,
            config,
            mix_seed(config.seed, epoch as u64, b as u64),
        )?;
        weighted_loss += step.loss * idx.len() as f64;
        sgd_momentum_step(params, &step.grads, velocity, config.learning_rate, config.momentum)?;
        quantize_params(params);
        velocity.for_each_value_mut(|v| *v = *v as f32 as f64);
    }
    Ok(weighted_loss / n as f64)
}

/// Fresh parameters for `bundle`, rounded to `f32`.
pub fn initial_params(bundle: &EmbeddingBundle, config: &TrainConfig) -> Result<MlpParams, TrainError> {
    let dims = config.layer_dims(bundle.dim_image_text(), bundle.dim_image());
    let mut params = init_params(&dims, config.dropout_rate, config.seed)?;
    quantize_params(&mut params);
    Ok(params)
}

/// Trains with the default prompt set.
pub fn train(bundle: &EmbeddingBundle, config: &TrainConfig) -> Result<Checkpoint, TrainError> {
    train_with_prompts(bundle, config, PromptSelection::FULL)
}

/// Trains on the `train` split, selecting by top-1 accuracy on `val`.
///
/// Keeps the parameters of the best validation epoch (earliest on ties) and
/// stops after `patience` epochs without improvement when `patience > 0`.
pub fn train_with_prompts(
    bundle: &EmbeddingBundle,
    config: &TrainConfig,
    prompts: PromptSelection,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    for split in [TRAIN_SPLIT, VAL_SPLIT] {
        if bundle.split(split).is_none() {
            return Err(TrainError::MissingSplit(split.to_string()));
        }
    }
    let text = compose_text(bundle, &prompts)?;
    let mut params = initial_params(bundle, config)?;
    let mut velocity = params.zeros_like();
    let val = bundle.split(VAL_SPLIT).expect("checked");
    let val_labels = val.split.labels_usize();

    let mut best_params = params.clone();
    let mut best_epoch = None;
    let mut best_val_accuracy = 0.0;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let train_loss = train_epoch(bundle, TRAIN_SPLIT, &text, &mut params, &mut velocity, config, epoch)?;
        let predictions = classify_with_text(&val, &text, Some(&params), &config.fusion())?;
        let val_accuracy = score(VAL_SPLIT, &predictions, &val_labels, &bundle.catalog)?.top1_accuracy;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if best_epoch.is_none() || val_accuracy > best_val_accuracy {
            best_epoch = Some(epoch);
            best_val_accuracy = val_accuracy;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    Ok(Checkpoint {
        params: best_params,
        velocity,
        config: config.clone(),
        prompts,
        epoch: history.len(),
        best_epoch,
        best_val_accuracy,
        history,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: TrainConfig,
    prompts: PromptSelection,
    layer_dims: Vec<usize>,
    dropout_rate: f64,
    init: String,
    epoch: usize,
    best_epoch: Option<usize>,
    best_val_accuracy: f64,
    history: Vec<EpochRecord>,
    params_blob: String,
    params_crc32: u32,
    velocity_blob: String,
    velocity_crc32: u32,
}

/// Writes `checkpoint.json`, `params.f32` and `velocity.f32` into directory `path`.
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let params = store::encode_f32(&cp.params.to_flat());
    let velocity = store::encode_f32(&cp.velocity.to_flat());
    store::write_atomic(&path.join(PARAMS_FILE), &params)?;
    store::write_atomic(&path.join(VELOCITY_FILE), &velocity)?;
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: cp.config.clone(),
        prompts: cp.prompts,
        layer_dims: cp.params.layer_dims().to_vec(),
        dropout_rate: cp.params.dropout_rate(),
        init: "glorot_uniform".to_string(),
        epoch: cp.epoch,
        best_epoch: cp.best_epoch,
        best_val_accuracy: cp.best_val_accuracy,
        history: cp.history.clone(),
        params_blob: PARAMS_FILE.to_string(),
        params_crc32: store::crc32(&params),
        velocity_blob: VELOCITY_FILE.to_string(),
        velocity_crc32: store::crc32(&velocity),
    };
    let mut json = serde_json::to_vec_pretty(&file).expect("serializable");
    json.push(b'\n');
    store::write_atomic(&path.join(CHECKPOINT_FILE), &json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let json_path = path.join(CHECKPOINT_FILE);
    let schema = |detail: String| TrainError::Schema {
        file: json_path.display().to_string(),
        detail,
    };
    let bytes = store::read_file(&json_path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| schema(e.to_string()))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(schema(format!("unsupported format_version {}", file.format_version)));
    }
    if file.history.len() != file.epoch {
        return Err(schema(format!(
            "{} history entries for epoch {}",
            file.history.len(),
            file.epoch
        )));
    }
    let n = file.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let params = store::read_blob(&path.join(&file.params_blob), 4 * n as u64, file.params_crc32)?;
    let velocity = store::read_blob(&path.join(&file.velocity_blob), 4 * n as u64, file.velocity_crc32)?;
    let params = MlpParams::from_flat(&file.layer_dims, file.dropout_rate, &store::decode_f32(&params))
        .map_err(|e| schema(e.to_string()))?;
    let velocity =
        MlpGrads::from_flat(&file.layer_dims, &store::decode_f32(&velocity)).map_err(|e| schema(e.to_string()))?;
    if !params.is_finite() {
        return Err(schema("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        params,
        velocity,
        config: file.config,
        prompts: file.prompts,
        epoch: file.epoch,
        best_epoch: file.best_epoch,
        best_val_accuracy: file.best_val_accuracy,
        history: file.history,
    })
}

/// Rounds a parameter set to `f32` precision in place.
pub fn quantize_params(params: &mut MlpParams) {
    params.for_each_value_mut(|v| *v = *v as f32 as f64);
}
