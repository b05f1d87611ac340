//! Multi-modal embedding fusion for camera-trap species recognition.
//!
//! The pipeline works on precomputed embedding bundles:
//!
//! - [`text`] averages per-class prompt embeddings into class-text centroids `T`;
//! - [`alignment`] computes cosine similarities of image embeddings (`W`) and
//!   projected image-description embeddings (`Q`) against `T`, and fuses them;
//! - [`mlp`] is the trainable projection head from description space into
//!   image space, with hand-written backpropagation;
//! - [`losses`] scores fused similarities with a temperature-scaled contrastive loss;
//! - [`trainer`] fits the head with SGD and momentum;
//! - [`evaluator`] classifies, scores and sweeps;
//! - [`store`] reads and writes bundles, [`synth`] generates synthetic ones.

pub mod alignment;
pub mod cli;
pub mod evaluator;
pub mod losses;
pub mod matrix;
pub mod mlp;
pub mod store;
pub mod synth;
pub mod text;
pub mod trainer;

pub use alignment::{cosine_similarity_matrix, fuse, FusionConfig};
pub use evaluator::{classify, score, AblationSpec, EvalReport, PromptSelection};
pub use losses::{contrastive_loss, supervised_contrastive_loss, LossResult};
pub use matrix::{EmbeddingMatrix, Matrix};
pub use mlp::{MlpGrads, MlpParams};
pub use store::{load_bundle, save_bundle, validate_bundle, ClassCatalog, DatasetSplit, EmbeddingBundle};
pub use synth::{generate, SynthSpec};
pub use text::{compose_class_embeddings, PromptEmbeddingBlock};
pub use trainer::{train, Checkpoint, TrainConfig};
