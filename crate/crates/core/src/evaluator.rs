//! Zero-shot classification over fused similarities, accuracy reports, alpha
//! sweeps and the branch/prompt ablation grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{cosine_similarity_matrix, fuse, AlignmentError, FusionConfig};
use crate::matrix::{argmax, Matrix};
use crate::mlp::{forward, MlpError, MlpParams, Mode};
use crate::store::{ClassCatalog, EmbeddingBundle, SplitView};
use crate::text::{compose_class_embeddings, PromptRole, TextError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("alpha {0} < 1 needs projection-head parameters")]
    MissingParams(f64),
    #[error("split {0:?} not found in bundle")]
    MissingSplit(String),
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("prediction or label {value} at item {index} is out of range for {n_classes} classes")]
    ClassOutOfRange {
        index: usize,
        value: usize,
        n_classes: usize,
    },
    #[error("at least one of the image and image-text branches must be enabled")]
    AllBranchesDisabled,
    #[error("bundle has no prompt rows with role {0}")]
    MissingPromptRole(PromptRole),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Top-1 accuracy report for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_name: String,
    pub n_items: usize,
    pub top1_accuracy: f64,
    /// Accuracy per class name; classes with no items in the split are omitted.
    pub per_class_accuracy: BTreeMap<String, f64>,
    /// `confusion[true][predicted]`, in catalog order.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Confusion matrix as CSV with a header row of class names.
    pub fn confusion_csv(&self, catalog: &ClassCatalog) -> String {
        let mut out = String::from("true\\predicted");
        for n in catalog.names() {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for (name, row) in catalog.names().iter().zip(&self.confusion) {
            out.push_str(&csv_field(name));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Which prompt rows enter the class centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSelection {
    pub base: bool,
    pub templates: bool,
    pub llm: bool,
}

impl PromptSelection {
    /// Templates and LLM descriptions, the default prompt set.
    pub const FULL: Self = Self {
        base: false,
        templates: true,
        llm: true,
    };

    pub const BASE_ONLY: Self = Self {
        base: true,
        templates: false,
        llm: false,
    };

    fn includes(&self, role: PromptRole) -> bool {
        match role {
            PromptRole::Base => self.base,
            PromptRole::Template => self.templates,
            PromptRole::Llm => self.llm,
        }
    }

    /// Prompt row indices selected from a block whose rows have `roles`.
    ///
    /// [`PromptSelection::FULL`] falls back to every row when the block holds
    /// neither templates nor descriptions.
    pub fn resolve(&self, roles: &[PromptRole]) -> Result<Vec<usize>, EvalError> {
        let rows: Vec<usize> = (0..roles.len()).filter(|&i| self.includes(roles[i])).collect();
        if !rows.is_empty() {
            return Ok(rows);
        }
        if *self == Self::FULL {
            return Ok((0..roles.len()).collect());
        }
        let missing = [
            (self.base, PromptRole::Base),
            (self.templates, PromptRole::Template),
            (self.llm, PromptRole::Llm),
        ]
        .into_iter()
        .find(|(on, _)| *on)
        .map_or(PromptRole::Base, |(_, r)| r);
        Err(EvalError::MissingPromptRole(missing))
    }
}

impl Default for PromptSelection {
    fn default() -> Self {
        Self::FULL
    }
}

/// One row of the branch/prompt ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub use_clip_branch: bool,
    pub use_vlm_branch: bool,
    pub use_llm_descriptions: bool,
    pub use_templates: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            use_clip_branch: true,
            use_vlm_branch: true,
            use_llm_descriptions: true,
            use_templates: true,
        }
    }
}

impl AblationSpec {
    pub const fn new(clip: bool, vlm: bool, llm: bool, templates: bool) -> Self {
        Self {
            use_clip_branch: clip,
            use_vlm_branch: vlm,
            use_llm_descriptions: llm,
            use_templates: templates,
        }
    }

    /// The nine configurations of the ablation table, in table order.
    pub fn table_rows() -> [AblationSpec; 9] {
        [
            Self::new(false, true, false, false),
            Self::new(false, true, false, true),
            Self::new(false, true, true, false),
            Self::new(false, true, true, true),
            Self::new(true, false, false, false),
            Self::new(true, false, true, false),
            Self::new(true, false, false, true),
            Self::new(true, false, true, true),
            Self::new(true, true, true, true),
        ]
    }
}

/// Maps ablation toggles to a fusion config and a prompt selection.
///
/// Disabling the image branch forces `alpha = 0`, disabling the image-text
/// branch forces `alpha = 1`; with both on, `base.alpha` is kept. With neither
/// templates nor descriptions, only the base prompt is used.
pub fn build_ablation_config(
    spec: &AblationSpec,
    base: FusionConfig,
) -> Result<(FusionConfig, PromptSelection), EvalError> {
    let alpha = match (spec.use_clip_branch, spec.use_vlm_branch) {
        (false, false) => return Err(EvalError::AllBranchesDisabled),
        (true, false) => 1.0,
        (false, true) => 0.0,
        (true, true) => base.alpha,
    };
    let selection = if spec.use_templates || spec.use_llm_descriptions {
        PromptSelection {
            base: false,
            templates: spec.use_templates,
            llm: spec.use_llm_descriptions,
        }
    } else {
        PromptSelection::BASE_ONLY
    };
    let config = FusionConfig { alpha, tau: base.tau };
    config.validate()?;
    Ok((config, selection))
}

/// Class-text matrix `T` from the selected prompt rows of the bundle.
pub fn compose_text(bundle: &EmbeddingBundle, selection: &PromptSelection) -> Result<Matrix, EvalError> {
    let rows = selection.resolve(&bundle.prompt_roles()?)?;
    let block = if rows.len() == bundle.class_prompts.m() {
        bundle.class_prompts.clone()
    } else {
        bundle.class_prompts.select_prompts(&rows)?
    };
    Ok(compose_class_embeddings(&block)?)
}

/// The two similarity branches for a split. A branch is `None` when its weight is zero.
pub struct Branches {
    pub image: Option<Matrix>,
    pub image_text: Option<Matrix>,
}

/// Computes `W` (image vs text) and `Q` (projected image-text vs text) as needed for `alpha`.
pub fn branch_similarities(
    view: &SplitView<'_>,
    text: &Matrix,
    params: Option<&MlpParams>,
    alpha: f64,
) -> Result<Branches, EvalError> {
    let image = if alpha > 0.0 {
        Some(cosine_similarity_matrix(view.image, text)?)
    } else {
        None
    };
    let image_text = if alpha < 1.0 {
        let params = params.ok_or(EvalError::MissingParams(alpha))?;
        let (projected, _) = forward(view.image_text, params, Mode::Eval, 0)?;
        Some(cosine_similarity_matrix(&projected, text)?)
    } else {
        None
    };
    Ok(Branches { image, image_text })
}

fn fused(branches: &Branches, config: &FusionConfig) -> Result<Matrix, EvalError> {
    match (&branches.image, &branches.image_text) {
        (Some(w), Some(q)) => Ok(fuse(w, q, config)?),
        (Some(w), None) if config.alpha == 1.0 => Ok(w.clone()),
        (None, Some(q)) if config.alpha == 0.0 => Ok(q.clone()),
        _ => Err(EvalError::MissingParams(config.alpha)),
    }
}

fn argmax_rows(s: &Matrix) -> Vec<usize> {
    s.row_iter().map(|r| argmax(r).unwrap_or(0)).collect()
}

/// Predicted class per item of one split, using a given class-text matrix.
pub fn classify_with_text(
    view: &SplitView<'_>,
    text: &Matrix,
    params: Option<&MlpParams>,
    config: &FusionConfig,
) -> Result<Vec<usize>, EvalError> {
    config.validate()?;
    let branches = branch_similarities(view, text, params, config.alpha)?;
    Ok(argmax_rows(&fused(&branches, config)?))
}

/// Predicted class per item (argmax of the fused similarity, ties to the lowest index).
///
/// Uses the default prompt set for the class centroids and an eval-mode forward pass.
pub fn classify(
    bundle: &EmbeddingBundle,
    split: &str,
    params: Option<&MlpParams>,
    config: &FusionConfig,
) -> Result<Vec<usize>, EvalError> {
    let view = bundle
        .split(split)
        .ok_or_else(|| EvalError::MissingSplit(split.to_string()))?;
    let text = compose_text(bundle, &PromptSelection::FULL)?;
    classify_with_text(&view, &text, params, config)
}

/// Builds the accuracy report for `predictions` against `labels`.
pub fn score(
    split_name: &str,
    predictions: &[usize],
    labels: &[usize],
    catalog: &ClassCatalog,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let n_classes = catalog.len();
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (index, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        for value in [p, t] {
            if value >= n_classes {
                return Err(EvalError::ClassOutOfRange {
                    index,
                    value,
                    n_classes,
                });
            }
        }
        confusion[t][p] += 1;
    }
    let n_items = labels.len();
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let top1_accuracy = if n_items == 0 {
        0.0
    } else {
        correct as f64 / n_items as f64
    };
    let per_class_accuracy = catalog
        .names()
        .iter()
        .enumerate()
        .filter_map(|(c, name)| {
            let support: u64 = confusion[c].iter().sum();
            (support > 0).then(|| (name.clone(), confusion[c][c] as f64 / support as f64))
        })
        .collect();
    Ok(EvalReport {
        split_name: split_name.to_string(),
        n_items,
        top1_accuracy,
        per_class_accuracy,
        confusion,
    })
}

/// Classifies and scores one split.
pub fn evaluate(
    bundle: &EmbeddingBundle,
    split: &str,
    text: &Matrix,
    params: Option<&MlpParams>,
    config: &FusionConfig,
) -> Result<EvalReport, EvalError> {
    let view = bundle
        .split(split)
        .ok_or_else(|| EvalError::MissingSplit(split.to_string()))?;
    let predictions = classify_with_text(&view, text, params, config)?;
    score(split, &predictions, &view.split.labels_usize(), &bundle.catalog)
}

/// Top-1 accuracy at every alpha in `grid`, reusing one set of branch similarities.
pub fn alpha_sweep_with_text(
    bundle: &EmbeddingBundle,
    split: &str,
    text: &Matrix,
    params: Option<&MlpParams>,
    tau: f64,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    let view = bundle
        .split(split)
        .ok_or_else(|| EvalError::MissingSplit(split.to_string()))?;
    let configs = grid
        .iter()
        .map(|&alpha| FusionConfig::new(alpha, tau))
        .collect::<Result<Vec<_>, _>>()?;
    let need_w = grid.iter().any(|&a| a > 0.0);
    let need_q = grid.iter().any(|&a| a < 1.0);
    // alpha values chosen only to switch each branch on or off
    let branches = branch_similarities(
        &view,
        text,
        params,
        match (need_w, need_q) {
            (true, true) => 0.5,
            (true, false) => 1.0,
            _ => 0.0,
        },
    )?;
    let labels = view.split.labels_usize();
    configs
        .iter()
        .map(|config| {
            let predictions = argmax_rows(&fused(&branches, config)?);
            let report = score(split, &predictions, &labels, &bundle.catalog)?;
            Ok((config.alpha, report.top1_accuracy))
        })
        .collect()
}

/// [`alpha_sweep_with_text`] with the default prompt set.
pub fn alpha_sweep(
    bundle: &EmbeddingBundle,
    split: &str,
    params: Option<&MlpParams>,
    tau: f64,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    let text = compose_text(bundle, &PromptSelection::FULL)?;
    alpha_sweep_with_text(bundle, split, &text, params, tau, grid)
}

/// `n` evenly spaced alphas from 0 to 1 inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}
