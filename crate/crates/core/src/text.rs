//! Class-text centroids.
//!
//! Each class is described by `M` prompt embeddings (camera-trap templates plus
//! LLM description sentences). The class embedding is their arithmetic mean;
//! stacking the means in catalog order gives the text matrix `T`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::matrix::Matrix;

/// The shipped camera-trap templates, one per line, `{}` marks the class name.
pub const TEMPLATES_TXT: &str = include_str!("../assets/templates.txt");

/// Prompt used when neither templates nor LLM descriptions are enabled.
pub const BASE_PROMPT: &str = "A photo of a {}.";

/// Placeholder substituted by the class name in templates.
pub const SUBSTITUTION_MARKER: &str = "{}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("prompt block is empty (n_classes={n_classes}, M={m})")]
    EmptyBlock { n_classes: usize, m: usize },
    #[error("prompt block has {actual} values, expected {expected} = n_classes x M x F")]
    BlockLength { expected: usize, actual: usize },
    #[error("class name is empty")]
    EmptyClassName,
    #[error("template on line {line} has no {{}} marker")]
    TemplateWithoutMarker { line: usize },
    #[error("prompt selection matches no rows of the prompt block")]
    EmptySelection,
    #[error("unknown prompt role {0:?}")]
    UnknownRole(String),
    #[error("{roles} prompt roles listed for M={m}")]
    RoleCount { roles: usize, m: usize },
}

/// Where a prompt row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptRole {
    /// The generic base prompt, "A photo of a {}."
    Base,
    /// One of the camera-trap templates.
    Template,
    /// One sentence of the LLM class description.
    Llm,
}

impl PromptRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptRole::Base => "base",
            PromptRole::Template => "template",
            PromptRole::Llm => "llm",
        }
    }
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptRole {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "base" => Ok(PromptRole::Base),
            "template" => Ok(PromptRole::Template),
            "llm" => Ok(PromptRole::Llm),
            other => Err(TextError::UnknownRole(other.to_string())),
        }
    }
}

/// Encodes one role per prompt row as a comma-separated list (stored in bundle meta).
pub fn format_roles(roles: &[PromptRole]) -> String {
    roles.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")
}

pub fn parse_roles(s: &str, m: usize) -> Result<Vec<PromptRole>, TextError> {
    let roles = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>, _>>()?;
    if roles.len() != m {
        return Err(TextError::RoleCount { roles: roles.len(), m });
    }
    Ok(roles)
}

/// Per-class stack of `M` prompt embeddings of dimension `F`, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddingBlock {
    n_classes: usize,
    m: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PromptEmbeddingBlock {
    pub fn new(n_classes: usize, m: usize, dim: usize, values: Vec<f64>) -> Result<Self, TextError> {
        let expected = n_classes * m * dim;
        if values.len() != expected {
            return Err(TextError::BlockLength {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            n_classes,
            m,
            dim,
            values,
        })
    }

    /// Stacks one `M x F` matrix per class.
    pub fn from_class_matrices(per_class: &[Matrix]) -> Result<Self, TextError> {
        let Some(first) = per_class.first() else {
            return Err(TextError::EmptyBlock { n_classes: 0, m: 0 });
        };
        let (m, dim) = (first.rows(), first.cols());
        let mut values = Vec::with_capacity(per_class.len() * m * dim);
        for p in per_class {
            if p.rows() != m || p.cols() != dim {
                return Err(TextError::BlockLength {
                    expected: m * dim,
                    actual: p.rows() * p.cols(),
                });
            }
            values.extend_from_slice(p.as_slice());
        }
        Self::new(per_class.len(), m, dim, values)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Prompts per class.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Embedding of prompt `i` of class `c`.
    pub fn prompt(&self, c: usize, i: usize) -> &[f64] {
        let start = (c * self.m + i) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// The `M x F` prompt matrix of class `c`.
    pub fn class_prompts(&self, c: usize) -> Matrix {
        let start = c * self.m * self.dim;
        let slice = &self.values[start..start + self.m * self.dim];
        Matrix::from_vec(self.m, self.dim, slice.to_vec()).expect("block layout")
    }

    /// Keeps only prompt rows `rows` (same subset for every class).
    pub fn select_prompts(&self, rows: &[usize]) -> Result<Self, TextError> {
        if rows.is_empty() {
            return Err(TextError::EmptySelection);
        }
        let mut values = Vec::with_capacity(self.n_classes * rows.len() * self.dim);
        for c in 0..self.n_classes {
            for &i in rows {
                values.extend_from_slice(self.prompt(c, i));
            }
        }
        Self::new(self.n_classes, rows.len(), self.dim, values)
    }
}

/// Computes `T`: row `c` is the mean of the `M` prompt embeddings of class `c`.
pub fn compose_class_embeddings(block: &PromptEmbeddingBlock) -> Result<Matrix, TextError> {
    if block.m == 0 || block.n_classes == 0 {
        return Err(TextError::EmptyBlock {
            n_classes: block.n_classes,
            m: block.m,
        });
    }
    let inv_m = 1.0 / block.m as f64;
    let mut out = Matrix::zeros(block.n_classes, block.dim);
    for c in 0..block.n_classes {
        let row = out.row_mut(c);
        for i in 0..block.m {
            for (acc, v) in row.iter_mut().zip(block.prompt(c, i)) {
                *acc += v;
            }
        }
        for v in row.iter_mut() {
            *v *= inv_m;
        }
    }
    Ok(out)
}

/// Parses a template file: one template per non-empty line, each containing `{}`.
pub fn parse_templates(text: &str) -> Result<Vec<String>, TextError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !line.contains(SUBSTITUTION_MARKER) {
            return Err(TextError::TemplateWithoutMarker { line: i + 1 });
        }
        out.push(line.to_string());
    }
    Ok(out)
}

/// The shipped camera-trap templates.
pub fn reference_templates() -> Vec<String> {
    parse_templates(TEMPLATES_TXT).expect("shipped templates are well formed")
}

/// Fills `{}` in `template` with `class_name`.
pub fn fill_template(template: &str, class_name: &str) -> String {
    template.replacen(SUBSTITUTION_MARKER, class_name, 1)
}

/// The prompt texts for one class: every template filled with `class_name`,
/// followed by the description sentences as given.
pub fn list_reference_prompts(class_name: &str, description_sentences: &[String]) -> Result<Vec<String>, TextError> {
    if class_name.trim().is_empty() {
        return Err(TextError::EmptyClassName);
    }
    let mut prompts: Vec<String> = reference_templates()
        .iter()
        .map(|t| fill_template(t, class_name))
        .collect();
    prompts.extend(description_sentences.iter().cloned());
    Ok(prompts)
}
