//! Deterministic synthetic bundles with planted class structure.
//!
//! Each class gets a random unit anchor in `F` dimensions. Image embeddings are
//! anchor plus Gaussian noise; prompt embeddings are the anchor plus independent
//! noise; image-text embeddings are a fixed random linear map of the image
//! embedding into `F'` dimensions plus noise. The `trans_test` split is
//! additionally rotated in a random 2-plane to model a domain shift.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, l2_norm, Matrix};
use crate::store::{quantize_f32, ClassCatalog, DatasetSplit, EmbeddingBundle, META_PROMPT_ROLES};
use crate::text::{format_roles, PromptEmbeddingBlock, PromptRole};

const MAX_ANCHOR_ATTEMPTS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
}

/// Shape and noise parameters of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Items in each of `cis_test` and `trans_test`.
    pub n_test: usize,
    /// Image (and prompt) embedding dimension.
    pub dim: usize,
    /// Image-text embedding dimension.
    pub dim_prime: usize,
    /// Prompt rows per class.
    pub m: usize,
    /// Anchors are resampled until every pairwise cosine is below `1 - cluster_separation`.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Rotation angle (radians) applied to `trans_test` embeddings.
    pub domain_shift_angle: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            dim: 32,
            dim_prime: 48,
            m: 6,
            cluster_separation: 0.5,
            noise_sigma: 0.1,
            domain_shift_angle: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_classes == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("class and item counts must be positive");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.dim_prime == 0 || self.m == 0 {
            return bad("dim_prime and m must be positive");
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation <= 2.0) {
            return bad("cluster_separation must lie in (0, 2]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !self.domain_shift_angle.is_finite() {
            return bad("domain_shift_angle must be finite");
        }
        Ok(())
    }

    /// Role of each prompt row: base first, LLM description last, templates between.
    pub fn prompt_roles(&self) -> Vec<PromptRole> {
        (0..self.m)
            .map(|i| match i {
                0 => PromptRole::Base,
                i if i + 1 == self.m => PromptRole::Llm,
                _ => PromptRole::Template,
            })
            .collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_anchors(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Result<Vec<Vec<f64>>, SynthError> {
    let max_cos = 1.0 - spec.cluster_separation;
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut attempts = 0;
        loop {
            let cand = unit_vec(rng, spec.dim);
            if anchors.iter().all(|a| dot(a, &cand) < max_cos) {
                anchors.push(cand);
                break;
            }
            attempts += 1;
            if attempts >= MAX_ANCHOR_ATTEMPTS {
                return Err(SynthError::InvalidSpec(format!(
                    "could not place {} anchors in {} dims with pairwise cosine < {max_cos}",
                    spec.n_classes, spec.dim
                )));
            }
        }
    }
    Ok(anchors)
}

/// Rotation by `angle` in the plane spanned by orthonormal `e1`, `e2`.
struct PlaneRotation {
    e1: Vec<f64>,
    e2: Vec<f64>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn random(rng: &mut ChaCha8Rng, dim: usize, angle: f64) -> Self {
        let e1 = unit_vec(rng, dim);
        let e2 = loop {
            let mut v = gaussian_vec(rng, dim);
            let p = dot(&v, &e1);
            for (x, e) in v.iter_mut().zip(&e1) {
                *x -= p * e;
            }
            let norm = l2_norm(&v);
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        Self {
            e1,
            e2,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn apply(&self, v: &mut [f64]) {
        let a = dot(v, &self.e1);
        let b = dot(v, &self.e2);
        let na = self.cos * a - self.sin * b;
        let nb = self.sin * a + self.cos * b;
        for ((x, e1), e2) in v.iter_mut().zip(&self.e1).zip(&self.e2) {
            *x += (na - a) * e1 + (nb - b) * e2;
        }
    }
}

fn add_noise(rng: &mut ChaCha8Rng, v: &mut [f64], noise: &Option<Normal<f64>>) {
    if let Some(d) = noise {
        for x in v {
            *x += d.sample(rng);
        }
    }
}

/// Generates a bundle with splits `train`, `val`, `cis_test` and `trans_test`.
///
/// All values are rounded to `f32`, so the result equals its own save/load image.
pub fn generate(spec: &SynthSpec) -> Result<EmbeddingBundle, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anchors = sample_anchors(&mut rng, spec)?;
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma checked"));

    // image -> image-text map, F' x F, entries N(0, 1/F)
    let scale = 1.0 / (spec.dim as f64).sqrt();
    let projection = Matrix::from_vec(
        spec.dim_prime,
        spec.dim,
        gaussian_vec(&mut rng, spec.dim_prime * spec.dim)
            .into_iter()
            .map(|x| x * scale)
            .collect(),
    )
    .expect("sized");
    let rotation = PlaneRotation::random(&mut rng, spec.dim, spec.domain_shift_angle);

    let mut prompt_values = Vec::with_capacity(spec.n_classes * spec.m * spec.dim);
    for anchor in &anchors {
        for _ in 0..spec.m {
            let mut row = anchor.clone();
            add_noise(&mut rng, &mut row, &noise);
            prompt_values.extend(row);
        }
    }
    quantize_f32(&mut prompt_values);
    let class_prompts = PromptEmbeddingBlock::new(spec.n_classes, spec.m, spec.dim, prompt_values).expect("sized");

    let mut splits = BTreeMap::new();
    let mut image = BTreeMap::new();
    let mut image_text = BTreeMap::new();
    for (name, n, shifted) in [
        ("train", spec.n_train, false),
        ("val", spec.n_val, false),
        ("cis_test", spec.n_test, false),
        ("trans_test", spec.n_test, true),
    ] {
        let labels: Vec<u32> = (0..n).map(|i| (i % spec.n_classes) as u32).collect();
        let mut img = Matrix::zeros(n, spec.dim);
        let mut img_text = Matrix::zeros(n, spec.dim_prime);
        for (i, &label) in labels.iter().enumerate() {
            let v = img.row_mut(i);
            v.copy_from_slice(&anchors[label as usize]);
            add_noise(&mut rng, v, &noise);
            if shifted {
                rotation.apply(v);
            }
            let v = img.row(i).to_vec();
            let t = img_text.row_mut(i);
            for (k, out) in t.iter_mut().enumerate() {
                *out = dot(projection.row(k), &v);
            }
            add_noise(&mut rng, t, &noise);
        }
        quantize_f32(img.as_mut_slice());
        quantize_f32(img_text.as_mut_slice());
        splits.insert(
            name.to_string(),
            DatasetSplit {
                name: name.to_string(),
                item_ids: (0..n).map(|i| format!("{name}-{i:06}")).collect(),
                labels,
            },
        );
        image.insert(name.to_string(), img);
        image_text.insert(name.to_string(), img_text);
    }

    let catalog = ClassCatalog::new((0..spec.n_classes).map(|c| format!("class_{c:03}")).collect())
        .expect("generated names are unique");
    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), "synthkit".to_string());
    meta.insert(
        "synth_spec".to_string(),
        serde_json::to_string(spec).expect("serializable"),
    );
    meta.insert(META_PROMPT_ROLES.to_string(), format_roles(&spec.prompt_roles()));
    meta.insert("image_encoder".to_string(), "synthetic".to_string());
    meta.insert("text_encoder".to_string(), "synthetic".to_string());
    Ok(EmbeddingBundle {
        catalog,
        splits,
        image,
        image_text,
        class_prompts,
        meta,
    })
}
