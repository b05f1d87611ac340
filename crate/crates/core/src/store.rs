//! Embedding bundles: data model, validation and the on-disk directory format.
//!
//! A bundle directory holds
//!
//! ```text
//! manifest.json            format_version, dims {F, F_prime, M}, splits, blob checksums, meta
//! classes.json             ["class-a", "class-b", ...]
//! <split>.item_ids.json    ["item-0", ...]
//! <split>.labels.u32       little-endian u32 per item
//! <split>.image.f32        little-endian f32, n_rows x F, row-major
//! <split>.image_text.f32   little-endian f32, n_rows x F_prime, row-major
//! class_prompts.f32        little-endian f32, |C| x M x F, class-major
//! ```
//!
//! Values are stored as 32-bit floats and widened to `f64` on load. Every blob
//! carries a CRC-32 in the manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::text::{self, PromptEmbeddingBlock, PromptRole};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const CLASS_PROMPTS_FILE: &str = "class_prompts.f32";

/// Meta key holding the comma-separated role of each prompt row.
pub const META_PROMPT_ROLES: &str = "prompt_roles";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("schema error in {file}: {detail}")]
    ManifestSchema { file: PathBuf, detail: String },
    #[error("{file}: expected {expected} bytes, found {actual}")]
    DimensionMismatch { file: PathBuf, expected: u64, actual: u64 },
    #[error("{file}: non-finite value at element {index}")]
    NonFiniteValue { file: PathBuf, index: usize },
    #[error("{file}: label {label} at item {index} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        file: PathBuf,
        index: usize,
        label: u32,
        n_classes: usize,
    },
    #[error("{file}: checksum mismatch (manifest {expected:08x}, file {actual:08x})")]
    ChecksumMismatch { file: PathBuf, expected: u32, actual: u32 },
    #[error("split name {0:?} is not usable as a file name")]
    InvalidSplitName(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            StoreError::MissingFile(path.to_path_buf())
        } else {
            StoreError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    fn schema(file: &Path, detail: impl Into<String>) -> Self {
        StoreError::ManifestSchema {
            file: file.to_path_buf(),
            detail: detail.into(),
        }
    }
}

/// Ordered class names. The order fixes the column order of every similarity matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    /// Checked constructor: non-empty, unique, no blank names.
    pub fn new(names: Vec<String>) -> Result<Self, String> {
        let cat = Self { names };
        match cat.violations().into_iter().next() {
            Some(v) => Err(v.to_string()),
            None => Ok(cat),
        }
    }

    /// Wraps names without checking; [`validate_bundle`] reports any problem.
    pub fn unchecked(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.names.is_empty() {
            out.push(Violation::new(
                ViolationKind::EmptyCatalog,
                "ClassCatalog",
                "names",
                None,
            ));
        }
        let mut seen = BTreeMap::new();
        for (i, n) in self.names.iter().enumerate() {
            if n.trim().is_empty() {
                out.push(Violation::new(
                    ViolationKind::EmptyClassName,
                    "ClassCatalog",
                    "names",
                    Some(i.to_string()),
                ));
            }
            if let Some(first) = seen.insert(n.as_str(), i) {
                out.push(
                    Violation::new(
                        ViolationKind::DuplicateClass,
                        "ClassCatalog",
                        "names",
                        Some(i.to_string()),
                    )
                    .with_detail(format!("{n:?} already at {first}")),
                );
            }
        }
        out
    }
}

/// Item ids and labels of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub item_ids: Vec<String>,
    pub labels: Vec<u32>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// Everything the core consumes: classes, splits, the three embedding sources and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub catalog: ClassCatalog,
    pub splits: BTreeMap<String, DatasetSplit>,
    /// Image embeddings per split, dimension `F`.
    pub image: BTreeMap<String, Matrix>,
    /// Image-description embeddings per split, dimension `F'`.
    pub image_text: BTreeMap<String, Matrix>,
    pub class_prompts: PromptEmbeddingBlock,
    pub meta: BTreeMap<String, String>,
}

/// Borrowed view of one split with its embeddings.
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub split: &'a DatasetSplit,
    pub image: &'a Matrix,
    pub image_text: &'a Matrix,
}

impl EmbeddingBundle {
    /// Image embedding dimension `F` (the prompt embedding dimension).
    pub fn dim_image(&self) -> usize {
        self.class_prompts.dim()
    }

    /// Image-text embedding dimension `F'`, 0 when the bundle has no splits.
    pub fn dim_image_text(&self) -> usize {
        self.image_text.values().next().map_or(0, Matrix::cols)
    }

    pub fn split(&self, name: &str) -> Option<SplitView<'_>> {
        Some(SplitView {
            split: self.splits.get(name)?,
            image: self.image.get(name)?,
            image_text: self.image_text.get(name)?,
        })
    }

    /// Role of each prompt row. Without role metadata, row 0 is taken as the
    /// base prompt and the rest as templates.
    pub fn prompt_roles(&self) -> Result<Vec<PromptRole>, text::TextError> {
        let m = self.class_prompts.m();
        match self.meta.get(META_PROMPT_ROLES) {
            Some(s) => text::parse_roles(s, m),
            None => Ok((0..m)
                .map(|i| if i == 0 { PromptRole::Base } else { PromptRole::Template })
                .collect()),
        }
    }
}

/// What an invariant violation is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    EmptyCatalog,
    EmptyClassName,
    DuplicateClass,
    SplitNameMismatch,
    InvalidSplitName,
    LengthMismatch,
    LabelOutOfRange,
    MissingMatrix,
    OrphanMatrix,
    RowCountMismatch,
    DimMismatch,
    NonFiniteValue,
    EmptyPromptBlock,
    PromptClassCount,
    PromptRoles,
}

/// One broken invariant, located by type, field and index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub type_name: &'static str,
    pub field: String,
    pub index: Option<String>,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, type_name: &'static str, field: impl Into<String>, index: Option<String>) -> Self {
        Self {
            kind,
            type_name,
            field: field.into(),
            index,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}.{}", self.kind, self.type_name, self.field)?;
        if let Some(i) = &self.index {
            write!(f, "[{i}]")?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

fn valid_split_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn non_finite_violation(m: &Matrix, type_name: &'static str, field: String) -> Option<Violation> {
    m.first_non_finite().map(|(r, c)| {
        Violation::new(
            ViolationKind::NonFiniteValue,
            type_name,
            field,
            Some(format!("{r},{c}")),
        )
        .with_detail(format!("{}", m.get(r, c)))
    })
}

/// Lists every broken bundle invariant. Empty iff the bundle is well formed.
pub fn validate_bundle(bundle: &EmbeddingBundle) -> Vec<Violation> {
    let mut out = bundle.catalog.violations();
    let n_classes = bundle.catalog.len();
    let f = bundle.class_prompts.dim();
    let f_prime = bundle.dim_image_text();

    let prompts = &bundle.class_prompts;
    if prompts.m() == 0 {
        out.push(Violation::new(
            ViolationKind::EmptyPromptBlock,
            "PromptEmbeddingBlock",
            "M",
            None,
        ));
    }
    if prompts.n_classes() != n_classes {
        out.push(
            Violation::new(
                ViolationKind::PromptClassCount,
                "PromptEmbeddingBlock",
                "n_classes",
                None,
            )
            .with_detail(format!("{} blocks for {} classes", prompts.n_classes(), n_classes)),
        );
    }
    if let Some(i) = prompts.values().iter().position(|v| !v.is_finite()) {
        let per_class = (prompts.m() * prompts.dim()).max(1);
        let (c, rest) = (i / per_class, i % per_class);
        let dim = prompts.dim().max(1);
        out.push(
            Violation::new(
                ViolationKind::NonFiniteValue,
                "PromptEmbeddingBlock",
                "values",
                Some(format!("{c},{},{}", rest / dim, rest % dim)),
            )
            .with_detail(format!("{}", prompts.values()[i])),
        );
    }
    if let Err(e) = bundle.prompt_roles() {
        out.push(
            Violation::new(ViolationKind::PromptRoles, "EmbeddingBundle", "meta.prompt_roles", None)
                .with_detail(e.to_string()),
        );
    }

    for (key, split) in &bundle.splits {
        if split.name != *key {
            out.push(
                Violation::new(
                    ViolationKind::SplitNameMismatch,
                    "DatasetSplit",
                    "split_name",
                    Some(key.clone()),
                )
                .with_detail(format!("stored as {:?}", split.name)),
            );
        }
        if !valid_split_name(key) {
            out.push(Violation::new(
                ViolationKind::InvalidSplitName,
                "DatasetSplit",
                "split_name",
                Some(key.clone()),
            ));
        }
        if split.labels.len() != split.item_ids.len() {
            out.push(
                Violation::new(
                    ViolationKind::LengthMismatch,
                    "DatasetSplit",
                    "labels",
                    Some(key.clone()),
                )
                .with_detail(format!(
                    "{} labels, {} item ids",
                    split.labels.len(),
                    split.item_ids.len()
                )),
            );
        }
        for (i, &l) in split.labels.iter().enumerate() {
            if l as usize >= n_classes {
                out.push(
                    Violation::new(
                        ViolationKind::LabelOutOfRange,
                        "DatasetSplit",
                        format!("{key}.labels"),
                        Some(i.to_string()),
                    )
                    .with_detail(format!("label {l} >= {n_classes}")),
                );
            }
        }
        for (field, map, want_dim) in [("image", &bundle.image, f), ("image_text", &bundle.image_text, f_prime)] {
            let Some(m) = map.get(key) else {
                out.push(Violation::new(
                    ViolationKind::MissingMatrix,
                    "EmbeddingBundle",
                    field,
                    Some(key.clone()),
                ));
                continue;
            };
            if m.rows() != split.labels.len() {
                out.push(
                    Violation::new(
                        ViolationKind::RowCountMismatch,
                        "EmbeddingMatrix",
                        format!("{field}.n_rows"),
                        Some(key.clone()),
                    )
                    .with_detail(format!("{} rows, {} labels", m.rows(), split.labels.len())),
                );
            }
            if m.cols() != want_dim {
                out.push(
                    Violation::new(
                        ViolationKind::DimMismatch,
                        "EmbeddingMatrix",
                        format!("{field}.dim"),
                        Some(key.clone()),
                    )
                    .with_detail(format!("dim {} expected {}", m.cols(), want_dim)),
                );
            }
            if let Some(v) = non_finite_violation(m, "EmbeddingMatrix", format!("{field}[{key}]")) {
                out.push(v);
            }
        }
    }
    for (field, map) in [("image", &bundle.image), ("image_text", &bundle.image_text)] {
        for key in map.keys().filter(|k| !bundle.splits.contains_key(*k)) {
            out.push(Violation::new(
                ViolationKind::OrphanMatrix,
                "EmbeddingBundle",
                field,
                Some(key.clone()),
            ));
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDims {
    #[serde(rename = "F")]
    f: usize,
    #[serde(rename = "F_prime")]
    f_prime: usize,
    #[serde(rename = "M")]
    m: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitCrcs {
    labels: u32,
    image: u32,
    image_text: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitEntry {
    name: String,
    n_rows: usize,
    item_ids_file: String,
    labels_file: String,
    image_blob: String,
    image_text_blob: String,
    crc32: SplitCrcs,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dims: ManifestDims,
    splits: Vec<SplitEntry>,
    class_prompts_blob: String,
    class_prompts_crc32: u32,
    meta: BTreeMap<String, String>,
}

pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub(crate) fn encode_f32(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Rounds every value to the nearest `f32`, i.e. what a save/load cycle would produce.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| StoreError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|e| StoreError::io(path, e))
}

/// Reads a blob, checking its byte length before its checksum.
pub(crate) fn read_blob(path: &Path, expected_len: u64, expected_crc: u32) -> Result<Vec<u8>, StoreError> {
    let bytes = read_file(path)?;
    if bytes.len() as u64 != expected_len {
        return Err(StoreError::DimensionMismatch {
            file: path.to_path_buf(),
            expected: expected_len,
            actual: bytes.len() as u64,
        });
    }
    let actual = crc32(&bytes);
    if actual != expected_crc {
        return Err(StoreError::ChecksumMismatch {
            file: path.to_path_buf(),
            expected: expected_crc,
            actual,
        });
    }
    Ok(bytes)
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize, crc: u32) -> Result<Matrix, StoreError> {
    let bytes = read_blob(path, 4 * (rows * cols) as u64, crc)?;
    let values = decode_f32(&bytes);
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFiniteValue {
            file: path.to_path_buf(),
            index,
        });
    }
    Ok(Matrix::from_vec(rows, cols, values).expect("length checked"))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::schema(path, e.to_string()))
}

/// Writes `bundle` to directory `path`, creating it if needed.
///
/// Output bytes depend only on the bundle, so saving the same bundle twice
/// yields identical files. Values are narrowed to `f32`.
pub fn save_bundle(bundle: &EmbeddingBundle, path: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(path).map_err(|e| StoreError::io(path, e))?;
    let f = bundle.dim_image();
    let f_prime = bundle.dim_image_text();

    let mut entries = Vec::with_capacity(bundle.splits.len());
    for (name, split) in &bundle.splits {
        if !valid_split_name(name) {
            return Err(StoreError::InvalidSplitName(name.clone()));
        }
        let empty = Matrix::zeros(0, 0);
        let image = bundle.image.get(name).unwrap_or(&empty);
        let image_text = bundle.image_text.get(name).unwrap_or(&empty);

        let entry = SplitEntry {
            name: name.clone(),
            n_rows: split.labels.len(),
            item_ids_file: format!("{name}.item_ids.json"),
            labels_file: format!("{name}.labels.u32"),
            image_blob: format!("{name}.image.f32"),
            image_text_blob: format!("{name}.image_text.f32"),
            crc32: SplitCrcs {
                labels: 0,
                image: 0,
                image_text: 0,
            },
        };
        let labels = encode_u32(&split.labels);
        let image_bytes = encode_f32(image.as_slice());
        let image_text_bytes = encode_f32(image_text.as_slice());
        write_atomic(&path.join(&entry.item_ids_file), &to_json_bytes(&split.item_ids))?;
        write_atomic(&path.join(&entry.labels_file), &labels)?;
        write_atomic(&path.join(&entry.image_blob), &image_bytes)?;
        write_atomic(&path.join(&entry.image_text_blob), &image_text_bytes)?;
        entries.push(SplitEntry {
            crc32: SplitCrcs {
                labels: crc32(&labels),
                image: crc32(&image_bytes),
                image_text: crc32(&image_text_bytes),
            },
            ..entry
        });
    }

    let prompts = encode_f32(bundle.class_prompts.values());
    write_atomic(&path.join(CLASS_PROMPTS_FILE), &prompts)?;
    write_atomic(&path.join(CLASSES_FILE), &to_json_bytes(&bundle.catalog))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dims: ManifestDims {
            f,
            f_prime,
            m: bundle.class_prompts.m(),
        },
        splits: entries,
        class_prompts_blob: CLASS_PROMPTS_FILE.to_string(),
        class_prompts_crc32: crc32(&prompts),
        meta: bundle.meta.clone(),
    };
    // manifest last: a directory without one is never mistaken for a bundle
    write_atomic(&path.join(MANIFEST_FILE), &to_json_bytes(&manifest))
}

/// Loads and checks a bundle directory.
pub fn load_bundle(path: &Path) -> Result<EmbeddingBundle, StoreError> {
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest: Manifest = parse_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::schema(
            &manifest_path,
            format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }

    let classes_path = path.join(CLASSES_FILE);
    let names: Vec<String> = parse_json(&classes_path)?;
    let catalog = ClassCatalog::new(names).map_err(|d| StoreError::schema(&classes_path, d))?;
    let n_classes = catalog.len();
    let ManifestDims { f, f_prime, m } = manifest.dims;
    if m == 0 {
        return Err(StoreError::schema(&manifest_path, "dims.M must be at least 1"));
    }

    let prompts_path = path.join(&manifest.class_prompts_blob);
    let prompts = read_f32_matrix(&prompts_path, n_classes * m, f, manifest.class_prompts_crc32)?;
    let class_prompts = PromptEmbeddingBlock::new(n_classes, m, f, prompts.into_vec()).expect("length checked");

    let mut splits = BTreeMap::new();
    let mut image = BTreeMap::new();
    let mut image_text = BTreeMap::new();
    for entry in manifest.splits {
        if !valid_split_name(&entry.name) {
            return Err(StoreError::schema(
                &manifest_path,
                format!("invalid split name {:?}", entry.name),
            ));
        }
        if splits.contains_key(&entry.name) {
            return Err(StoreError::schema(
                &manifest_path,
                format!("duplicate split {:?}", entry.name),
            ));
        }
        let n = entry.n_rows;

        let ids_path = path.join(&entry.item_ids_file);
        let item_ids: Vec<String> = parse_json(&ids_path)?;
        if item_ids.len() != n {
            return Err(StoreError::schema(
                &ids_path,
                format!("{} item ids, manifest declares n_rows={n}", item_ids.len()),
            ));
        }

        let labels_path = path.join(&entry.labels_file);
        let labels = decode_u32(&read_blob(&labels_path, 4 * n as u64, entry.crc32.labels)?);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= n_classes) {
            return Err(StoreError::LabelOutOfRange {
                file: labels_path,
                index,
                label,
                n_classes,
            });
        }

        let img = read_f32_matrix(&path.join(&entry.image_blob), n, f, entry.crc32.image)?;
        let img_text = read_f32_matrix(&path.join(&entry.image_text_blob), n, f_prime, entry.crc32.image_text)?;
        image.insert(entry.name.clone(), img);
        image_text.insert(entry.name.clone(), img_text);
        splits.insert(
            entry.name.clone(),
            DatasetSplit {
                name: entry.name,
                item_ids,
                labels,
            },
        );
    }

    let bundle = EmbeddingBundle {
        catalog,
        splits,
        image,
        image_text,
        class_prompts,
        meta: manifest.meta,
    };
    if let Some(v) = validate_bundle(&bundle).into_iter().next() {
        return Err(StoreError::schema(&manifest_path, v.to_string()));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_bundle() -> EmbeddingBundle {
        let catalog = ClassCatalog::new(vec!["badger".into(), "zebra".into()]).unwrap();
        let split = DatasetSplit {
            name: "train".into(),
            item_ids: vec!["a".into(), "b".into(), "c".into()],
            labels: vec![0, 1, 1],
        };
        let image = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.25]]);
        let image_text = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5], [4.0, 0.125, 1.0]]);
        let prompts = PromptEmbeddingBlock::new(2, 2, 2, vec![1.0, 0.0, 0.75, 0.25, 0.0, 1.0, 0.5, 0.5]).unwrap();
        EmbeddingBundle {
            catalog,
            splits: BTreeMap::from([("train".to_string(), split)]),
            image: BTreeMap::from([("train".to_string(), image)]),
            image_text: BTreeMap::from([("train".to_string(), image_text)]),
            class_prompts: prompts,
            meta: BTreeMap::from([("source".to_string(), "unit-test".to_string())]),
        }
    }

    #[test]
    fn tiny_bundle_is_valid() {
        assert!(validate_bundle(&tiny_bundle()).is_empty());
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        save_bundle(&b, dir.path()).unwrap();
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, b);
        save_bundle(&loaded, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn empty_split_writes_empty_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.splits.insert(
            "val".into(),
            DatasetSplit {
                name: "val".into(),
                item_ids: vec![],
                labels: vec![],
            },
        );
        b.image.insert("val".into(), Matrix::zeros(0, 2));
        b.image_text.insert("val".into(), Matrix::zeros(0, 3));
        assert!(validate_bundle(&b).is_empty());
        save_bundle(&b, dir.path()).unwrap();
        for f in ["val.labels.u32", "val.image.f32", "val.image_text.f32"] {
            assert_eq!(fs::metadata(dir.path().join(f)).unwrap().len(), 0, "{f}");
        }
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(StoreError::MissingFile(p)) if p.ends_with(MANIFEST_FILE)));
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.splits.get_mut("train").unwrap().labels[2] = 2;
        save_bundle(&b, dir.path()).unwrap();
        match load_bundle(dir.path()) {
            Err(StoreError::LabelOutOfRange {
                index,
                label,
                n_classes,
                file,
            }) => {
                assert_eq!((index, label, n_classes), (2, 2, 2));
                assert!(file.ends_with("train.labels.u32"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny_bundle(), dir.path()).unwrap();
        let blob = dir.path().join("train.image_text.f32");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&blob, bytes).unwrap();
        match load_bundle(dir.path()) {
            Err(StoreError::DimensionMismatch { expected, actual, file }) => {
                assert_eq!(expected, 4 * 3 * 3);
                assert_eq!(actual, 4 * 3 * 3 - 4);
                assert!(file.ends_with("train.image_text.f32"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny_bundle(), dir.path()).unwrap();
        let blob = dir.path().join("train.image.f32");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x01;
        // independent check: the manifest crc no longer matches the file
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let stored = manifest["splits"][0]["crc32"]["image"].as_u64().unwrap() as u32;
        assert_ne!(crc32fast::hash(&bytes), stored);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(StoreError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn unknown_manifest_key_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny_bundle(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(StoreError::ManifestSchema { .. })
        ));
    }

    #[test]
    fn nan_reported_at_position() {
        let mut b = tiny_bundle();
        b.image.get_mut("train").unwrap().set(1, 1, f64::NAN);
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NonFiniteValue);
        assert_eq!(v[0].index.as_deref(), Some("1,1"));
    }

    #[test]
    fn row_count_mismatch_reported_once() {
        let mut b = tiny_bundle();
        let it = b.image_text.get_mut("train").unwrap();
        *it = it.select_rows(&[0, 1]);
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::RowCountMismatch);
    }

    #[test]
    fn duplicate_class_rejected() {
        assert!(ClassCatalog::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ClassCatalog::new(vec![]).is_err());
    }
}
