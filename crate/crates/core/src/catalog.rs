//! Dataset manifest and precomputed feature matrix.
//!
//! A dataset directory holds a `manifest.json` listing every sample and a
//! binary `features.bin` with one feature row per sample. Paths inside the
//! manifest are relative to the manifest's own directory.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"DC3F";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest json: {0}")]
    MalformedJson(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?} references feature row {row} but the matrix has {count} rows")]
    DanglingFeatureRow { id: String, row: usize, count: usize },
    #[error("sample {id:?} has class {class:?} which is not listed in classes")]
    UndeclaredClass { id: String, class: String },
    #[error("invalid class list: {0}")]
    InvalidClasses(String),
    #[error("sample {0:?} has an empty id")]
    EmptyId(usize),
    #[error("sample {id:?}: image {path} does not exist")]
    MissingImage { id: String, path: PathBuf },
    #[error("feature file does not start with magic \"DC3F\"")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature header declares an empty matrix (count={count}, dim={dim})")]
    EmptyMatrix { count: u32, dim: u32 },
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("feature file has {0} trailing bytes after the matrix")]
    TrailingData(usize),
    #[error("non-finite feature value at row {0}, col {1}")]
    NonFiniteValue(usize, usize),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

/// One image of the input corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "image")]
    pub image_path: String,
    pub feature_row: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub feature_file: String,
    pub samples: Vec<SampleRecord>,
    /// Directory the manifest was loaded from; relative paths resolve here.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn feature_path(&self) -> PathBuf {
        self.root.join(&self.feature_file)
    }

    pub fn image_path(&self, sample: usize) -> PathBuf {
        self.root.join(&self.samples[sample].image_path)
    }

    /// Indices of all samples of `label`, in manifest order.
    pub fn class_view(&self, label: &str) -> Result<Vec<usize>> {
        if !self.classes.iter().any(|c| c == label) {
            return Err(CatalogError::UnknownClass(label.to_string()));
        }
        Ok(self
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_label == label)
            .map(|(i, _)| i)
            .collect())
    }

    /// Checks every invariant that does not need the filesystem, given the
    /// number of rows in the feature matrix.
    pub fn validate(&self, feature_count: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CatalogError::InvalidClasses("class list is empty".into()));
        }
        let mut seen_classes = HashSet::new();
        for c in &self.classes {
            if !seen_classes.insert(c.as_str()) {
                return Err(CatalogError::InvalidClasses(format!("class {c:?} listed twice")));
            }
        }
        let mut seen_ids = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.id.is_empty() {
                return Err(CatalogError::EmptyId(i));
            }
            if !seen_ids.insert(s.id.as_str()) {
                return Err(CatalogError::DuplicateId(s.id.clone()));
            }
            if !seen_classes.contains(s.class_label.as_str()) {
                return Err(CatalogError::UndeclaredClass {
                    id: s.id.clone(),
                    class: s.class_label.clone(),
                });
            }
            if s.feature_row >= feature_count {
                return Err(CatalogError::DanglingFeatureRow {
                    id: s.id.clone(),
                    row: s.feature_row,
                    count: feature_count,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Loads and validates `manifest.json`.
///
/// Validation reads the header of the referenced feature file to bound
/// `feature_row`, and checks that every image path exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_file(path)?;
    let text = String::from_utf8(text)
        .map_err(|e| CatalogError::MalformedJson(format!("not utf-8: {e}")))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CatalogError::MalformedJson(e.to_string()))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let (count, _dim) = read_feature_header(&manifest.feature_path())?;
    manifest.validate(count)?;
    for (i, s) in manifest.samples.iter().enumerate() {
        let p = manifest.image_path(i);
        if !p.is_file() {
            return Err(CatalogError::MissingImage { id: s.id.clone(), path: p });
        }
    }
    Ok(manifest)
}

/// Dense row-major matrix of per-sample features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix, checking shape and finiteness.
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(CatalogError::EmptyMatrix { count: count as u32, dim: dim as u32 });
        }
        if data.len() != count * dim {
            return Err(CatalogError::TruncatedFile {
                expected: count * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CatalogError::NonFiniteValue(pos / dim, pos % dim));
        }
        Ok(Self { count, dim, data })
    }

    /// Convenience constructor for tests and synthetic data.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(CatalogError::TruncatedFile { expected: dim, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.dim, data)
    }

    /// Applies `f` elementwise, mostly useful for invariance tests.
    pub fn map(&self, f: impl Fn(usize, f32) -> f32) -> Result<Self> {
        let dim = self.dim;
        let data = self.data.iter().enumerate().map(|(i, &v)| f(i % dim, v)).collect();
        Self::new(self.count, self.dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (count, dim) = parse_header(bytes)?;
        let expected = HEADER_LEN + count * dim * 4;
        if bytes.len() < expected {
            return Err(CatalogError::TruncatedFile { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(CatalogError::TrailingData(bytes.len() - expected));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(count, dim, data)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(CatalogError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CatalogError::TruncatedFile { expected: HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(CatalogError::UnsupportedVersion(version));
    }
    let (count, dim) = (word(8), word(12));
    if count == 0 || dim == 0 {
        return Err(CatalogError::EmptyMatrix { count, dim });
    }
    Ok((count as usize, dim as usize))
}

fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let mut file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    file.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| io_error(path, e))?;
    parse_header(&head)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&read_file(path)?)
}

pub fn write_features(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    fs::write(path, matrix.to_bytes()).map_err(|e| io_error(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: io::Error) -> CatalogError {
    if e.kind() == io::ErrorKind::NotFound {
        CatalogError::MissingFile(path.to_path_buf())
    } else {
        CatalogError::Io { path: path.to_path_buf(), source: e }
    }
}
