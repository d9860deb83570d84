//! Embedding storage: the EMB1 on-disk format, row normalization, JSON
//! manifests, and assembly of the class-major few-shot cache.
//!
//! EMB1 layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EMB1"
//!      4     4  version (u32) = 1
//!      8     8  rows (u64)
//!     16     8  dim (u64)
//!     24     1  normalized (u8, 0 or 1)
//!     25     7  reserved, zero
//!     32     *  rows * dim f32, row-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IdeaError, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
pub const EMB1_HEADER_LEN: usize = 32;

/// Tolerance on row norms for matrices flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;
/// Rows with a norm at or below this are rejected by [`l2_normalize_rows`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Dense row-major `rows × dim` matrix of `f32` features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking shape, finiteness and (when `normalized`)
    /// unit row norms.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(IdeaError::Shape(format!(
                "matrix must have rows >= 1 and dim >= 1, got {rows}x{dim}"
            )));
        }
        let expected = rows
            .checked_mul(dim)
            .ok_or_else(|| IdeaError::Shape(format!("matrix size {rows}x{dim} overflows")))?;
        if data.len() != expected {
            return Err(IdeaError::Shape(format!(
                "data length {} does not match {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IdeaError::Input(format!(
                "non-finite value at row {}, column {}",
                i / dim,
                i % dim
            )));
        }
        let matrix = EmbeddingMatrix {
            rows,
            dim,
            data,
            normalized,
        };
        if normalized {
            if let Some(row) = matrix.first_non_unit_row() {
                return Err(IdeaError::Input(format!(
                    "row {row} is flagged normalized but has norm {}",
                    row_norm(matrix.row(row))
                )));
            }
        }
        Ok(matrix)
    }

    pub fn from_rows(rows: &[Vec<f32>], normalized: bool) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(IdeaError::Shape(format!(
                "row {bad} has length {}, expected {dim}",
                rows[bad].len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dim, data, normalized)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        self.iter_rows().map(<[f32]>::to_vec).collect()
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(IdeaError::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dim, data, self.normalized)
    }

    fn first_non_unit_row(&self) -> Option<usize> {
        self.iter_rows()
            .position(|r| (row_norm(r) - 1.0).abs() > UNIT_NORM_TOLERANCE)
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for (i, row) in matrix.iter_rows().enumerate() {
        let norm = row_norm(row);
        if norm <= NORM_EPSILON {
            return Err(IdeaError::DegenerateRow { row: i });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingMatrix::new(matrix.rows, matrix.dim, data, true)
}

/// Serializes a matrix into EMB1 bytes.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB1_HEADER_LEN + matrix.data.len() * 4);
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.dim as u64).to_le_bytes());
    out.push(u8::from(matrix.normalized));
    out.extend_from_slice(&[0u8; 7]);
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u64(bytes: &[u8], offset: usize) -> u64 {
    u64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8-byte slice"))
}

/// Parses EMB1 bytes. Errors carry the byte offset of the offending field.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < EMB1_HEADER_LEN {
        return Err(IdeaError::format(
            bytes.len() as u64,
            format!(
                "truncated header: {} of {EMB1_HEADER_LEN} bytes",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != EMB1_MAGIC {
        return Err(IdeaError::format(
            0,
            format!("bad magic {:?}", &bytes[0..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != EMB1_VERSION {
        return Err(IdeaError::format(
            4,
            format!("unsupported version {version}"),
        ));
    }
    let rows = read_u64(bytes, 8);
    if rows == 0 {
        return Err(IdeaError::format(8, "rows is zero"));
    }
    let dim = read_u64(bytes, 16);
    if dim == 0 {
        return Err(IdeaError::format(16, "dim is zero"));
    }
    let normalized = match bytes[24] {
        0 => false,
        1 => true,
        other => {
            return Err(IdeaError::format(
                24,
                format!("normalized flag {other} is not 0/1"),
            ))
        }
    };
    if let Some(i) = bytes[25..32].iter().position(|&b| b != 0) {
        return Err(IdeaError::format(25 + i as u64, "reserved byte is nonzero"));
    }

    let count = rows
        .checked_mul(dim)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| IdeaError::format(8, format!("{rows}x{dim} does not fit in memory")))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| IdeaError::format(8, format!("{rows}x{dim} does not fit in memory")))?;
    let payload = &bytes[EMB1_HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(IdeaError::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {payload_len} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > payload_len {
        return Err(IdeaError::format(
            (EMB1_HEADER_LEN + payload_len) as u64,
            format!(
                "{} trailing bytes after payload",
                payload.len() - payload_len
            ),
        ));
    }

    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(IdeaError::format(
                (EMB1_HEADER_LEN + 4 * i) as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    let (rows, dim) = (rows as usize, dim as usize);
    let matrix = EmbeddingMatrix {
        rows,
        dim,
        data,
        normalized,
    };
    if normalized {
        if let Some(r) = matrix.first_non_unit_row() {
            return Err(IdeaError::format(
                (EMB1_HEADER_LEN + 4 * r * dim) as u64,
                format!("row {r} is not unit norm but header flags normalized"),
            ));
        }
    }
    Ok(matrix)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IdeaError::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    // Matrices can only be built through checked constructors, but a NaN
    // must never reach disk.
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(IdeaError::Input(
            "refusing to write non-finite matrix".into(),
        ));
    }
    write_atomic(path.as_ref(), &encode_embeddings(matrix))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| IdeaError::Input(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        IdeaError::io(path, e)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowOrder {
    #[serde(rename = "class-major")]
    ClassMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    Text,
    ClassPrototype,
    Test,
}

/// JSON sidecar describing a dataset or a few-shot cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub dataset_name: String,
    pub num_classes: usize,
    pub shots: usize,
    pub class_names: Vec<String>,
    pub backbone_tag: String,
    pub dim: usize,
    pub row_order: RowOrder,
    pub modality: Modality,
}

impl CacheManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.shots == 0 || self.dim == 0 {
            return Err(IdeaError::Config(format!(
                "manifest needs num_classes, shots, dim >= 1 (got {}, {}, {})",
                self.num_classes, self.shots, self.dim
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(IdeaError::Config(format!(
                "manifest lists {} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(IdeaError::Config(format!("duplicate class name {name:?}")));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CacheManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IdeaError::io(path, e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &CacheManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Paired image/text features of a K-shot N-class training set, stored
/// class-major: row `i*K + j` is shot `j` of class `i`.
#[derive(Debug, Clone)]
pub struct FewShotCache {
    manifest: CacheManifest,
    images: EmbeddingMatrix,
    texts: EmbeddingMatrix,
    labels: Vec<usize>,
}

impl FewShotCache {
    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn images(&self) -> &EmbeddingMatrix {
        &self.images
    }

    pub fn texts(&self) -> &EmbeddingMatrix {
        &self.texts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn shots(&self) -> usize {
        self.manifest.shots
    }

    pub fn dim(&self) -> usize {
        self.images.dim
    }

    /// N×K.
    pub fn len(&self) -> usize {
        self.images.rows
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows == 0
    }

    /// Replaces the text features, keeping the ordering and labels.
    pub fn with_texts(&self, texts: EmbeddingMatrix) -> Result<Self> {
        if texts.rows != self.texts.rows || texts.dim != self.texts.dim {
            return Err(IdeaError::Shape(format!(
                "text matrix {}x{} does not match cache {}x{}",
                texts.rows, texts.dim, self.texts.rows, self.texts.dim
            )));
        }
        let texts = if texts.normalized {
            texts
        } else {
            l2_normalize_rows(&texts)?
        };
        Ok(FewShotCache {
            texts,
            ..self.clone()
        })
    }
}

/// Builds a [`FewShotCache`], stably reordering rows into class-major order
/// and normalizing both modalities.
pub fn assemble_cache(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    manifest: &CacheManifest,
    labels: &[usize],
) -> Result<FewShotCache> {
    manifest.validate()?;
    if images.dim != texts.dim {
        return Err(IdeaError::Shape(format!(
            "image dim {} != text dim {}",
            images.dim, texts.dim
        )));
    }
    if images.dim != manifest.dim {
        return Err(IdeaError::Shape(format!(
            "feature dim {} != manifest dim {}",
            images.dim, manifest.dim
        )));
    }
    if images.rows != labels.len() || texts.rows != labels.len() {
        return Err(IdeaError::Shape(format!(
            "{} image rows and {} text rows for {} labels",
            images.rows,
            texts.rows,
            labels.len()
        )));
    }

    let (n, k) = (manifest.num_classes, manifest.shots);
    let mut counts = vec![0usize; n];
    for &label in labels {
        if label >= n {
            return Err(IdeaError::Label {
                label,
                num_classes: n,
            });
        }
        counts[label] += 1;
    }
    if let Some((class, &found)) = counts.iter().enumerate().find(|(_, &c)| c != k) {
        return Err(IdeaError::Cardinality {
            class,
            expected: k,
            found,
        });
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);

    let normalize = |m: EmbeddingMatrix| {
        if m.normalized {
            Ok(m)
        } else {
            l2_normalize_rows(&m)
        }
    };
    let images = normalize(images.select_rows(&order)?)?;
    let texts = normalize(texts.select_rows(&order)?)?;
    let labels = order.iter().map(|&i| labels[i]).collect();

    Ok(FewShotCache {
        manifest: CacheManifest {
            row_order: RowOrder::ClassMajor,
            ..manifest.clone()
        },
        images,
        texts,
        labels,
    })
}
