//! LATC binary containers and dataset manifests.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LATC"
//! 4       1     version (1)
//! 5       1     dtype (0 = f32, 1 = i32)
//! 6       2     reserved, zero
//! 8       8     rows (u64)
//! 16      8     cols (u64)
//! 24      ..    payload, row-major, rows*cols*4 bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, LabelVector};

pub const MAGIC: [u8; 4] = *b"LATC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
        }
    }
}

/// Row-major i32 matrix; labels are stored as `n × 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    F32(FeatureMatrix),
    I32(IntMatrix),
}

impl Container {
    pub fn dtype(&self) -> Dtype {
        match self {
            Container::F32(_) => Dtype::F32,
            Container::I32(_) => Dtype::I32,
        }
    }

    pub fn into_features(self) -> Result<FeatureMatrix> {
        match self {
            Container::F32(m) => Ok(m),
            other => Err(Error::DtypeMismatch {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }

    /// Interprets an `n × 1` i32 container as labels, checking `[0, classes)`.
    pub fn into_labels(self, classes: usize) -> Result<LabelVector> {
        let m = match self {
            Container::I32(m) => m,
            other => {
                return Err(Error::DtypeMismatch {
                    expected: "i32",
                    found: other.dtype().name(),
                })
            }
        };
        if m.cols != 1 {
            return Err(Error::MalformedHeader(format!(
                "label container must have one column, found {}",
                m.cols
            )));
        }
        let mut values = Vec::with_capacity(m.rows);
        for (row, &v) in m.data.iter().enumerate() {
            if v < 0 || v as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: v as i64,
                    classes,
                });
            }
            values.push(v as usize);
        }
        Ok(LabelVector::new(values))
    }
}

fn header(dtype: Dtype, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out
}

pub fn encode_features(matrix: &FeatureMatrix) -> Result<Vec<u8>> {
    if let Some((row, col)) = matrix.first_non_finite() {
        return Err(Error::NonFiniteElement { row, col });
    }
    let mut out = header(Dtype::F32, matrix.rows(), matrix.cols());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelVector) -> Result<Vec<u8>> {
    if labels.is_empty() {
        return Err(Error::EmptyMatrix { rows: 0, cols: 1 });
    }
    let mut out = header(Dtype::I32, labels.len(), 1);
    for &v in labels.as_slice() {
        let v = i32::try_from(v)
            .map_err(|_| Error::InvalidParameter(format!("label {v} exceeds i32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic { found });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "header is {} bytes, expected {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::MalformedHeader("reserved bytes are not zero".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(Error::MalformedHeader(format!("empty shape {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader(format!("shape {rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes(found - expected));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
            let m = FeatureMatrix::new(rows, cols, data)?;
            if let Some((row, col)) = m.first_non_finite() {
                return Err(Error::NonFiniteElement { row, col });
            }
            Ok(Container::F32(m))
        }
        Dtype::I32 => Ok(Container::I32(IntMatrix {
            rows,
            cols,
            data: words.map(i32::from_le_bytes).collect(),
        })),
    }
}

pub fn write_container(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &LabelVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_labels(labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    read_container(path)?.into_features()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoundationEntry {
    pub model_id: String,
    pub path: String,
}

/// On-disk `manifest.json`. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classifier_features: String,
    pub foundation_features: Vec<FoundationEntry>,
    pub logits: String,
    pub labels: String,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct FoundationSpace {
    pub model_id: String,
    pub features: FeatureMatrix,
}

/// A validated manifest with every array loaded.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
    pub classifier: FeatureMatrix,
    pub foundation: Vec<FoundationSpace>,
    pub logits: FeatureMatrix,
    pub labels: LabelVector,
}

impl Bundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.foundation.iter().map(|f| f.model_id.as_str()).collect()
    }

    pub fn foundation_space(&self, model_id: &str) -> Result<&FoundationSpace> {
        self.foundation
            .iter()
            .find(|f| f.model_id == model_id)
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    /// Identifier used in reports: the manifest file stem, or its parent
    /// directory name when the file is called `manifest.json`.
    pub fn dataset_id(&self) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if stem == "manifest" {
            if let Some(dir) = self.path.parent().and_then(|p| p.file_name()) {
                return dir.to_string_lossy().into_owned();
            }
        }
        stem
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn check_rows(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::RowCountMismatch {
            what: what.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = std::collections::HashSet::new();
    for f in &manifest.foundation_features {
        if !seen.insert(f.model_id.as_str()) {
            return Err(Error::InvalidManifest(format!(
                "duplicate model_id {:?}",
                f.model_id
            )));
        }
    }

    let logits = read_features(resolve(base, &manifest.logits))?;
    let n = logits.rows();
    if logits.cols() < 2 {
        return Err(Error::InvalidManifest(format!(
            "logits need at least 2 classes, found {}",
            logits.cols()
        )));
    }
    let classifier = read_features(resolve(base, &manifest.classifier_features))?;
    check_rows("classifier_features", classifier.rows(), n)?;
    let label_container = read_container(resolve(base, &manifest.labels))?;
    if let Container::I32(m) = &label_container {
        check_rows("labels", m.rows, n)?;
    }
    let labels = label_container.into_labels(logits.cols())?;
    let mut foundation = Vec::with_capacity(manifest.foundation_features.len());
    for entry in &manifest.foundation_features {
        let features = read_features(resolve(base, &entry.path))?;
        check_rows(&format!("foundation {}", entry.model_id), features.rows(), n)?;
        foundation.push(FoundationSpace {
            model_id: entry.model_id.clone(),
            features,
        });
    }
    Ok(Bundle {
        path: path.to_path_buf(),
        manifest,
        classifier,
        foundation,
        logits,
        labels,
    })
}

/// Reads a headerless numeric CSV into an f32 matrix. Errors carry 1-based
/// line numbers.
pub fn import_csv_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let rows = read_csv_rows(path)?;
    let cols = rows.first().map_or(0, |(_, r)| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (line, record) in &rows {
        if record.len() != cols {
            return Err(Error::Parse {
                line: *line,
                message: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for field in record {
            let v: f32 = field.trim().parse().map_err(|_| Error::Parse {
                line: *line,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(v);
        }
    }
    FeatureMatrix::new(rows.len(), cols, data)
}

/// Reads a one-column CSV of integer labels, checking `[0, classes)`.
pub fn import_csv_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let rows = read_csv_rows(path)?;
    let mut values = Vec::with_capacity(rows.len());
    for (row, (line, record)) in rows.iter().enumerate() {
        if record.len() != 1 {
            return Err(Error::Parse {
                line: *line,
                message: format!("expected 1 field, found {}", record.len()),
            });
        }
        let v: i64 = record[0].trim().parse().map_err(|_| Error::Parse {
            line: *line,
            message: format!("not an integer: {:?}", record[0]),
        })?;
        if v < 0 || v as usize >= classes {
            return Err(Error::LabelOutOfRange {
                row,
                label: v,
                classes,
            });
        }
        values.push(v as usize);
    }
    if values.is_empty() {
        return Err(Error::EmptyMatrix { rows: 0, cols: 1 });
    }
    Ok(LabelVector::new(values))
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}
