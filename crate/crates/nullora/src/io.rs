//! Bit-exact persistence: the NLRT tensor container, adapter save/load, and
//! JSON report types.
//!
//! NLRT layout: magic `"NLRT"` (4 bytes), little-endian `u32` version (= 1),
//! little-endian `u64` header length, a UTF-8 JSON header mapping each tensor
//! name to `{dtype, shape, offset, length}` plus an optional `"__meta__"`
//! document, zero padding to the next 64-byte boundary, then raw row-major
//! little-endian payloads at the stated offsets (relative to the payload
//! start). Entries are serialized in name-sorted order with a compact JSON
//! header, so logically equal files are byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterLayer, AdapterMode, InvariantCheck};
use crate::matrix::DenseMatrix;
use crate::numerics::{self, NumericsError};

const MAGIC: &[u8; 4] = b"NLRT";
const FORMAT_VERSION: u32 = 1;
const PAYLOAD_ALIGN: u64 = 64;
const META_KEY: &str = "__meta__";

/// Orthonormality tolerance applied to the stored projection basis on load.
const LOAD_ORTHO_TOL: f64 = 1e-8;
/// Null-alignment tolerance on load: `|W0^T B_f|_max <= tol * |W0|_F`.
const LOAD_NULL_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: not an NLRT file")]
    BadMagic,
    #[error("unsupported NLRT version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("truncated file: need {needed} bytes, have {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("malformed header: {what}")]
    Header { what: String },
    #[error("duplicate tensor name '{name}'")]
    DuplicateName { name: String },
    #[error("invalid tensor name {name:?}")]
    InvalidName { name: String },
    #[error("tensor '{name}': unsupported dtype '{dtype}'")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor '{name}': invalid shape {shape:?}")]
    InvalidShape { name: String, shape: Vec<u64> },
    #[error("tensor '{name}': declared length {declared} does not match shape {rows}x{cols} of {dtype}")]
    ByteLength {
        name: String,
        declared: u64,
        rows: u64,
        cols: u64,
        dtype: Dtype,
    },
    #[error("tensor '{name}': contains non-finite values")]
    NonFinite { name: String },
    #[error("missing tensor '{name}'")]
    MissingTensor { name: String },
    #[error("adapter metadata: {what}")]
    Meta { what: String },
    #[error("layer '{layer}': {what}")]
    LayerMismatch { layer: String, what: String },
    #[error("layer '{layer}': {what}: measured {measured:e} exceeds {tolerance:e} (corrupt adapter or wrong checkpoint)")]
    InvariantViolation {
        layer: String,
        what: &'static str,
        measured: f64,
        tolerance: f64,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named tensor. Data is held as `f64` in memory; `dtype` records the
/// on-disk precision (f32 payloads are upcast on load and written back
/// losslessly).
#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub matrix: DenseMatrix,
}

/// An ordered collection of named 2-D tensors plus optional metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    entries: BTreeMap<String, TensorEntry>,
    pub meta: Option<Value>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != META_KEY
        && name.chars().all(|c| c >= ' ' && c != '\u{7f}')
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        dtype: Dtype,
        matrix: DenseMatrix,
    ) -> Result<(), IoError> {
        if !valid_name(name) {
            return Err(IoError::InvalidName {
                name: name.to_string(),
            });
        }
        if self.entries.contains_key(name) {
            return Err(IoError::DuplicateName {
                name: name.to_string(),
            });
        }
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(IoError::InvalidShape {
                name: name.to_string(),
                shape: vec![matrix.rows() as u64, matrix.cols() as u64],
            });
        }
        if !matrix.is_finite() {
            return Err(IoError::NonFinite {
                name: name.to_string(),
            });
        }
        self.entries.insert(name.to_string(), TensorEntry { dtype, matrix });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    /// Swaps the data of an existing tensor, keeping its on-disk dtype.
    pub fn replace(&mut self, name: &str, matrix: DenseMatrix) -> Result<(), IoError> {
        if !matrix.is_finite() {
            return Err(IoError::NonFinite {
                name: name.to_string(),
            });
        }
        match self.entries.get_mut(name) {
            Some(entry) => {
                entry.matrix = matrix;
                Ok(())
            }
            None => Err(IoError::MissingTensor {
                name: name.to_string(),
            }),
        }
    }

    /// Entries in name-sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (&String, &TensorEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical byte serialization: name-sorted entries, compact JSON
    /// header, payload aligned to 64 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::<String, Value>::new();
        if let Some(meta) = &self.meta {
            header.insert(META_KEY.to_string(), meta.clone());
        }
        let mut offset = 0u64;
        for (name, entry) in &self.entries {
            let length =
                entry.matrix.rows() as u64 * entry.matrix.cols() as u64 * entry.dtype.size();
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": entry.dtype.as_str(),
                    "shape": [entry.matrix.rows(), entry.matrix.cols()],
                    "offset": offset,
                    "length": length,
                }),
            );
            offset += length;
        }
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");
        let header_len = header_bytes.len() as u64;
        let payload_start = (16 + header_len).div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN;

        let mut out = Vec::with_capacity((payload_start + offset) as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.resize(payload_start as usize, 0);
        for entry in self.entries.values() {
            match entry.dtype {
                Dtype::F64 => {
                    for x in entry.matrix.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for x in entry.matrix.data() {
                        out.extend_from_slice(&(*x as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let actual = bytes.len() as u64;
        if actual < 16 {
            return Err(IoError::Truncated {
                needed: 16,
                actual,
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(IoError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16u64.checked_add(header_len).ok_or(IoError::Header {
            what: "header length overflows".into(),
        })?;
        if header_end > actual {
            return Err(IoError::Truncated {
                needed: header_end,
                actual,
            });
        }
        let header: RawHeader = serde_json::from_slice(&bytes[16..header_end as usize])
            .map_err(|e| match classify_json_error(&e) {
                Some(name) => IoError::DuplicateName { name },
                None => IoError::Header {
                    what: e.to_string(),
                },
            })?;
        let payload_start = header_end.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN;
        let payload = bytes.get(payload_start as usize..).unwrap_or(&[]);

        let mut file = TensorFile {
            entries: BTreeMap::new(),
            meta: header.meta,
        };
        for (name, raw) in header.entries {
            if !valid_name(&name) {
                return Err(IoError::InvalidName { name });
            }
            let dtype = match raw.dtype.as_str() {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                other => {
                    return Err(IoError::UnsupportedDtype {
                        name,
                        dtype: other.to_string(),
                    })
                }
            };
            let [rows, cols] = match raw.shape.as_slice() {
                [r, c] => [*r, *c],
                _ => {
                    return Err(IoError::InvalidShape {
                        name,
                        shape: raw.shape,
                    })
                }
            };
            if rows == 0 || cols == 0 {
                return Err(IoError::InvalidShape {
                    name,
                    shape: vec![rows, cols],
                });
            }
            let expected_len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| IoError::InvalidShape {
                    name: name.clone(),
                    shape: vec![rows, cols],
                })?;
            if raw.length != expected_len {
                return Err(IoError::ByteLength {
                    name,
                    declared: raw.length,
                    rows,
                    cols,
                    dtype,
                });
            }
            let end = raw.offset.checked_add(raw.length).ok_or(IoError::Header {
                what: format!("tensor '{name}' offset overflows"),
            })?;
            if end > payload.len() as u64 {
                return Err(IoError::Truncated {
                    needed: payload_start + end,
                    actual,
                });
            }
            let blob = &payload[raw.offset as usize..end as usize];
            let data: Vec<f64> = match dtype {
                Dtype::F64 => blob
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => blob
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if !data.iter().all(|x| x.is_finite()) {
                return Err(IoError::NonFinite { name });
            }
            let matrix = DenseMatrix::new(rows as usize, cols as usize, data)
                .expect("length checked against shape");
            if file.entries.contains_key(&name) {
                return Err(IoError::DuplicateName { name });
            }
            file.entries.insert(name, TensorEntry { dtype, matrix });
        }
        Ok(file)
    }
}

/// Duplicate keys reach us as a custom serde message; everything else is a
/// generic header error.
fn classify_json_error(e: &serde_json::Error) -> Option<String> {
    let msg = e.to_string();
    msg.strip_prefix("duplicate tensor name '")
        .and_then(|rest| rest.split('\'').next())
        .map(|s| s.to_string())
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    length: u64,
}

struct RawHeader {
    meta: Option<Value>,
    entries: Vec<(String, RawEntry)>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an NLRT header object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut meta = None;
                let mut entries: Vec<(String, RawEntry)> = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if key == META_KEY {
                        if meta.is_some() {
                            return Err(serde::de::Error::custom(format!(
                                "duplicate tensor name '{META_KEY}'"
                            )));
                        }
                        meta = Some(map.next_value::<Value>()?);
                    } else {
                        if entries.iter().any(|(n, _)| n == &key) {
                            return Err(serde::de::Error::custom(format!(
                                "duplicate tensor name '{key}'"
                            )));
                        }
                        entries.push((key, map.next_value::<RawEntry>()?));
                    }
                }
                Ok(RawHeader { meta, entries })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Writes atomically: a temp file in the same directory renamed into place.
pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<(), IoError> {
    let bytes = file.to_bytes();
    let wrap = |source| IoError::File {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(&bytes).map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    TensorFile::from_bytes(&bytes)
}

/// Adapter file metadata, stored under `__meta__`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterMeta {
    pub format_version: u32,
    pub mode: String,
    pub tau: f64,
    pub seed: u64,
    pub layers: Vec<LayerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerMeta {
    pub name: String,
    pub r: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub skipped: bool,
}

fn tensor_name(layer: &str, part: &str) -> String {
    format!("{layer}.{part}")
}

/// Persists the adapter layers plus metadata. Every layer (including skipped
/// ones) must appear in `meta.layers`; frozen bases are persisted rather than
/// recomputed on load so results do not depend on the SVD implementation at
/// load time.
pub fn save_adapter(
    path: &Path,
    layers: &[AdapterLayer],
    meta: &AdapterMeta,
) -> Result<(), IoError> {
    let mut file = TensorFile::new();
    for layer in layers {
        let lm = meta
            .layers
            .iter()
            .find(|lm| lm.name == layer.name())
            .ok_or_else(|| IoError::Meta {
                what: format!("layer '{}' absent from metadata", layer.name()),
            })?;
        if lm.skipped || lm.r != layer.rank() || lm.d_out != layer.d_out() || lm.d_in != layer.d_in()
        {
            return Err(IoError::Meta {
                what: format!("metadata for layer '{}' does not match the layer", layer.name()),
            });
        }
        if layer.mode().as_str() != meta.mode {
            return Err(IoError::Meta {
                what: format!(
                    "layer '{}' has mode {} but the adapter is {}",
                    layer.name(),
                    layer.mode().as_str(),
                    meta.mode
                ),
            });
        }
        let name = layer.name();
        file.insert(&tensor_name(name, "B"), Dtype::F64, layer.b().clone())?;
        file.insert(&tensor_name(name, "A"), Dtype::F64, layer.a().clone())?;
        match layer.mode() {
            AdapterMode::VanillaLora => {}
            _ => {
                file.insert(&tensor_name(name, "B_f"), Dtype::F64, layer.b_frozen().clone())?;
                file.insert(&tensor_name(name, "A_f"), Dtype::F64, layer.a_frozen().clone())?;
                let s = DenseMatrix::new(1, layer.s().len(), layer.s().to_vec())
                    .expect("s row vector");
                file.insert(&tensor_name(name, "s"), Dtype::F64, s)?;
            }
        }
        if let Some(u_hat) = layer.u_hat() {
            file.insert(&tensor_name(name, "U_hat"), Dtype::F64, u_hat.clone())?;
        }
    }
    file.meta = Some(serde_json::to_value(meta).expect("meta serialization"));
    write_tensor_file(path, &file)
}

/// Reconstructs adapter layers against the checkpoint that supplies each
/// frozen `W0`. Verifies that the stored projection basis is orthonormal and
/// still annihilates `W0^T`, failing loudly on corruption or a checkpoint
/// mismatch.
pub fn load_adapter(
    path: &Path,
    checkpoint: &TensorFile,
) -> Result<(Vec<AdapterLayer>, AdapterMeta), IoError> {
    let file = read_tensor_file(path)?;
    let meta = adapter_meta(&file)?;
    let mode = AdapterMode::parse(&meta.mode).ok_or_else(|| IoError::Meta {
        what: format!("unknown mode '{}'", meta.mode),
    })?;

    let mut layers = Vec::new();
    for lm in meta.layers.iter().filter(|lm| !lm.skipped) {
        let w0_entry = checkpoint
            .get(&lm.name)
            .ok_or_else(|| IoError::LayerMismatch {
                layer: lm.name.clone(),
                what: "checkpoint does not contain this layer".into(),
            })?;
        let w0 = w0_entry.matrix.clone();
        if w0.rows() != lm.d_out || w0.cols() != lm.d_in {
            return Err(IoError::LayerMismatch {
                layer: lm.name.clone(),
                what: format!(
                    "checkpoint weight is {}x{}, adapter expects {}x{}",
                    w0.rows(),
                    w0.cols(),
                    lm.d_out,
                    lm.d_in
                ),
            });
        }
        let fetch = |part: &str| -> Result<DenseMatrix, IoError> {
            let name = tensor_name(&lm.name, part);
            file.get(&name)
                .map(|e| e.matrix.clone())
                .ok_or(IoError::MissingTensor { name })
        };
        let b = fetch("B")?;
        let a = fetch("A")?;
        let (b_frozen, a_frozen, s, u_hat) = match mode {
            AdapterMode::VanillaLora => (
                DenseMatrix::zeros(lm.d_out, 0),
                DenseMatrix::zeros(0, lm.d_in),
                Vec::new(),
                None,
            ),
            AdapterMode::AblationRandom => {
                (fetch("B_f")?, fetch("A_f")?, fetch("s")?.data().to_vec(), None)
            }
            AdapterMode::NullLora => (
                fetch("B_f")?,
                fetch("A_f")?,
                fetch("s")?.data().to_vec(),
                Some(fetch("U_hat")?),
            ),
        };
        let lora_alpha = meta.lora_alpha.unwrap_or(lm.r as f64);
        let layer = AdapterLayer::from_parts(
            &lm.name, w0, mode, lm.r, b_frozen, a_frozen, b, a, s, u_hat, lora_alpha,
        )?;

        if mode == AdapterMode::NullLora {
            let u_hat = layer.u_hat().expect("null mode");
            let gram = u_hat.t().matmul(u_hat);
            let q = layer.rank() / 2;
            let ortho = gram.max_abs_diff(&DenseMatrix::identity(q));
            if ortho > LOAD_ORTHO_TOL {
                return Err(IoError::InvariantViolation {
                    layer: lm.name.clone(),
                    what: "projection basis is not orthonormal",
                    measured: ortho,
                    tolerance: LOAD_ORTHO_TOL,
                });
            }
            let residual = layer.w0().t().matmul(layer.b_frozen()).max_abs();
            let tolerance = LOAD_NULL_TOL * layer.w0().fro_norm();
            if residual > tolerance {
                return Err(IoError::InvariantViolation {
                    layer: lm.name.clone(),
                    what: "frozen basis is not in the checkpoint's null space",
                    measured: residual,
                    tolerance,
                });
            }
        }
        layers.push(layer);
    }
    Ok((layers, meta))
}

fn adapter_meta(file: &TensorFile) -> Result<AdapterMeta, IoError> {
    let value = file.meta.as_ref().ok_or(IoError::Meta {
        what: "file has no __meta__ document".into(),
    })?;
    let meta: AdapterMeta =
        serde_json::from_value(value.clone()).map_err(|e| IoError::Meta { what: e.to_string() })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: meta.format_version,
        });
    }
    Ok(meta)
}

/// Per-layer entry of the `analyze` JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub nullity_left: usize,
    pub nullity_right: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub deficiency_pct: f64,
    pub tau: f64,
}

pub fn analyze_layer(name: &str, w: &DenseMatrix, tau: f64) -> Result<LayerAnalysis, NumericsError> {
    let report = numerics::analyze_matrix(w, tau)?;
    Ok(LayerAnalysis {
        name: name.to_string(),
        d_out: w.rows(),
        d_in: w.cols(),
        rank: report.numerical_rank,
        nullity_left: report.nullity_left,
        nullity_right: report.nullity_right,
        sigma_max: report.sigma_max,
        sigma_min: report.sigma_min,
        deficiency_pct: report.nullity_right as f64 / w.cols() as f64 * 100.0,
        tau: report.tau,
    })
}

/// `verify` JSON report: per-layer invariant checks plus the overall flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub layers: Vec<VerifyLayerReport>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyLayerReport {
    pub name: String,
    pub mode: String,
    pub checks: BTreeMap<String, InvariantCheck>,
    pub pass: bool,
}
