//! Activation-trace container, persistence, and ingestion.
//!
//! A trace captures, for a set of denoising timesteps, the activation
//! matrix of every layer: `num_samples x feature_dim`, one row per
//! generated sample. On disk a trace is a directory holding two files:
//! `manifest.json` describes the model and the capture, `trace.bin` is the
//! raw payload. The binary layout is fixed little-endian so external
//! dumpers can emit traces without linking this crate:
//!
//! ```text
//! magic    8 bytes  "MPQTRACE"
//! version  u16      currently 1
//! dtype    u8       0 = f32, 1 = f64
//! payload  for each traced timestep (ascending), for each layer 0..L-1:
//!          num_samples * feature_dim scalars, row-major, little-endian
//! ```
//!
//! The payload length is fully determined by the manifest and is checked
//! exactly on read. Values are held as `f64` in memory for either dtype;
//! writing an `f32` trace requires every value to be exactly representable
//! in `f32` so a write/read round trip is lossless.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::write_atomic;

pub const TRACE_MAGIC: &[u8; 8] = b"MPQTRACE";
pub const TRACE_FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "trace.bin";

const HEADER_LEN: usize = 11;

/// Scalar width of the stored payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Static description of one traced layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub layer_id: usize,
    pub name: String,
    pub param_count: u64,
    pub feature_dim: usize,
    /// Bit width this layer must keep regardless of what the allocator
    /// decides (boundary layers are typically held at 8).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_bits: Option<u8>,
}

/// Everything about a capture except the activations themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub model_name: String,
    pub num_layers: usize,
    /// Total timesteps of the schedule the model was driven with.
    pub num_timesteps: usize,
    pub num_samples: usize,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Timestep labels covered by the payload, ascending. A full trace
    /// lists `0..num_timesteps`; a restricted trace keeps the original
    /// labels so its scores stay comparable with the full trace.
    pub timestep_indices: Vec<usize>,
    pub layers: Vec<LayerMeta>,
}

impl TraceManifest {
    pub fn validate(&self) -> Result<(), TraceError> {
        let fail = |msg: String| Err(TraceError::Manifest(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be positive".into());
        }
        if self.layers.len() != self.num_layers {
            return fail(format!(
                "num_layers is {} but {} layer entries are listed",
                self.num_layers,
                self.layers.len()
            ));
        }
        if self.num_timesteps == 0 {
            return fail("num_timesteps must be positive".into());
        }
        if self.num_samples == 0 {
            return fail("num_samples must be positive".into());
        }
        if self.timestep_indices.is_empty() {
            return fail("timestep_indices must be nonempty".into());
        }
        if !self.timestep_indices.windows(2).all(|w| w[0] < w[1]) {
            return fail("timestep_indices must be strictly increasing".into());
        }
        let last = *self.timestep_indices.last().unwrap();
        if last >= self.num_timesteps {
            return fail(format!(
                "timestep index {last} out of range for {} timesteps",
                self.num_timesteps
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_id != i {
                return fail(format!(
                    "layer entry {i} has layer_id {}; ids must be 0..L-1 in order",
                    layer.layer_id
                ));
            }
            if layer.feature_dim == 0 {
                return fail(format!("layer {i} has feature_dim 0"));
            }
            if let Some(bits) = layer.pinned_bits {
                if bits == 0 || bits > 32 {
                    return fail(format!("layer {i} pins {bits} bits; valid range is 1..=32"));
                }
            }
        }
        Ok(())
    }

    /// Payload bytes implied by this manifest (header excluded).
    pub fn payload_len(&self) -> usize {
        let per_timestep: usize = self
            .layers
            .iter()
            .map(|l| self.num_samples * l.feature_dim)
            .sum();
        self.timestep_indices.len() * per_timestep * self.dtype.size_bytes()
    }
}

/// A validated in-memory trace: one activation matrix per traced timestep
/// per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    manifest: TraceManifest,
    /// `tensors[pos][layer]`, `pos` indexing `manifest.timestep_indices`.
    tensors: Vec<Vec<Array2<f64>>>,
}

impl ActivationTrace {
    /// Builds a trace from a map keyed by `(timestep label, layer id)`.
    /// The map must cover exactly `timestep_indices x layers`, each tensor
    /// shaped `num_samples x feature_dim`.
    pub fn from_map(
        manifest: TraceManifest,
        mut tensors: BTreeMap<(usize, usize), Array2<f64>>,
    ) -> Result<Self, TraceError> {
        manifest.validate()?;
        let mut rows = Vec::with_capacity(manifest.timestep_indices.len());
        for &t in &manifest.timestep_indices {
            let mut row = Vec::with_capacity(manifest.num_layers);
            for (i, layer) in manifest.layers.iter().enumerate() {
                let tensor = tensors.remove(&(t, i)).ok_or(TraceError::Incomplete {
                    timestep: t,
                    layer: i,
                })?;
                if tensor.nrows() != manifest.num_samples || tensor.ncols() != layer.feature_dim {
                    return Err(TraceError::ShapeMismatch {
                        timestep: t,
                        layer: i,
                        expected_rows: manifest.num_samples,
                        expected_cols: layer.feature_dim,
                        rows: tensor.nrows(),
                        cols: tensor.ncols(),
                    });
                }
                row.push(tensor);
            }
            rows.push(row);
        }
        if let Some((&(t, i), _)) = tensors.iter().next() {
            return Err(TraceError::Unexpected {
                timestep: t,
                layer: i,
            });
        }
        Ok(ActivationTrace {
            manifest,
            tensors: rows,
        })
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    pub fn timestep_indices(&self) -> &[usize] {
        &self.manifest.timestep_indices
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    /// Tensor for original timestep label `t` and layer `i`.
    pub fn tensor(&self, t: usize, i: usize) -> Result<&Array2<f64>, TraceError> {
        let pos = self
            .manifest
            .timestep_indices
            .binary_search(&t)
            .map_err(|_| TraceError::UnknownTimestep(t))?;
        Ok(&self.tensors[pos][i])
    }

    /// Tensor by position in `timestep_indices` (0-based) and layer.
    pub fn tensor_at(&self, pos: usize, i: usize) -> &Array2<f64> {
        &self.tensors[pos][i]
    }

    /// Checks the value-level invariants: every entry finite, and exactly
    /// representable at the manifest dtype. Structural invariants hold by
    /// construction.
    pub fn validate_values(&self) -> Result<(), TraceError> {
        for (pos, &t) in self.manifest.timestep_indices.iter().enumerate() {
            for (i, tensor) in self.tensors[pos].iter().enumerate() {
                for &v in tensor.iter() {
                    if !v.is_finite() {
                        return Err(TraceError::NonFinite {
                            timestep: t,
                            layer: i,
                        });
                    }
                    if self.manifest.dtype == Dtype::F32 && (v as f32) as f64 != v {
                        return Err(TraceError::NotRepresentable {
                            timestep: t,
                            layer: i,
                            dtype: Dtype::F32,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Restricts the trace to a subset of its timestep labels, keeping the
    /// original labels in the result.
    pub fn restrict(&self, labels: &[usize]) -> Result<ActivationTrace, TraceError> {
        if labels.is_empty() {
            return Err(TraceError::Manifest(
                "restriction needs at least one timestep".into(),
            ));
        }
        if !labels.windows(2).all(|w| w[0] < w[1]) {
            return Err(TraceError::Manifest(
                "restriction labels must be strictly increasing".into(),
            ));
        }
        let mut tensors = Vec::with_capacity(labels.len());
        for &t in labels {
            let pos = self
                .manifest
                .timestep_indices
                .binary_search(&t)
                .map_err(|_| TraceError::UnknownTimestep(t))?;
            tensors.push(self.tensors[pos].clone());
        }
        let mut manifest = self.manifest.clone();
        manifest.timestep_indices = labels.to_vec();
        Ok(ActivationTrace { manifest, tensors })
    }
}

/// Maps an i/o failure to the path it happened on.
fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest.json` and `trace.bin` into `dir`, creating it if
/// needed. Fails without touching the payload if any value breaks the
/// trace invariants.
pub fn write_trace(trace: &ActivationTrace, dir: &Path) -> Result<(), TraceError> {
    trace.validate_values()?;
    fs::create_dir_all(dir).map_err(io_at(dir))?;

    let mut manifest_json = serde_json::to_string_pretty(&trace.manifest)
        .map_err(|e| TraceError::Manifest(e.to_string()))?;
    manifest_json.push('\n');
    let manifest_path = dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, manifest_json.as_bytes()).map_err(io_at(&manifest_path))?;

    let manifest = &trace.manifest;
    let mut buf = Vec::with_capacity(HEADER_LEN + manifest.payload_len());
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&TRACE_FORMAT_VERSION.to_le_bytes());
    buf.push(manifest.dtype.tag());
    for pos in 0..manifest.timestep_indices.len() {
        for tensor in &trace.tensors[pos] {
            for &v in tensor.iter() {
                match manifest.dtype {
                    Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    write_atomic(&payload_path, &buf).map_err(io_at(&payload_path))?;
    Ok(())
}

/// Reads a trace directory written by [`write_trace`] (or an external
/// dumper following the same format) and re-validates everything.
pub fn read_trace(dir: &Path) -> Result<ActivationTrace, TraceError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(io_at(&manifest_path))?;
    let manifest: TraceManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| TraceError::Manifest(e.to_string()))?;
    manifest.validate()?;

    let payload_path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&payload_path).map_err(io_at(&payload_path))?;
    let expected = HEADER_LEN + manifest.payload_len();
    if bytes.len() < HEADER_LEN {
        return Err(TraceError::PayloadLength {
            expected,
            found: bytes.len(),
        });
    }
    if &bytes[0..8] != TRACE_MAGIC {
        return Err(TraceError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != TRACE_FORMAT_VERSION {
        return Err(TraceError::VersionMismatch { found: version });
    }
    let tag = bytes[10];
    match Dtype::from_tag(tag) {
        Some(d) if d == manifest.dtype => {}
        _ => {
            return Err(TraceError::DtypeTag {
                tag,
                manifest: manifest.dtype,
            })
        }
    }
    if bytes.len() != expected {
        return Err(TraceError::PayloadLength {
            expected,
            found: bytes.len(),
        });
    }

    let width = manifest.dtype.size_bytes();
    let mut offset = HEADER_LEN;
    let mut tensors = Vec::with_capacity(manifest.timestep_indices.len());
    for &t in &manifest.timestep_indices {
        let mut row = Vec::with_capacity(manifest.num_layers);
        for (i, layer) in manifest.layers.iter().enumerate() {
            let count = manifest.num_samples * layer.feature_dim;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let v = match manifest.dtype {
                    Dtype::F32 => {
                        let mut b = [0u8; 4];
                        b.copy_from_slice(&bytes[offset..offset + 4]);
                        f32::from_le_bytes(b) as f64
                    }
                    Dtype::F64 => {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(&bytes[offset..offset + 8]);
                        f64::from_le_bytes(b)
                    }
                };
                offset += width;
                if !v.is_finite() {
                    return Err(TraceError::NonFinite {
                        timestep: t,
                        layer: i,
                    });
                }
                data.push(v);
            }
            let tensor = Array2::from_shape_vec((manifest.num_samples, layer.feature_dim), data)
                .expect("shape matches element count by construction");
            row.push(tensor);
        }
        tensors.push(row);
    }
    Ok(ActivationTrace { manifest, tensors })
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("incomplete trace: missing tensor for timestep {timestep}, layer {layer}")]
    Incomplete { timestep: usize, layer: usize },
    #[error("unexpected tensor at timestep {timestep}, layer {layer}")]
    Unexpected { timestep: usize, layer: usize },
    #[error("shape mismatch at timestep {timestep}, layer {layer}: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    ShapeMismatch {
        timestep: usize,
        layer: usize,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value at timestep {timestep}, layer {layer}")]
    NonFinite { timestep: usize, layer: usize },
    #[error("value at timestep {timestep}, layer {layer} is not exactly representable as {dtype}")]
    NotRepresentable {
        timestep: usize,
        layer: usize,
        dtype: Dtype,
    },
    #[error("bad magic bytes (expected \"MPQTRACE\")")]
    BadMagic,
    #[error("unsupported trace format version {found} (this build reads version {TRACE_FORMAT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("payload dtype tag {tag} does not match manifest dtype {manifest}")]
    DtypeTag { tag: u8, manifest: Dtype },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("timestep {0} is not present in the trace")]
    UnknownTimestep(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: usize, name: &str, dim: usize) -> LayerMeta {
        LayerMeta {
            layer_id: id,
            name: name.to_string(),
            param_count: 10 * (id as u64 + 1),
            feature_dim: dim,
            pinned_bits: None,
        }
    }

    fn small_manifest(dtype: Dtype) -> TraceManifest {
        TraceManifest {
            model_name: "toy".into(),
            num_layers: 2,
            num_timesteps: 3,
            num_samples: 2,
            dtype,
            seed: Some(7),
            timestep_indices: vec![0, 1, 2],
            layers: vec![meta(0, "enc", 2), meta(1, "head", 1)],
        }
    }

    fn small_trace(dtype: Dtype) -> ActivationTrace {
        let manifest = small_manifest(dtype);
        let mut map = BTreeMap::new();
        for t in 0..3usize {
            let base = t as f64;
            map.insert(
                (t, 0usize),
                Array2::from_shape_vec((2, 2), vec![base, 1.5, -2.0, base + 0.25]).unwrap(),
            );
            map.insert(
                (t, 1usize),
                Array2::from_shape_vec((2, 1), vec![base - 1.0, 0.5]).unwrap(),
            );
        }
        ActivationTrace::from_map(manifest, map).unwrap()
    }

    #[test]
    fn round_trip_f64_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace(Dtype::F64);
        write_trace(&trace, dir.path()).unwrap();
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn round_trip_f32_is_lossless_for_representable_values() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace(Dtype::F32);
        write_trace(&trace, dir.path()).unwrap();
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn payload_length_matches_manifest_formula() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace(Dtype::F32);
        write_trace(&trace, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(PAYLOAD_FILE)).unwrap();
        // 3 timesteps * (2*2 + 2*1 values) * 4 bytes + 11-byte header.
        assert_eq!(trace.manifest().payload_len(), 3 * 6 * 4);
        assert_eq!(bytes.len(), 11 + 3 * 6 * 4);
    }

    #[test]
    fn f32_write_rejects_unrepresentable_values() {
        let manifest = TraceManifest {
            num_layers: 1,
            num_timesteps: 1,
            num_samples: 1,
            timestep_indices: vec![0],
            layers: vec![meta(0, "enc", 1)],
            ..small_manifest(Dtype::F32)
        };
        let mut map = BTreeMap::new();
        map.insert((0usize, 0usize), Array2::from_elem((1, 1), 0.1f64));
        let trace = ActivationTrace::from_map(manifest, map).unwrap();
        let dir = tempfile::tempdir().unwrap();
        match write_trace(&trace, dir.path()) {
            Err(TraceError::NotRepresentable {
                timestep: 0,
                layer: 0,
                dtype: Dtype::F32,
            }) => {}
            other => panic!("expected NotRepresentable, got {other:?}"),
        }
    }

    #[test]
    fn nan_write_is_rejected_naming_position() {
        let manifest = small_manifest(Dtype::F64);
        let mut map = BTreeMap::new();
        for t in 0..3usize {
            let mut a = Array2::from_elem((2, 2), 1.0f64);
            if t == 1 {
                a[[0, 1]] = f64::NAN;
            }
            map.insert((t, 0usize), a);
            map.insert((t, 1usize), Array2::from_elem((2, 1), 2.0f64));
        }
        let trace = ActivationTrace::from_map(manifest, map).unwrap();
        let dir = tempfile::tempdir().unwrap();
        match write_trace(&trace, dir.path()) {
            Err(TraceError::NonFinite {
                timestep: 1,
                layer: 0,
            }) => {}
            other => panic!("expected NonFinite at (1, 0), got {other:?}"),
        }
        // Nothing was written.
        assert!(!dir.path().join(PAYLOAD_FILE).exists());
    }

    #[test]
    fn empty_map_reports_incomplete_trace() {
        let manifest = TraceManifest {
            num_layers: 1,
            num_timesteps: 1,
            num_samples: 1,
            timestep_indices: vec![0],
            layers: vec![meta(0, "enc", 1)],
            ..small_manifest(Dtype::F64)
        };
        match ActivationTrace::from_map(manifest, BTreeMap::new()) {
            Err(TraceError::Incomplete {
                timestep: 0,
                layer: 0,
            }) => {}
            other => panic!("expected Incomplete, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected_with_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace(Dtype::F64);
        write_trace(&trace, dir.path()).unwrap();
        let path = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        match read_trace(dir.path()) {
            Err(TraceError::PayloadLength { expected, found }) => {
                assert_eq!(expected, 11 + 3 * 6 * 8);
                assert_eq!(found, expected - 5);
            }
            other => panic!("expected PayloadLength, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let trace = small_trace(Dtype::F64);
        write_trace(&trace, dir.path()).unwrap();
        let path = dir.path().join(PAYLOAD_FILE);
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_trace(dir.path()), Err(TraceError::BadMagic)));

        let mut bad = good.clone();
        bad[8] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_trace(dir.path()),
            Err(TraceError::VersionMismatch { found: 9 })
        ));

        let mut bad = good;
        bad[10] = 7;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_trace(dir.path()),
            Err(TraceError::DtypeTag { tag: 7, .. })
        ));
    }

    #[test]
    fn restrict_keeps_original_labels_and_tensors() {
        let trace = small_trace(Dtype::F64);
        let sub = trace.restrict(&[0, 2]).unwrap();
        assert_eq!(sub.timestep_indices(), &[0, 2]);
        assert_eq!(sub.tensor(2, 0).unwrap(), trace.tensor(2, 0).unwrap());
        assert!(matches!(
            sub.tensor(1, 0),
            Err(TraceError::UnknownTimestep(1))
        ));
        assert!(matches!(
            trace.restrict(&[0, 3]),
            Err(TraceError::UnknownTimestep(3))
        ));
    }

    #[test]
    fn shape_mismatch_names_position() {
        let manifest = small_manifest(Dtype::F64);
        let mut map = BTreeMap::new();
        for t in 0..3usize {
            map.insert((t, 0usize), Array2::from_elem((2, 2), 1.0f64));
            let dim = if t == 2 { 3 } else { 1 };
            map.insert((t, 1usize), Array2::from_elem((2, dim), 2.0f64));
        }
        match ActivationTrace::from_map(manifest, map) {
            Err(TraceError::ShapeMismatch {
                timestep: 2,
                layer: 1,
                cols: 3,
                ..
            }) => {}
            other => panic!("expected ShapeMismatch at (2, 1), got {other:?}"),
        }
    }
}
