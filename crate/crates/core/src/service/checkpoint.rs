//! Binary checkpoint: the 8-byte magic `SCNTCKPT`, a little-endian u64
//! header length, a JSON header, then raw little-endian f32 blobs in
//! tensor-name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TargetType;
use crate::features::FeatureNorm;
use crate::model::{buffer_shapes, param_shapes, ModelBundle, ModelConfig, ScannabilityNet};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"SCNTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("blob `{0}` is truncated")]
    Truncated(String),
    #[error("blob `{0}` failed its checksum")]
    Corrupted(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything but the tensors of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetMetadata {
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    pub init_scheme: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Target types in id order.
    pub type_vocabulary: Vec<String>,
    pub regression: NetMetadata,
    pub classification: Option<NetMetadata>,
    /// Free-form provenance (run config, training history).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub metadata: Metadata,
    pub tensors: Vec<TensorEntry>,
}

fn meta(net: &ScannabilityNet) -> NetMetadata {
    NetMetadata {
        config: net.config.clone(),
        norm: net.norm.clone(),
        init_scheme: net.init_scheme.clone(),
        seed: net.seed,
    }
}

fn collect<'a>(prefix: &str, net: &'a ScannabilityNet, out: &mut BTreeMap<String, &'a Tensor<f32>>) {
    for (n, t) in net.params.iter() {
        out.insert(format!("{prefix}/param/{n}"), t);
    }
    for (n, t) in net.buffers.iter() {
        out.insert(format!("{prefix}/buffer/{n}"), t);
    }
}

/// Serializes a bundle to bytes.
pub fn to_bytes(bundle: &ModelBundle, extra: serde_json::Value) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    collect("regression", &bundle.regression, &mut tensors);
    if let Some(c) = &bundle.classification {
        collect("classification", c, &mut tensors);
    }
    let mut blobs = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
            len: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        blobs.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        metadata: Metadata {
            type_vocabulary: TargetType::ALL.iter().map(|t| t.as_str().to_string()).collect(),
            regression: meta(&bundle.regression),
            classification: bundle.classification.as_ref().map(meta),
            extra,
        },
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_bytes.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&blobs);
    out
}

pub fn save_checkpoint(bundle: &ModelBundle, extra: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(bundle, extra))?;
    Ok(())
}

/// Parses the header without touching the blobs.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("header length exceeds file".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, end))
}

fn restore(prefix: &str, meta: &NetMetadata, blobs: &BTreeMap<String, Tensor<f32>>) -> Result<ScannabilityNet> {
    let mut params = ParamStore::new();
    for (name, shape) in param_shapes(&meta.config) {
        params.insert(name.clone(), take(blobs, &format!("{prefix}/param/{name}"), &shape)?);
    }
    let mut buffers = ParamStore::new();
    for (name, shape) in buffer_shapes() {
        buffers.insert(name.clone(), take(blobs, &format!("{prefix}/buffer/{name}"), &shape)?);
    }
    Ok(ScannabilityNet {
        config: meta.config.clone(),
        params,
        buffers,
        norm: meta.norm.clone(),
        init_scheme: meta.init_scheme.clone(),
        seed: meta.seed,
    })
}

fn take(blobs: &BTreeMap<String, Tensor<f32>>, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let t = blobs.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
    if t.shape() != shape {
        return Err(CheckpointError::ShapeMismatch {
            name: name.into(),
            expected: shape.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(t.clone())
}

/// Parses a checkpoint, verifying every blob's checksum and shape.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelBundle, Metadata)> {
    let (header, start) = read_header(bytes)?;
    let body = &bytes[start..];
    let mut blobs = BTreeMap::new();
    for e in &header.tensors {
        let lo = e.offset as usize;
        let hi = lo.checked_add(e.len as usize).ok_or_else(|| CheckpointError::Truncated(e.name.clone()))?;
        let raw = body.get(lo..hi).ok_or_else(|| CheckpointError::Truncated(e.name.clone()))?;
        if crc32fast::hash(raw) != e.crc32 {
            return Err(CheckpointError::Corrupted(e.name.clone()));
        }
        let numel: usize = e.shape.iter().product();
        if raw.len() != numel * 4 {
            return Err(CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                expected: e.shape.clone(),
                actual: vec![raw.len() / 4],
            });
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Header(err.to_string()))?;
        blobs.insert(e.name.clone(), t);
    }
    let md = &header.metadata;
    let mut known: Vec<String> = Vec::new();
    for (prefix, m) in [("regression", Some(&md.regression)), ("classification", md.classification.as_ref())] {
        if let Some(m) = m {
            known.extend(param_shapes(&m.config).into_iter().map(|(n, _)| format!("{prefix}/param/{n}")));
            known.extend(buffer_shapes().into_iter().map(|(n, _)| format!("{prefix}/buffer/{n}")));
        }
    }
    if let Some(extra) = blobs.keys().find(|k| !known.contains(k)) {
        return Err(CheckpointError::UnknownTensor(extra.clone()));
    }
    let regression = restore("regression", &md.regression, &blobs)?;
    let classification = md
        .classification
        .as_ref()
        .map(|m| restore("classification", m, &blobs))
        .transpose()?;
    Ok((
        ModelBundle {
            regression,
            classification,
        },
        header.metadata,
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelBundle, Metadata)> {
    from_bytes(&fs::read(path)?)
}

/// Short identifier of a checkpoint's weights: CRC-32 over the blob checksums.
pub fn model_version(header: &Header) -> String {
    let mut h = crc32fast::Hasher::new();
    for e in &header.tensors {
        h.update(&e.crc32.to_le_bytes());
    }
    format!("v{}-{:08x}", header.format_version, h.finalize())
}
