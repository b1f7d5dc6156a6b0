//! Portable named-tensor archive.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! b"BCQT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest lists `{name, dtype, shape, offset, nbytes}` per tensor, sorted by
//! name; offsets are relative to the payload start and tensors are packed
//! contiguously in manifest order, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BCQT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
            TensorData::I64(a) => a.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    fn is_finite(&self) -> bool {
        match self {
            TensorData::F32(a) => a.iter().all(|v| v.is_finite()),
            TensorData::F64(a) => a.iter().all(|v| v.is_finite()),
            TensorData::I64(_) => true,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        // iter() walks logical row-major order regardless of memory layout
        match self {
            TensorData::F32(a) => a
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64(a) => a
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::I64(a) => a
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, shape: &[usize], bytes: &[u8]) -> Self {
        let dim = IxDyn(shape);
        match dtype {
            DType::F32 => {
                let v = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                TensorData::F32(ArrayD::from_shape_vec(dim, v).expect("validated length"))
            }
            DType::F64 => {
                let v = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                TensorData::F64(ArrayD::from_shape_vec(dim, v).expect("validated length"))
            }
            DType::I64 => {
                let v = bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                TensorData::I64(ArrayD::from_shape_vec(dim, v).expect("validated length"))
            }
        }
    }
}

impl From<ArrayD<f32>> for TensorData {
    fn from(a: ArrayD<f32>) -> Self {
        TensorData::F32(a)
    }
}

impl From<ArrayD<f64>> for TensorData {
    fn from(a: ArrayD<f64>) -> Self {
        TensorData::F64(a)
    }
}

impl From<ArrayD<i64>> for TensorData {
    fn from(a: ArrayD<i64>) -> Self {
        TensorData::I64(a)
    }
}

pub type NamedTensors = BTreeMap<String, TensorData>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn encode_archive(entries: &NamedTensors) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut manifest = Manifest {
        entries: Vec::with_capacity(entries.len()),
    };
    for (name, tensor) in entries {
        if !tensor.is_finite() {
            return Err(Error::Value(format!(
                "tensor `{name}` has non-finite values"
            )));
        }
        let offset = payload.len() as u64;
        tensor.write_le(&mut payload);
        manifest.entries.push(ManifestEntry {
            name: name.clone(),
            dtype: tensor.dtype(),
            shape: tensor.shape().to_vec(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates the header and manifest, returning the manifest and payload.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::ArchiveFormat("bad magic".into()));
        }
        return Err(Error::ArchiveCorrupt("truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::ArchiveFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::ArchiveFormat(format!(
            "unsupported version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if manifest_len > body.len() {
        return Err(Error::ArchiveCorrupt("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])
        .map_err(|e| Error::ArchiveFormat(format!("manifest: {e}")))?;
    let payload = &body[manifest_len..];

    let mut end = 0u64;
    let mut previous: Option<&str> = None;
    for e in &manifest.entries {
        if previous.is_some_and(|p| p >= e.name.as_str()) {
            return Err(Error::ArchiveFormat(format!(
                "entries not strictly sorted at `{}`",
                e.name
            )));
        }
        previous = Some(&e.name);
        let expected = e.shape.iter().product::<usize>() as u64 * e.dtype.size() as u64;
        if expected != e.nbytes {
            return Err(Error::ArchiveCorrupt(format!(
                "`{}` spans {} bytes, shape needs {expected}",
                e.name, e.nbytes
            )));
        }
        if e.offset < end {
            return Err(Error::ArchiveCorrupt(format!(
                "`{}` overlaps previous entry",
                e.name
            )));
        }
        end = e.offset + e.nbytes;
        if end > payload.len() as u64 {
            return Err(Error::ArchiveCorrupt(format!(
                "payload truncated in `{}`",
                e.name
            )));
        }
    }
    if end != payload.len() as u64 {
        return Err(Error::ArchiveCorrupt("trailing bytes after payload".into()));
    }
    Ok((manifest, payload))
}

pub fn decode_archive(bytes: &[u8]) -> Result<NamedTensors> {
    let (manifest, payload) = decode_manifest(bytes)?;
    Ok(manifest
        .entries
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let data = &payload[start..start + e.nbytes as usize];
            let t = TensorData::read_le(e.dtype, &e.shape, data);
            (e.name, t)
        })
        .collect())
}

/// Writes the archive and returns its size in bytes.
pub fn write_archive(entries: &NamedTensors, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_archive(entries)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

/// Manifest of an archive file without materialising its tensors.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_manifest(&bytes)?.0)
}
