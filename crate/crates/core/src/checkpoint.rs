//! Model checkpoints: `VNET1`, a little-endian u32 manifest length, a JSON
//! manifest (architecture, input size, dtype, tensor names and shapes), then
//! every state tensor's raw little-endian values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{ArchitectureSpec, Model};
use crate::tensor::{DType, Element, Shape};

pub const MAGIC: &[u8; 5] = b"VNET1";
const FORMAT: &str = "vnet1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: DType,
    pub spec: ArchitectureSpec,
    pub input: [usize; 3],
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * self.dtype.size_of()
    }
}

pub fn manifest_of<T: Element>(model: &Model<T>) -> CheckpointManifest {
    CheckpointManifest {
        format: FORMAT.into(),
        dtype: T::DTYPE,
        spec: model.spec().clone(),
        input: model.input_spatial(),
        seed: model.seed(),
        tensors: model
            .state_names()
            .into_iter()
            .zip(model.state_tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().dims(),
            })
            .collect(),
    }
}

pub fn encode<T: Element>(model: &Model<T>) -> Vec<u8> {
    let manifest = serde_json::to_vec(&manifest_of(model)).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest.len() + model.param_count() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.state_tensors() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Splits a checkpoint into its manifest and payload bytes.
pub fn decode_manifest(bytes: &[u8]) -> std::result::Result<(CheckpointManifest, &[u8]), FormatError> {
    let head = MAGIC.len() + 4;
    if bytes.len() < head {
        return Err(FormatError::Truncated {
            needed: head,
            available: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: bytes[..MAGIC.len()].iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }).collect(),
        });
    }
    let len = u32::from_le_bytes(bytes[MAGIC.len()..head].try_into().unwrap()) as usize;
    if bytes.len() < head + len {
        return Err(FormatError::Truncated {
            needed: head + len,
            available: bytes.len(),
        });
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[head..head + len]).map_err(|e| FormatError::Header(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(FormatError::Header(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let payload = &bytes[head + len..];
    let needed = manifest.payload_len();
    if payload.len() != needed {
        if payload.len() < needed {
            return Err(FormatError::Truncated {
                needed: head + len + needed,
                available: bytes.len(),
            });
        }
        return Err(FormatError::Header(format!("{} trailing bytes after tensor data", payload.len() - needed)));
    }
    Ok((manifest, payload))
}

/// Rebuilds the model and overwrites its state from the payload, reading
/// stored values of type `S` and converting them to `T`.
fn rebuild<S: Element, T: Element>(manifest: &CheckpointManifest, payload: &[u8]) -> Result<Model<T>> {
    let mut model = Model::<T>::build(&manifest.spec, manifest.input, manifest.seed)?;
    let names = model.state_names();
    if names.len() != manifest.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, architecture {:?} has {}",
            manifest.tensors.len(),
            manifest.spec.name,
            names.len()
        )));
    }
    let size = S::DTYPE.size_of();
    let mut offset = 0;
    for ((entry, name), t) in manifest.tensors.iter().zip(&names).zip(model.state_tensors_mut()) {
        if entry.name != *name || Shape::from_dims(entry.shape) != t.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = T::from_f64(S::read_le(&payload[offset..offset + size]).as_f64());
            offset += size;
        }
    }
    Ok(model)
}

/// Decodes a checkpoint whose stored dtype must be `T`.
pub fn decode<T: Element>(bytes: &[u8], origin: &Path) -> Result<Model<T>> {
    let (manifest, payload) = decode_manifest(bytes).map_err(|e| Error::format(origin, e))?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "{} stores {} parameters, requested {}",
            origin.display(),
            manifest.dtype,
            T::DTYPE
        )));
    }
    rebuild::<T, T>(&manifest, payload)
}

/// Decodes a checkpoint of either dtype, converting values to `T`.
pub fn decode_converted<T: Element>(bytes: &[u8], origin: &Path) -> Result<Model<T>> {
    let (manifest, payload) = decode_manifest(bytes).map_err(|e| Error::format(origin, e))?;
    match manifest.dtype {
        DType::F32 => rebuild::<f32, T>(&manifest, payload),
        DType::F64 => rebuild::<f64, T>(&manifest, payload),
    }
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("vnet.tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn load_converted<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_converted(&bytes, path)
}

/// Reads only the manifest (dtype, architecture, input size).
pub fn peek(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_manifest(&bytes).map(|(m, _)| m).map_err(|e| Error::format(path, e))
}
