//! Single-volume files: a NIfTI-1 subset (`.nii`, int16 or float32, no
//! extensions, little-endian) and a minimal raw container (`VRAW`).
//!
//! The W axis is NIfTI's fastest `dim[1]`, H is `dim[2]`, D is `dim[3]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result};
use crate::tensor::{Shape, Tensor};

pub const NIFTI_HEADER_LEN: usize = 348;
/// Header plus the 4-byte extension flag.
pub const NIFTI_DATA_OFFSET: usize = 352;
pub const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";
pub const VRAW_MAGIC: &[u8; 4] = b"VRAW";
pub const VRAW_HEADER_LEN: usize = 20;

const NIFTI_INT16: i16 = 4;
const NIFTI_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    Int16,
    Float32,
}

impl VoxelType {
    fn size(self) -> usize {
        match self {
            VoxelType::Int16 => 2,
            VoxelType::Float32 => 4,
        }
    }

    fn vraw_tag(self) -> u32 {
        match self {
            VoxelType::Int16 => 1,
            VoxelType::Float32 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Vraw,
}

impl VolumeFormat {
    /// `.vraw` files use the raw container, everything else NIfTI.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("vraw") => VolumeFormat::Vraw,
            _ => VolumeFormat::Nifti,
        }
    }
}

/// Voxel data exactly as stored (after NIfTI scaling), before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    /// (D, H, W)
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl RawVolume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimensionMismatch {
                op: "volume",
                detail: format!("{} values for dims {dims:?}", data.len()),
            });
        }
        Ok(RawVolume { dims, data })
    }

    /// As a (1, 1, D, H, W) tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::from_vec(Shape::new(1, 1, d, h, w), self.data.clone()).expect("dims checked at construction")
    }
}

/// A loaded, normalized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub label: usize,
    /// (1, 1, D, H, W), zero mean and unit variance unless constant
    pub volume: Tensor<f32>,
    pub source_path: PathBuf,
}

fn u16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn printable(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }).collect()
}

fn decode_payload(bytes: &[u8], ty: VoxelType, count: usize, slope: f32, inter: f32) -> Vec<f32> {
    // identity scaling is skipped so that -0.0 survives
    let scale = |v: f32| if slope == 1.0 && inter == 0.0 { v } else { v * slope + inter };
    match ty {
        VoxelType::Float32 => bytes[..count * 4]
            .chunks_exact(4)
            .map(|c| scale(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        VoxelType::Int16 => bytes[..count * 2]
            .chunks_exact(2)
            .map(|c| scale(i16::from_le_bytes([c[0], c[1]]) as f32))
            .collect(),
    }
}

/// Decodes a NIfTI-1 single-file image from memory.
pub fn decode_nifti(bytes: &[u8]) -> std::result::Result<RawVolume, FormatError> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: NIFTI_HEADER_LEN,
            available: bytes.len(),
        });
    }
    if &bytes[344..348] != NIFTI_MAGIC {
        return Err(FormatError::BadMagic {
            expected: printable(NIFTI_MAGIC),
            found: printable(&bytes[344..348]),
        });
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        return Err(FormatError::Header(format!(
            "sizeof_hdr is {sizeof_hdr} (only little-endian NIfTI-1 is supported)"
        )));
    }
    let ndim = u16_at(bytes, 40);
    let dim: Vec<i64> = (1..8).map(|i| u16_at(bytes, 40 + 2 * i) as i64).collect();
    if !(3..=4).contains(&ndim) || (ndim == 4 && dim[3] != 1) {
        return Err(FormatError::Header(format!("expected a 3-D volume, dim = {ndim} {:?}", &dim[..ndim.max(0) as usize])));
    }
    if dim[..3].iter().any(|&v| v < 1) {
        return Err(FormatError::Header(format!("non-positive dims {:?}", &dim[..3])));
    }
    let ty = match u16_at(bytes, 70) {
        NIFTI_INT16 => VoxelType::Int16,
        NIFTI_FLOAT32 => VoxelType::Float32,
        other => return Err(FormatError::UnsupportedDatatype(other as i64)),
    };
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= NIFTI_HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(FormatError::Header(format!("invalid vox_offset {vox_offset}")));
    }
    let (mut slope, mut inter) = (f32_at(bytes, 112), f32_at(bytes, 116));
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    if !inter.is_finite() {
        inter = 0.0;
    }
    let (w, h, d) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let count = w * h * d;
    let start = vox_offset as usize;
    let needed = start + count * ty.size();
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(RawVolume {
        dims: [d, h, w],
        data: decode_payload(&bytes[start..], ty, count, slope, inter),
    })
}

/// Encodes a float32 NIfTI-1 image with 1 mm isotropic voxels.
pub fn encode_nifti(vol: &RawVolume) -> Vec<u8> {
    encode_nifti_typed(vol, VoxelType::Float32)
}

/// Encodes with the given voxel type; int16 values are rounded and clamped.
pub fn encode_nifti_typed(vol: &RawVolume, ty: VoxelType) -> Vec<u8> {
    let [d, h, w] = vol.dims;
    let mut out = vec![0u8; NIFTI_DATA_OFFSET];
    out[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    let dims: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dims.iter().enumerate() {
        out[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_le_bytes());
    }
    let (code, bitpix) = match ty {
        VoxelType::Int16 => (NIFTI_INT16, 16i16),
        VoxelType::Float32 => (NIFTI_FLOAT32, 32i16),
    };
    out[70..72].copy_from_slice(&code.to_le_bytes());
    out[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        out[76 + 4 * i..80 + 4 * i].copy_from_slice(&v.to_le_bytes());
    }
    out[108..112].copy_from_slice(&(NIFTI_DATA_OFFSET as f32).to_le_bytes());
    out[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    out[123] = 10; // xyzt_units: mm, seconds
    out[344..348].copy_from_slice(NIFTI_MAGIC);
    out.reserve(vol.data.len() * ty.size());
    match ty {
        VoxelType::Float32 => {
            for v in &vol.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        VoxelType::Int16 => {
            for v in &vol.data {
                let q = v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    out
}

/// Decodes a `VRAW` container: magic, u32 D, H, W, u32 dtype tag
/// (1 = int16, 2 = float32), then the little-endian payload.
pub fn decode_vraw(bytes: &[u8]) -> std::result::Result<RawVolume, FormatError> {
    if bytes.len() < VRAW_HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: VRAW_HEADER_LEN,
            available: bytes.len(),
        });
    }
    if &bytes[0..4] != VRAW_MAGIC {
        return Err(FormatError::BadMagic {
            expected: printable(VRAW_MAGIC),
            found: printable(&bytes[0..4]),
        });
    }
    let (d, h, w) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let ty = match u32_at(bytes, 16) {
        1 => VoxelType::Int16,
        2 => VoxelType::Float32,
        other => return Err(FormatError::UnsupportedDatatype(other as i64)),
    };
    let count = d * h * w;
    let needed = VRAW_HEADER_LEN + count * ty.size();
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(RawVolume {
        dims: [d, h, w],
        data: decode_payload(&bytes[VRAW_HEADER_LEN..], ty, count, 1.0, 0.0),
    })
}

pub fn encode_vraw(vol: &RawVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VRAW_HEADER_LEN + vol.data.len() * 4);
    out.extend_from_slice(VRAW_MAGIC);
    for v in vol.dims {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&VoxelType::Float32.vraw_tag().to_le_bytes());
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes either container: files starting with `VRAW` or named `.vraw`
/// are raw, everything else is NIfTI.
pub fn decode_volume(bytes: &[u8], hint: VolumeFormat) -> std::result::Result<RawVolume, FormatError> {
    if hint == VolumeFormat::Vraw || bytes.starts_with(VRAW_MAGIC) {
        decode_vraw(bytes)
    } else {
        decode_nifti(bytes)
    }
}

/// Reads voxel values without normalization.
pub fn read_raw_volume(path: &Path) -> Result<RawVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, VolumeFormat::from_path(path)).map_err(|e| Error::format(path, e))
}

/// Writes float32 data in the format implied by the extension.
pub fn write_volume(path: &Path, vol: &RawVolume) -> Result<()> {
    let bytes = match VolumeFormat::from_path(path) {
        VolumeFormat::Nifti => encode_nifti(vol),
        VolumeFormat::Vraw => encode_vraw(vol),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-volume z-score in f64. A constant volume maps to zeros.
pub fn normalize(data: &[f32]) -> Vec<f32> {
    if data.is_empty() {
        return Vec::new();
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return vec![0.0; data.len()];
    }
    let inv = 1.0 / var.sqrt();
    data.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

/// Reads and normalizes a volume.
pub fn read_volume(path: &Path, subject_id: &str, label: usize) -> Result<VolumeRecord> {
    let raw = read_raw_volume(path)?;
    if let Some(i) = raw.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("voxel {i} of {}", path.display())));
    }
    let [d, h, w] = raw.dims;
    Ok(VolumeRecord {
        subject_id: subject_id.to_string(),
        label,
        volume: Tensor::from_vec(Shape::new(1, 1, d, h, w), normalize(&raw.data))?,
        source_path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_normalizes_to_zero() {
        assert_eq!(normalize(&[1.0; 8]), vec![0.0; 8]);
    }

    #[test]
    fn nifti_round_trip() {
        let vol = RawVolume::new([2, 3, 4], (0..24).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        assert_eq!(decode_nifti(&encode_nifti(&vol)).unwrap(), vol);
        let q = decode_nifti(&encode_nifti_typed(&vol, VoxelType::Int16)).unwrap();
        assert_eq!(q.data[0], -3.0);
    }

    #[test]
    fn vraw_round_trip() {
        let vol = RawVolume::new([1, 2, 3], vec![1.5, -2.0, 0.0, 7.0, 3.25, 1e-3]).unwrap();
        assert_eq!(decode_vraw(&encode_vraw(&vol)).unwrap(), vol);
    }

    #[test]
    fn distinct_format_errors() {
        let vol = RawVolume::new([2, 2, 2], vec![1.0; 8]).unwrap();
        let mut bytes = encode_nifti(&vol);
        bytes[344] = b'x';
        assert!(matches!(decode_nifti(&bytes), Err(FormatError::BadMagic { .. })));
        let mut bytes = encode_nifti(&vol);
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert_eq!(decode_nifti(&bytes), Err(FormatError::UnsupportedDatatype(64)));
        let bytes = encode_nifti(&vol);
        assert!(matches!(
            decode_nifti(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
    }
}
