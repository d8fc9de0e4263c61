//! Binary tensor container shared by checkpoints and feature dumps.
//!
//! Layout (little endian): magic `QGN1`, `u32` version, `u32` JSON length,
//! JSON header bytes, then the `f32` payload to the end of the file.

use std::path::Path;

use super::{Encoder, EncoderArch, Real};
use crate::io::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QGN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: Vec<u8>,
    pub data: Vec<f32>,
}

pub fn tensor_file_bytes(header: &[u8], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_tensor_file(path: &Path, header: &[u8], data: &[f32]) -> Result<()> {
    write_atomic(path, &tensor_file_bytes(header, data))
}

pub fn parse_tensor_file(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing QGN1 magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let payload = &bytes[12 + len..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(TensorFile { header: body.to_vec(), data })
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensor_file(&bytes, path)
}

impl<T: Real> Encoder<T> {
    /// Architecture JSON followed by the parameters as `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(self.arch()).expect("architecture serialises");
        let data: Vec<f32> = self.params().iter().map(|v| v.to_f32().expect("finite")).collect();
        tensor_file_bytes(&header, &data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let arch: EncoderArch = serde_json::from_slice(&file.header)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: format!("architecture: {e}") })?;
        let params = file.data.iter().map(|&v| T::from(v).expect("finite")).collect();
        Self::from_params(arch, params).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }
}
