//! SSMW binary weight files.
//!
//! Layout (little-endian): magic `SSMW`, version `u32`, tensor count `u32`, then per
//! tensor: name length `u16`, UTF-8 name, role `u8`, dtype `u8`, ndim `u8`, dims `u32`
//! each, raw elements. A CRC32 of all preceding bytes closes the file.

use std::fs;
use std::path::Path;

use super::weights::{NetworkWeights, Role, WeightEntry, FORMAT_VERSION};
use crate::error::{FormatError, Result};
use crate::tensor::{AnyTensor, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SSMW";

pub fn encode(weights: &NetworkWeights) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(weights.len()).map_err(|_| FormatError::Invalid("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in weights.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| FormatError::Invalid(format!("name `{}` longer than 65535 bytes", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.role.code());
        out.push(e.tensor.dtype().code());
        let shape = e.tensor.shape();
        let ndim = u8::try_from(shape.len()).map_err(|_| FormatError::Invalid("rank above 255".into()))?;
        out.push(ndim);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| FormatError::Invalid("dimension above u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.tensor {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensor<T: Element>(r: &mut Reader<'_>, shape: &[usize]) -> Result<Tensor<T>, FormatError> {
    let numel: usize = shape.iter().product();
    let width = T::DTYPE.size();
    let raw = r.take(numel.checked_mul(width).ok_or_else(|| FormatError::Invalid("tensor too large".into()))?)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<NetworkWeights, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnknownVersion(version));
    }
    if bytes.len() < 16 {
        return Err(FormatError::Truncated {
            offset: 8,
            needed: 8,
            available: bytes.len() - 8,
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let role_code = r.u8()?;
        let role = Role::from_code(role_code).ok_or_else(|| FormatError::Invalid(format!("role code {role_code}")))?;
        let dtype_code = r.u8()?;
        let dtype =
            DType::from_code(dtype_code).ok_or_else(|| FormatError::Invalid(format!("dtype code {dtype_code}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let tensor: AnyTensor = match dtype {
            DType::F32 => read_tensor::<f32>(&mut r, &shape)?.into(),
            DType::F64 => read_tensor::<f64>(&mut r, &shape)?.into(),
        };
        if !tensor.is_finite() {
            return Err(FormatError::NonFinitePayload { name });
        }
        entries.push(WeightEntry { name, role, tensor });
    }
    if r.pos != body_end {
        return Err(FormatError::Invalid(format!(
            "{} unexpected bytes after the last tensor",
            body_end - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    NetworkWeights::from_entries(entries).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(weights)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}
