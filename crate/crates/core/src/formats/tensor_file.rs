//! TNSR framing: `"TNSR"`, u32 version, u8 dtype, u32 rank, u64 dims[rank],
//! little-endian payload, trailing CRC32 over every preceding byte of the frame.

use std::path::Path;

use super::bytes::{read_file, write_file_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::real::{DType, Real};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

/// A tensor read from disk in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    F64 { dims: Vec<usize>, data: Vec<f64> },
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32 { dims, .. } | AnyTensor::F64 { dims, .. } => dims,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            AnyTensor::F32 { data, .. } => data.iter().map(|&v| v as f64).collect(),
            AnyTensor::F64 { data, .. } => data.clone(),
        }
    }

    pub fn into_real<T: Real>(self) -> Vec<T> {
        match self {
            AnyTensor::F32 { data, .. } => data.into_iter().map(|v| T::lit(v as f64)).collect(),
            AnyTensor::F64 { data, .. } => data.into_iter().map(T::lit).collect(),
        }
    }
}

pub fn write_tensor<T: Real>(w: &mut ByteWriter, dims: &[usize], data: &[T]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let start = w.len();
    w.bytes(TENSOR_MAGIC);
    w.u32(TENSOR_VERSION);
    w.u8(T::DTYPE.code());
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u64(d as u64);
    }
    for &v in data {
        v.to_le(&mut w.buf);
    }
    let crc = crc32fast::hash(&w.buf[start..]);
    w.u32(crc);
}

pub fn read_tensor(r: &mut ByteReader<'_>) -> Result<AnyTensor> {
    let start = r.position();
    r.expect_magic(TENSOR_MAGIC)?;
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            path: r.path().to_path_buf(),
            found: version,
            supported: TENSOR_VERSION,
        });
    }
    let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.malformed("unknown dtype"))?;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.malformed("tensor rank above 8"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.malformed("tensor dims overflow"))?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| r.malformed("payload too large"))?;
    let payload = r.take(payload_len)?;
    let frame_end = r.position();
    let stored = r.u32()?;
    if crc32fast::hash(r.slice(start, frame_end)) != stored {
        return Err(Error::Checksum {
            path: r.path().to_path_buf(),
        });
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32 {
            dims,
            data: payload.chunks_exact(4).map(f32::from_le).collect(),
        },
        DType::F64 => AnyTensor::F64 {
            dims,
            data: payload.chunks_exact(8).map(f64::from_le).collect(),
        },
    })
}

pub fn write_tensor_file<T: Real>(path: &Path, dims: &[usize], data: &[T]) -> Result<()> {
    let mut w = ByteWriter::new();
    write_tensor(&mut w, dims, data);
    write_file_atomic(path, &w.buf)
}

pub fn read_tensor_file(path: &Path) -> Result<AnyTensor> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let t = read_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(r.malformed("trailing bytes after tensor"));
    }
    Ok(t)
}
