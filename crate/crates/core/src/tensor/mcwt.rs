//! The `MCWT` binary tensor format.
//!
//! Layout: magic `MCWT`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64,
//! 2 = u8), `u8` ndim, `ndim` little-endian `u64` extents, then the raw
//! little-endian row-major payload. Tensors are always written with ndim 4;
//! files with fewer dimensions are read with leading extents of 1.

use std::io::{Read, Write};

use super::{DType, Element, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCWT";
pub const VERSION: u8 = 1;

/// Appends the encoded tensor to `out`.
pub fn encode_into<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(E::DTYPE.code());
    out.push(4);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

pub fn write<E: Element, W: Write>(t: &Tensor<E>, mut w: W) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

/// A decoded tensor of whichever dtype the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn shape(&self) -> Shape {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    /// Converts a floating-point tensor to precision `T`.
    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            AnyTensor::U8(_) => Err(Error::Format("expected a float tensor, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Ok(t),
            _ => Err(Error::Format("expected a u8 tensor".into())),
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated MCWT data".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_payload<E: Element, R: Read>(r: &mut R, shape: Shape) -> Result<Tensor<E>> {
    let size = E::DTYPE.size();
    let mut bytes = vec![0u8; shape.numel() * size];
    read_exact(r, &mut bytes)?;
    let data = bytes.chunks_exact(size).map(E::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Reads one tensor from the stream.
pub fn read<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 7];
    read_exact(&mut r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad MCWT magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Version(head[4] as u32));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let ndim = head[6] as usize;
    if ndim > 4 {
        return Err(Error::Format(format!("rank {ndim} exceeds 4")));
    }
    let mut dims = [1usize; 4];
    for k in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(&mut r, &mut b)?;
        let d = u64::from_le_bytes(b);
        dims[4 - ndim + k] =
            usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?;
    }
    let shape = Shape(dims);
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_payload(&mut r, shape)?),
        DType::F64 => AnyTensor::F64(read_payload(&mut r, shape)?),
        DType::U8 => AnyTensor::U8(read_payload(&mut r, shape)?),
    })
}

pub fn save<E: Element>(t: &Tensor<E>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    read(bytes.as_slice())
}
