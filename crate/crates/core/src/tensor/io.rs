//! Binary tensor format, little-endian:
//! `"FTNSR1" | dtype u8 | rank u8 | rank × u64 extents | row-major payload`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{check_shape, DType, Result, Scalar, Tensor, TensorError, MAX_RANK};

pub const MAGIC: &[u8; 6] = b"FTNSR1";

/// A tensor read from disk whose element type is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + t.len() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads exactly `n` bytes, reporting how many were available on a short read.
fn read_exact_counted<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n.min(1 << 26));
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(TensorError::Truncated {
            expected: n,
            actual: buf.len(),
        });
    }
    Ok(buf)
}

pub fn read_any<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let head = read_exact_counted(r, MAGIC.len())?;
    if head.as_slice() != MAGIC {
        return Err(TensorError::BadMagic { found: head });
    }
    let meta = read_exact_counted(r, 2)?;
    let dtype = DType::from_code(meta[0])?;
    let rank = meta[1] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::InvalidShape {
            shape: vec![],
            reason: format!("rank {rank} out of range"),
        });
    }
    let extents = read_exact_counted(r, 8 * rank)?;
    let shape: Vec<usize> = extents
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len = check_shape(&shape)?;
    let payload = read_exact_counted(r, len * dtype.size())?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(&shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode(&shape, &payload)?),
    })
}

fn decode<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(shape, data)
}

/// Reads a tensor and requires its dtype to be `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let any = read_any(r)?;
    let found = any.dtype();
    let boxed: Box<dyn std::any::Any> = match any {
        AnyTensor::F32(t) => Box::new(t),
        AnyTensor::F64(t) => Box::new(t),
    };
    boxed
        .downcast::<Tensor<T>>()
        .map(|b| *b)
        .map_err(|_| TensorError::DtypeMismatch {
            expected: T::DTYPE,
            found,
        })
}

pub fn write_tensor_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_any(&mut r)
}
