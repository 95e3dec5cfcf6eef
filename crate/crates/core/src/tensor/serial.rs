//! Little-endian checkpoint format:
//!
//! ```text
//! "WVT1" | dtype u8 (0 = f32, 1 = f64) | rank u8 | rank x dim u32 | values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{input_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"WVT1";

/// A tensor read back without knowing its dtype in advance.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[T::DTYPE.code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match T::DTYPE {
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(v.f64() as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(mut r: R) -> Result<AnyTensor> {
    let io = |e| Error::io("<stream>", e);
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != MAGIC {
        return Err(input_err!("bad tensor magic {:?}", &head[..4]));
    }
    let dtype =
        DType::from_code(head[4]).ok_or_else(|| input_err!("unknown dtype code {}", head[4]))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n = numel(&shape);
    Ok(match dtype {
        DType::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(io)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::new(shape, data)?)
        }
        DType::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(io)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::new(shape, data)?)
        }
    })
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor_to(t, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(BufReader::new(f)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
