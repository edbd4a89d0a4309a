//! `FTR1` binary container: magic, `u32` rank, `u32` extents, `f64` data,
//! all little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FTR1";

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(as_u32(tensor.rank())?).to_le_bytes())?;
    for &e in tensor.shape() {
        out.write_all(&as_u32(e)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(&mut input)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut input).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn as_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} exceeds u32")))
}
