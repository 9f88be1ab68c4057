//! `VGT1` tensor snapshots: magic, u32 rank, u32 dims, f32 payload, all
//! little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"VGT1";

pub fn write_snapshot<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        let v = v.to_f32().unwrap_or(f32::NAN);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format {
            format: "VGT1",
            reason: format!("bad magic {magic:?}"),
        });
    }
    let rank = read_u32(&mut input)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format {
            format: "VGT1",
            reason: format!("unsupported rank {rank}"),
        });
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).unwrap())
        .collect();
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
