//! NTF v1: `NTF1`, u32 LE rank, rank × u32 LE extents, u8 dtype tag
//! (0 = f32, 1 = f64), then raw LE scalars in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NTF1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at, "truncated header"))
}

/// Decode into `T`, converting when the stored dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "missing NTF1 magic"));
    }
    let rank = read_u32(bytes, 4)? as usize;
    if rank == 0 {
        return Err(Error::format(4, "rank must be at least 1"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 8 + 4 * i;
        let e = read_u32(bytes, at)? as usize;
        if e == 0 {
            return Err(Error::format(at, "zero extent"));
        }
        shape.push(e);
    }
    let tag_at = 8 + 4 * rank;
    let tag = *bytes
        .get(tag_at)
        .ok_or_else(|| Error::format(tag_at, "missing dtype tag"))?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(tag_at, format!("unknown dtype tag {tag}")))?;
    let n: usize = shape.iter().product();
    let body = tag_at + 1;
    let expect = body + n * dtype.size();
    if bytes.len() != expect {
        return Err(Error::format(
            bytes.len().min(expect),
            format!("payload holds {} bytes, shape {shape:?} needs {}", bytes.len() - body.min(bytes.len()), n * dtype.size()),
        ));
    }
    let payload = &bytes[body..];
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|b| T::c(f32::read_le(b) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|b| T::c(f64::read_le(b))).collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| Error::format(body, e.to_string()))?;
    if !t.is_finite() {
        return Err(Error::format(body, "non-finite scalar in payload"));
    }
    Ok(t)
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}
