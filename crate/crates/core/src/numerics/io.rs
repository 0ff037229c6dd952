//! Binary tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFQT" | version u8 | rank u8 | extents u32 × rank | dtype u8 | elements
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Tensors are held as f64 in memory, so
//! writing f32 is a lossy down-conversion.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFQT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    if hdr[0] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", hdr[0])));
    }
    let rank = hdr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match tag[0] {
        0 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from(f32::from_le_bytes(b)));
            }
        }
        1 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn tensor_to_bytes(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, dtype).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor, dtype: DType) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t, dtype))?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}
