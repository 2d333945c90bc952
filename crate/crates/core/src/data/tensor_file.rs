//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | field    | size            |
//! |----------|-----------------|
//! | magic    | 4 bytes `LPTN`  |
//! | version  | u32             |
//! | dtype    | u8 (1 f32, 2 f64) |
//! | rank     | u32             |
//! | extents  | rank × u64      |
//! | payload  | numel × dtype size |

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Float, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"LPTN";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<T: Float>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    encode_tensor_body(&mut buf, t);
    let path = path.as_ref();
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Parses a complete tensor file image.
pub fn decode_tensor<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let code = r.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("file holds {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let t = r.tensor_body()?;
    r.finish()?;
    Ok(t)
}

/// Rank, extents and payload (no header).
pub(crate) fn encode_tensor_body<T: Float>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn tensor_body<T: Float>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format("tensor extents overflow".into()))?;
        let size = T::DTYPE.size();
        let payload = self.take(numel.checked_mul(size).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}
