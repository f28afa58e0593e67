//! Binary checkpoint format.
//!
//! ```text
//! magic   b"GSRT"
//! version u32 LE
//! count   u32 LE                       number of tensors
//! repeat count times:
//!   name_len u32 LE, name (UTF-8)
//!   rank     u32 LE, dims (u64 LE × rank)
//!   payload  f64 LE × prod(dims)
//! ```

use super::params::Parameters;
use crate::error::{GecoError, Result};

pub const MAGIC: &[u8; 4] = b"GSRT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn collect_tensors<P: Parameters + ?Sized>(p: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit(&mut |name, dims, data| {
        out.push(NamedTensor { name: name.to_string(), dims: dims.to_vec(), data: data.to_vec() })
    });
    out
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| 16 + t.name.len() + 8 * (t.dims.len() + t.data.len())).sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save<P: Parameters + ?Sized>(p: &P) -> Vec<u8> {
    encode(&collect_tensors(p))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GecoError::Parse(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GecoError::Parse("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GecoError::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| GecoError::Parse(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| GecoError::Parse("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(GecoError::Parse(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Copies tensors into an already-built model of matching architecture.
pub fn load_into<P: Parameters + ?Sized>(p: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let mut expected = Vec::new();
    p.visit(&mut |name, dims, _| expected.push((name.to_string(), dims.to_vec())));
    if expected.len() != tensors.len() {
        return Err(GecoError::Shape(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, dims), t) in expected.iter().zip(tensors) {
        if *name != t.name || *dims != t.dims {
            return Err(GecoError::Shape(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {dims:?}",
                t.name, t.dims
            )));
        }
    }
    let mut i = 0;
    p.visit_mut(&mut |_, data| {
        data.copy_from_slice(&tensors[i].data);
        i += 1;
    });
    Ok(())
}

pub fn load<P: Parameters + ?Sized>(p: &mut P, bytes: &[u8]) -> Result<()> {
    load_into(p, &decode(bytes)?)
}
