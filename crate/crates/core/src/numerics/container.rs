//! The `LGLO1` weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LGLO1"                      5-byte magic
//! u32                          entry count
//! per entry:
//!   u32 + UTF-8 bytes          name
//!   u8                         dtype code (0 = f32, 1 = f64, 2 = u8)
//!   u32                        rank
//!   u64 × rank                 extents
//!   u64                        byte offset into the payload region
//! payloads                     raw little-endian values, in table order
//! ```
//!
//! Float tensors become parameters; `u8` entries carry metadata (for example
//! the model config under `meta/config`).

use std::fs;
use std::path::Path;

use super::element::{DType, Element};
use super::store::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"LGLO1";

struct Entry<'a> {
    name: &'a str,
    dtype: DType,
    shape: Vec<usize>,
}

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offsets = Vec::new();
    for (name, t) in store.iter() {
        offsets.push(payload.len() as u64);
        t.data().iter().for_each(|&v| v.write_le(&mut payload));
        entries.push(Entry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
        });
    }
    for (name, bytes) in store.meta_entries() {
        offsets.push(payload.len() as u64);
        payload.extend_from_slice(bytes);
        entries.push(Entry {
            name,
            dtype: DType::U8,
            shape: vec![bytes.len()],
        });
    }

    let mut out = Vec::with_capacity(payload.len() + 64 * entries.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (e, off) in entries.iter().zip(offsets) {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.code());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&off.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic, expected LGLO1".into()));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, dtype, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut store = ParamStore::new();
    for (name, dtype, shape, offset) in table {
        let len = shape.iter().product::<usize>() * dtype.size();
        let raw = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Format(format!("payload of `{name}` out of bounds")))?;
        match dtype {
            DType::U8 => store.set_meta(name, raw.to_vec()),
            DType::F32 => {
                let vals: Vec<f64> = raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect();
                store.insert(name, Tensor::from_f64(shape, &vals)?);
            }
            DType::F64 => {
                let vals: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
                store.insert(name, Tensor::from_f64(shape, &vals)?);
            }
        }
    }
    Ok(store)
}

pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}
