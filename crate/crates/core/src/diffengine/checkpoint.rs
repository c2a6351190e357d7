//! Binary parameter checkpoints.
//!
//! Layout: magic `SGWT`, version `u16`, then until end of file one record per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, `rank` dims as `u32`,
//! and the values as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGWT";
pub const VERSION: u16 = 1;

pub fn encode(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {}", p.name)))?;
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| Error::Format(format!("rank too large for '{}'", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in p.value.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension overflows u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes every record into a fresh store (optimizer state zeroed).
pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParameterStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(&name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    decode(&fs::read(path)?)
}

/// Copies checkpoint values into `target`, requiring identical names and shapes.
pub fn restore_into(target: &mut ParameterStore, loaded: &ParameterStore) -> Result<()> {
    if target.names() != loaded.names() {
        return Err(Error::Format(format!(
            "checkpoint parameters {:?} do not match model {:?}",
            loaded.names(),
            target.names()
        )));
    }
    for p in loaded.iter() {
        target
            .set(&p.name, p.value.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}
