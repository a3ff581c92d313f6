//! Checkpoint file format.
//!
//! Byte layout (little-endian throughout):
//!   magic  b"NUSG"
//!   version u32 (currently 1)
//!   count   u32
//!   then per entry:
//!     name_len u16, name bytes (UTF-8),
//!     dtype u8 (0 = 32-bit float),
//!     rank u8, dims rank × u32,
//!     values: product(dims) × f32
//!
//! Every store entry is serialized in enumeration order — learnable
//! parameters and batch-norm running statistics alike — so a load
//! reproduces forward outputs bit for bit.

use crate::{Error, Result};
use nusg_core::params::ParamStore;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NUSG";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("name too long: {}", p.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': unsupported dtype code {dtype}"
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, encode(store)?).map_err(Error::io(path))
}

/// Load a checkpoint into an existing store, requiring an exact match of
/// names and shapes; the error names the first offending tensor.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let entries = decode(&bytes)?;
    let mut by_name: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for (i, (name, _, _)) in entries.iter().enumerate() {
        by_name.insert(name, i);
    }
    let expected: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    for (name, shape) in &expected {
        let Some(&i) = by_name.get(name.as_str()) else {
            return Err(Error::Checkpoint(format!(
                "model tensor '{name}' missing from checkpoint (arch mismatch?)"
            )));
        };
        let (_, got_shape, _) = &entries[i];
        if got_shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': checkpoint shape {got_shape:?} vs model {shape:?}"
            )));
        }
    }
    if entries.len() != expected.len() {
        let known: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((name, _, _)) = entries.iter().find(|(n, _, _)| !known.contains(n.as_str())) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor '{name}' not present in model (arch mismatch?)"
            )));
        }
    }
    for (name, _, data) in &entries {
        store
            .set_values(name, data)
            .map_err(|e| Error::Checkpoint(format!("{e}")))?;
    }
    Ok(())
}
