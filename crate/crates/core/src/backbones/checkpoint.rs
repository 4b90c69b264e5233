//! Flat binary checkpoints.
//!
//! Layout: the magic `BANET1`, then one record per registry entry in
//! registration order: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! extents, then the values as `f32`. Every integer and float is
//! little-endian. Records run to end of file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 6] = b"BANET1";

pub fn encode<T: Float>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save<T: Float>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(store))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, detail: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

/// Named tensors as stored, in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(r.bad("missing BANET1 magic".into()));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.bad("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("extent"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies stored values into `store`, requiring identical names, order and shapes.
pub fn restore<T: Float>(
    store: &mut ParamStore<T>,
    stored: &[(String, Tensor<f32>)],
) -> Result<()> {
    for (i, entry) in store.entries().iter().enumerate() {
        let Some((name, t)) = stored.get(i) else {
            return Err(Error::CheckpointMismatch {
                name: entry.name.clone(),
                detail: "missing from checkpoint".into(),
            });
        };
        if *name != entry.name {
            return Err(Error::CheckpointMismatch {
                name: entry.name.clone(),
                detail: format!("checkpoint holds `{name}` at position {i}"),
            });
        }
        if t.shape() != entry.value.shape() {
            return Err(Error::CheckpointMismatch {
                name: entry.name.clone(),
                detail: format!(
                    "shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    entry.value.shape()
                ),
            });
        }
    }
    if let Some((name, _)) = stored.get(store.len()) {
        return Err(Error::CheckpointMismatch {
            name: name.clone(),
            detail: "not present in the model".into(),
        });
    }
    for (entry, (_, t)) in store.entries_mut().iter_mut().zip(stored) {
        entry.value = t.cast();
    }
    Ok(())
}

pub fn load_into<T: Float>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    restore(store, &load(path)?)
}
