//! Flat binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "CAMP"
//! version  u32      1
//! count    u64      number of parameters
//! repeated count times:
//!   name_len u32, name (UTF-8 bytes)
//!   rank     u32, dims (u64 × rank)
//!   payload  f64 × product(dims)
//! ```
//!
//! A *bundle* prefixes the parameter file with one line of JSON (the model
//! header) terminated by `\n`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"CAMP";
pub const VERSION: u32 = 1;

pub fn encode_params<S: Real>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params<S: Real>(bytes: &[u8]) -> Result<ParamStore<S>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect();
        if store.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(store)
}

pub fn save_params<S: Real>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params<S: Real>(path: &Path) -> Result<ParamStore<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

/// Copies values from `src` into `dst` by name. Every parameter of `dst` must
/// be present in `src` with an identical shape.
pub fn restore_into<S: Real>(dst: &mut ParamStore<S>, src: &ParamStore<S>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {}", dst.len(), src.len())));
    }
    for p in dst.iter_mut() {
        let id = src.find(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
        let v = src.value(id);
        if v.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}`: shape {:?} != expected {:?}",
                p.name,
                v.shape(),
                p.value.shape()
            )));
        }
        p.value = v.clone();
    }
    Ok(())
}

pub fn write_bundle<S: Real, H: Serialize>(path: &Path, header: &H, store: &ParamStore<S>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let json = serde_json::to_string(header)?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn read_bundle<S: Real, H: DeserializeOwned>(path: &Path) -> Result<(H, ParamStore<S>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing JSON header", path.display())))?;
    let header = serde_json::from_slice(&bytes[..nl])?;
    Ok((header, decode_params(&bytes[nl + 1..])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::row(&[1.0, -2.0]));
        let bytes = encode_params(&store);
        assert_eq!(&bytes[..4], b"CAMP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        // name_len + "w" + rank + 2 dims + 2 floats
        assert_eq!(bytes.len(), 16 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), -2.0);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::row(&[1.0]));
        let bytes = encode_params(&store);
        assert!(decode_params::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_params::<f64>(b"XXXX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..20), cols in 1usize..4) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut store = ParamStore::<f64>::new();
            store.add("layer.weight", Tensor::matrix(rows, cols, data.clone()).unwrap());
            store.add("bias", Tensor::new(vec![cols], vec![0.5; cols]).unwrap());
            let back: ParamStore<f64> = decode_params(&encode_params(&store)).unwrap();
            prop_assert_eq!(back.flat_values(), store.flat_values());
            prop_assert_eq!(back.get(back.find("layer.weight").unwrap()).value.shape(), &[rows, cols]);
        }
    }
}
