//! Single-file archive of a JSON manifest plus named `f32` tensors.
//!
//! Layout (little-endian): the 9-byte magic `RRSRCKPT1`, a `u64` manifest
//! length and the manifest bytes, a `u32` tensor count, then per tensor a
//! `u32`-prefixed UTF-8 name, a `u32` rank, `rank` `u32` dims and the values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};

pub const MAGIC: &[u8; 9] = b"RRSRCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub manifest: serde_json::Value,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated archive"))?;
    Ok(u32::from_le_bytes(b))
}

impl Archive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Archive {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Adds every parameter of `store` under `prefix/`.
    pub fn push_store<T: Float>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t);
        }
    }

    /// Overwrites every parameter of `store` from `prefix/`; all must exist
    /// with matching shapes.
    pub fn load_store<T: Float>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}/{}", store.name(id));
            let t = self.get(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(bad(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.cast());
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * t.numel());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated archive"))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut manifest = Vec::new();
        (&mut r)
            .take(len as u64)
            .read_to_end(&mut manifest)
            .map_err(|_| bad("truncated manifest"))?;
        if manifest.len() != len {
            return Err(bad("truncated manifest"));
        }
        let manifest = serde_json::from_slice(&manifest).map_err(|e| bad(format!("manifest: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw).map_err(|_| bad(format!("truncated data for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        Ok(Archive { manifest, tensors })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_validation() {
        let mut a = Archive::new(serde_json::json!({"iteration": 7}));
        a.push("w", &Tensor::from_vec(&[2, 1], vec![1.5f64, -2.0]));
        a.push("s", &Tensor::scalar(3.0f32));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..9], MAGIC);
        let b = Archive::read_from(&buf[..]).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("w").unwrap().data(), &[1.5, -2.0]);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(Archive::read_from(&corrupt[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(Archive::read_from(&buf[..buf.len() - 2]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn store_roundtrip_checks_shapes() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("conv.w", Tensor::full(&[2, 2], 0.5));
        let mut a = Archive::new(serde_json::Value::Null);
        a.push_store("model", &s);
        s.set(id, Tensor::zeros(&[2, 2]));
        a.load_store("model", &mut s).unwrap();
        assert_eq!(s.get(id).data(), &[0.5; 4]);
        let mut other = ParamStore::<f32>::new();
        other.add("conv.w", Tensor::zeros(&[3]));
        assert!(a.load_store("model", &mut other).is_err());
        let mut missing = ParamStore::<f32>::new();
        missing.add("other", Tensor::zeros(&[1]));
        assert!(a.load_store("model", &mut missing).is_err());
    }
}
