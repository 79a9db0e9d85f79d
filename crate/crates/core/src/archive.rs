//! Single-file tensor archive used for checkpoints, adapters and dataset caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CDAR" | u32 version | u32 len + UTF-8 config record | u32 entry count
//! per entry: u32 len + UTF-8 name | u32 ndim | ndim x u64 dims | f32 data
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDAR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub config: String,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new(config: impl Into<String>) -> Self {
        Archive {
            config: config.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.entries.push((name.into(), value));
    }

    /// Append every parameter of `store` in registry order.
    pub fn push_store(&mut self, store: &ParamStore<f32>) {
        for (entry, value) in store.iter() {
            self.push(entry.name.clone(), value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let pos = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Archive(format!("missing entry `{name}`")))?;
        Ok(self.entries.remove(pos).1)
    }

    /// Overwrite every parameter of `store` from entries of the same name and
    /// shape, consuming them.
    pub fn fill_store(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.entry(id).name.clone();
            let value = self.take(&name)?;
            if value.shape() != store.entry(id).shape.as_slice() {
                return Err(Error::Archive(format!(
                    "entry `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.entry(id).shape
                )));
            }
            *store.value_mut(id) = value;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        put_str(&mut out, &self.config)?;
        out.extend_from_slice(&len_u32(self.entries.len())?.to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name)?;
            out.extend_from_slice(&len_u32(t.rank())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Archive("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Archive("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.bytes(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!(
                "unsupported version {version} (expected {ARCHIVE_VERSION})"
            )));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.bytes(8)?.try_into().unwrap());
                shape.push(
                    usize::try_from(d).map_err(|_| Error::Archive("dimension overflow".into()))?,
                );
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Archive("dimension overflow".into()))?;
            let raw = r.bytes(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Archive("dimension overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Archive("trailing bytes".into()));
        }
        Ok(Archive { config, entries })
    }

    /// Write atomically: the file either appears complete or not at all.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Archive(format!("length {n} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn bytes(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Archive("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|_| Error::Archive("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("{\"k\":1}");
        a.push(
            "w",
            Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -7.25, 1e30]).unwrap(),
        );
        a.push("b", Tensor::new([1], vec![0.5]).unwrap());
        a
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a.config, b.config);
        for ((n1, t1), (n2, t2)) in a.entries.iter().zip(&b.entries) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::Archive(_))
        ));
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
