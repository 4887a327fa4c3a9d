//! Binary tensor archive shared by features, embeddings, checkpoints and
//! backend models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"SPKVARC\0"
//! version u32
//! meta    u32 count, then (u32 len, utf8 key, u32 len, utf8 value)*  sorted by key
//! tensors u32 count, then per tensor:
//!         u32 len, utf8 name, u8 dtype (0 = f32, 1 = f64),
//!         u32 rank, u64 dims[rank], payload
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPKVARC\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// A named tensor; values are held as `f64` and narrowed on write for `F32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<ArchiveTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("truncated archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in archive".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Archive {
    /// Empty archive tagged with `kind` in its metadata.
    pub fn new(kind: &str) -> Self {
        let mut a = Self::default();
        a.meta.insert("kind".into(), kind.into());
        a
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!("expected a {kind} archive, found {other:?}"))),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!("tensor {name}: shape {shape:?} vs {} values", data.len())));
        }
        self.tensors.push(ArchiveTensor { name, dtype, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Format(format!("archive has no tensor {name}")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("archive has no meta key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta_value(key)?;
        v.parse().map_err(|_| Error::Format(format!("meta {key} has bad value {v:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|&v| out.extend((v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|&v| out.extend(v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a tensor archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut a = Archive::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            a.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                b => return Err(Error::Format(format!("unknown dtype byte {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let data = match dtype {
                DType::F32 => r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            a.tensors.push(ArchiveTensor { name, dtype, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after archive".into()));
        }
        Ok(a)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Rounds to the nearest `f32`, the precision of feature and embedding files.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test");
        a.meta.insert("z".into(), "last".into());
        a.meta.insert("a b".into(), "with space\nand newline".into());
        a.push("x", DType::F32, vec![2, 3], vec![1.0, -2.5, 0.125, 3.0, 1e-3f32 as f64, 7.0]).unwrap();
        a.push("y", DType::F64, vec![2], vec![std::f64::consts::PI, -1e-300]).unwrap();
        a.push("empty", DType::F64, vec![0, 4], vec![]).unwrap();
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        let b = a.to_bytes();
        let back = Archive::from_bytes(&b).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        sample().write(&p).unwrap();
        assert_eq!(Archive::read(&p).unwrap(), sample());
    }

    #[test]
    fn corrupt_input_rejected() {
        let b = sample().to_bytes();
        assert!(Archive::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"NOTANARC").is_err());
        let mut v = b.clone();
        v[8] = 9;
        assert!(Archive::from_bytes(&v).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_must_match() {
        assert!(Archive::new("t").push("x", DType::F64, vec![2, 2], vec![1.0]).is_err());
        assert!(sample().expect_kind("other").is_err());
        assert_eq!(sample().meta_parse::<String>("kind").unwrap(), "test");
    }
}
