//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CRCKDCKP"  u32 version  u32 entry_count
//! entry_count × { u16 name_len, name, u8 dtype, u8 rank, rank × u64 dim }
//! entry blobs in manifest order: f64 / u64 / raw bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRCKDCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Blob {
    fn dtype(&self) -> u8 {
        match self {
            Blob::F64(_) => 0,
            Blob::U64(_) => 1,
            Blob::Bytes(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Blob::F64(v) => v.len(),
            Blob::U64(v) => v.len(),
            Blob::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub blob: Blob,
}

/// Named entries, kept in insertion order for writing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    order: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, blob: Blob) {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<usize>(), blob.len(), "{name}");
        if self.entries.insert(name.clone(), Entry { dims, blob }).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Entry {
                dims,
                blob: Blob::F64(v),
            } => Ok((dims, v)),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Entry {
                blob: Blob::U64(v), ..
            } => Ok(v),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Entry {
                blob: Blob::Bytes(v),
                ..
            } => Ok(v),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not raw bytes"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for name in &self.order {
            let e = &self.entries[name];
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.blob.dtype());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for name in &self.order {
            match &self.entries[name].blob {
                Blob::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Blob::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Blob::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype, dims));
        }
        let mut ck = Checkpoint::new();
        for (name, dtype, dims) in manifest {
            let n: usize = dims.iter().product();
            let blob = match dtype {
                0 => Blob::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => Blob::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                2 => Blob::Bytes(r.take(n)?.to_vec()),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}` has unknown dtype {other}"
                    )))
                }
            };
            ck.insert(name, dims, blob);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
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
