//! `DSCL` checkpoint container.
//!
//! ```text
//! "DSCL" | version u32 | precision u32 (32|64) | record count u64 | records…
//! then zero or more sections until EOF:
//!   name len u32 | name | record count u64 | records…
//! record: name len u32 | UTF-8 name | ndims u32 | dims u64… | LE elements
//! ```
//!
//! All integers are little-endian. BN running statistics travel as ordinary
//! records named `<layer>.running_mean` / `<layer>.running_var`.

use std::path::Path;

use super::{Elem, Precision, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSCL";
pub const VERSION: u32 = 1;

pub type Records<T> = Vec<(String, Tensor<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub records: Records<T>,
    pub sections: Vec<(String, Records<T>)>,
}

impl<T: Elem> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            records: Vec::new(),
            sections: Vec::new(),
        }
    }
}

impl<T: Elem> Checkpoint<T> {
    pub fn section(&self, name: &str) -> Option<&Records<T>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&T::PRECISION.tag().to_le_bytes());
        write_records(&mut out, &self.records);
        for (name, recs) in &self.sections {
            write_str(&mut out, name);
            write_records(&mut out, recs);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a DSCL checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let tag = r.u32()?;
        match Precision::from_tag(tag) {
            Some(p) if p == T::PRECISION => {}
            Some(p) => return Err(r.err(&format!("checkpoint holds {p:?} data, expected {:?}", T::PRECISION))),
            None => return Err(r.err(&format!("unknown precision tag {tag}"))),
        }
        let records = r.records::<T>()?;
        let mut sections = Vec::new();
        while r.pos < bytes.len() {
            let name = r.string()?;
            sections.push((name, r.records::<T>()?));
        }
        Ok(Checkpoint { records, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_records<T: Elem>(out: &mut Vec<u8>, recs: &Records<T>) {
    out.extend_from_slice(&(recs.len() as u64).to_le_bytes());
    for (name, t) in recs {
        write_str(out, name);
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.origin, format!("{msg} (offset {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("record name is not UTF-8"))
    }

    fn records<T: Elem>(&mut self) -> Result<Records<T>> {
        let count = self.u64()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let ndims = self.u32()? as usize;
            if ndims == 0 || ndims > 8 {
                return Err(self.err(&format!("record `{name}` has {ndims} dims")));
            }
            let mut dims = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                dims.push(self.u64()? as usize);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l > 0 && l.saturating_mul(T::BYTES) <= self.bytes.len() - self.pos)
                .ok_or_else(|| self.err(&format!("record `{name}` has bad dims {dims:?}")))?;
            let raw = self.take(len * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            out.push((name, Tensor::from_vec(dims, data)?));
        }
        Ok(out)
    }
}
