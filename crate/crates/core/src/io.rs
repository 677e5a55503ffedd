//! Versioned binary container for checkpoints and dataset dumps.
//!
//! Layout: magic bytes, format version, then named sections (length-prefixed
//! byte blobs). Sections hold either a JSON header or a list of named
//! tensors stored as little-endian f64 arrays. Section order is sorted by
//! name, so identical contents always produce identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TPPTBIN\x01";
const VERSION: u32 = 1;

#[derive(Debug, Default, Clone)]
pub struct Container {
    sections: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.insert(name.to_string(), bytes);
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put_bytes(name, serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn put_tensors(&mut self, name: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut buf = Vec::new();
        write_u32(&mut buf, tensors.len() as u32);
        for (tname, t) in tensors {
            write_str(&mut buf, tname);
            write_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                write_u64(&mut buf, d as u64);
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.put_bytes(name, buf);
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Format(format!("missing section '{name}'")))
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(self.bytes(name)?)?)
    }

    pub fn tensors(&self, name: &str) -> Result<Vec<(String, Tensor)>> {
        let mut r = Reader::new(self.bytes(name)?);
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tname = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            out.push((tname, Tensor::new(data, &shape)?));
        }
        r.expect_end()?;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_u32(&mut buf, VERSION);
        write_u32(&mut buf, self.sections.len() as u32);
        for (name, payload) in &self.sections {
            write_str(&mut buf, name);
            write_u64(&mut buf, payload.len() as u64);
            buf.extend_from_slice(payload);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            sections.insert(name, payload);
        }
        r.expect_end()?;
        Ok(Self { sections })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    write_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("non-utf8 name".into()))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format("trailing bytes in container".into()));
        }
        Ok(())
    }
}
