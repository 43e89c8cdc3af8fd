//! RNGT tensor container.
//!
//! Layout (little endian): `b"RNGT"`, `u32` version, `u32` tensor count, then
//! per tensor a `u16`-prefixed UTF-8 name, `u8` dtype (0 = f32), `u8` rank,
//! `u32` dims and the payload; finally a `u32`-prefixed JSON metadata blob.
//! Metadata bytes are kept verbatim so that read-then-write is byte-identical.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"RNGT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let dims: Vec<u32> = dims.iter().map(|&d| d as u32).collect();
        let t = Tensor { name: name.into(), dims, data };
        t.check()?;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn check(&self) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(IoError::Format(format!("tensor {} has rank {}", self.name, self.dims.len())));
        }
        if self.numel() != self.data.len() {
            return Err(IoError::Format(format!("tensor {} declares {} values, holds {}", self.name, self.numel(), self.data.len())));
        }
        if self.name.len() > u16::MAX as usize {
            return Err(IoError::Format("tensor name too long".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<Tensor>,
    /// Raw JSON bytes.
    pub metadata: Vec<u8>,
}

impl Container {
    pub fn new(tensors: Vec<Tensor>, metadata: &serde_json::Value) -> Result<Self> {
        let c = Container { tensors, metadata: serde_json::to_vec(metadata)? };
        c.check()?;
        Ok(c)
    }

    pub fn metadata_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_slice(&self.metadata)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| IoError::Format(format!("missing tensor {name}")))
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            t.check()?;
            if !seen.insert(t.name.as_str()) {
                return Err(IoError::Format(format!("duplicate tensor name {}", t.name)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let payload: usize = self.tensors.iter().map(|t| 8 + t.name.len() + 4 * t.dims.len() + 4 * t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + payload + self.metadata.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.metadata);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(IoError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(IoError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| IoError::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(IoError::Format(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or_else(|| IoError::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| IoError::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor { name, dims, data });
        }
        let len = r.u32()? as usize;
        let metadata = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(IoError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let c = Container { tensors, metadata };
        c.check()?;
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        // Write-then-rename so a crash never leaves a truncated container.
        let tmp = path.with_extension("rngt.partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(IoError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
