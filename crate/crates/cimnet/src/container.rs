//! `CIMT` tensor container: a flat list of named tensors.
//!
//! ```text
//! magic "CIMT" | version u16 = 1 | flags u16 = 0 | count u32
//! per entry: name_len u16 | name | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! All integers and floats are little-endian; dtype 0 is f32, 1 is f64 and
//! 2 is raw bytes (rank 1).

use std::fs;
use std::path::Path;

use cimnet_core::Tensor;

use crate::error::{io_err, Result};

pub const MAGIC: [u8; 4] = *b"CIMT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:?}, expected \"CIMT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("unsupported container flags {0:#06x}")]
    Flags(u16),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("entry {name:?}: payload of {actual} bytes, dims need {expected}")]
    Length { name: String, expected: usize, actual: usize },
    #[error("unexpected end of data while reading {0}")]
    Truncated(&'static str),
    #[error("entry {name:?}: unknown dtype {dtype}")]
    Dtype { name: String, dtype: u8 },
    #[error("entry name is not UTF-8")]
    Name,
    #[error("entry {0:?}: raw entries have rank 1")]
    RawRank(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("entry {0:?} is too large for the format")]
    TooLarge(String),
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("entry {name:?} has type {found}, expected {expected}")]
    WrongType { name: String, found: &'static str, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Raw(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::Raw(_) => 2,
        }
    }

    fn type_name(&self) -> &'static str {
        ["f32", "f64", "raw"][self.dtype() as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    entries: Vec<(String, Payload)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: Payload) -> Result<(), ContainerError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        if name.len() > usize::from(u16::MAX) {
            return Err(ContainerError::TooLarge(name));
        }
        self.entries.push((name, payload));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Payload)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>, ContainerError> {
        match self.get(name) {
            Some(Payload::F32(t)) => Ok(t),
            Some(p) => Err(ContainerError::WrongType { name: name.into(), found: p.type_name(), expected: "f32" }),
            None => Err(ContainerError::Missing(name.into())),
        }
    }

    pub fn raw(&self, name: &str) -> Result<&[u8], ContainerError> {
        match self.get(name) {
            Some(Payload::Raw(b)) => Ok(b),
            Some(p) => Err(ContainerError::WrongType { name: name.into(), found: p.type_name(), expected: "raw" }),
            None => Err(ContainerError::Missing(name.into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| ContainerError::TooLarge("<count>".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(payload.dtype());
            let dims: Vec<usize> = match payload {
                Payload::F32(t) => t.shape().to_vec(),
                Payload::F64(t) => t.shape().to_vec(),
                Payload::Raw(b) => vec![b.len()],
            };
            let too_large = || ContainerError::TooLarge(name.clone());
            out.push(u8::try_from(dims.len()).map_err(|_| too_large())?);
            for d in dims {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large())?.to_le_bytes());
            }
            match payload {
                Payload::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::Raw(b) => out.extend_from_slice(b),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let flags = r.u16("flags")?;
        if flags != 0 {
            return Err(ContainerError::Flags(flags));
        }
        let count = r.u32("entry count")?;
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let name_len = r.u16("name length")?;
            let name = std::str::from_utf8(r.take(name_len as usize, "name")?).map_err(|_| ContainerError::Name)?.to_owned();
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0];
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ContainerError::TooLarge(name.clone()))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                2 if rank == 1 => 1,
                2 => return Err(ContainerError::RawRank(name)),
                _ => return Err(ContainerError::Dtype { name, dtype }),
            };
            let expected = numel.checked_mul(width).ok_or_else(|| ContainerError::TooLarge(name.clone()))?;
            let available = bytes.len() - r.pos;
            if available < expected {
                return Err(ContainerError::Length { name, expected, actual: available });
            }
            let raw = r.take(expected, "payload")?;
            let payload = match dtype {
                0 => Payload::F32(tensor(&dims, raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())))),
                1 => Payload::F64(tensor(&dims, raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))),
                _ => Payload::Raw(raw.to_vec()),
            };
            c.insert(name, payload)?;
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Trailing(bytes.len() - r.pos));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn tensor<T: cimnet_core::Scalar>(dims: &[usize], values: impl Iterator<Item = T>) -> Tensor<T> {
    Tensor::from_vec(dims, values.collect()).expect("length checked against dims")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ContainerError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
