//! Binary checkpoint: `ALMR` magic, u32 version, u64-prefixed JSON config,
//! u64 entry count, then per entry u16-prefixed name, dtype u8, ndim u8,
//! u64 dims and raw little-endian values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{DType, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ALMR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl EntryData {
    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
        }
    }

    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            EntryData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    fn from_real<T: Real>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => EntryData::F32(v.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => EntryData::F64(v.iter().map(|x| x.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

/// Decoded checkpoint contents; the config blob is kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(config_json: String, store: &ParamStore<T>) -> Self {
        let entries = store
            .iter()
            .map(|(n, e)| Entry { name: n.clone(), shape: e.tensor.shape.clone(), data: EntryData::from_real(&e.tensor.data) })
            .collect();
        Checkpoint { config_json, entries }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name too long: {}", e.name)))?;
            let ndim = u8::try_from(e.shape.len()).map_err(|_| Error::Config(format!("{} has too many dims", e.name)))?;
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::shape("checkpoint", format!("{} shape {:?} vs {} values", e.name, e.shape, e.data.len())));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype().code());
            out.push(ndim);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint { offset: 0, reason: format!("bad magic {magic:?}") });
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Checkpoint { offset: 4, reason: format!("unsupported version {version}") });
        }
        let cfg_len = r.u64("config length")?;
        let at = r.pos as u64;
        let cfg = r.take(r.len_checked(cfg_len, 1, "config")?, "config")?;
        let config_json = String::from_utf8(cfg.to_vec()).map_err(|_| Error::Checkpoint { offset: at, reason: "config is not UTF-8".into() })?;
        let count = r.u64("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint { offset: at, reason: "name is not UTF-8".into() })?;
            let at = r.pos as u64;
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or(Error::Checkpoint { offset: at, reason: format!("unknown dtype code {code}") })?;
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64("dim")?;
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint { offset: r.pos as u64 - 8, reason: "dim overflows usize".into() })?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Checkpoint {
                offset: r.pos as u64,
                reason: format!("shape {shape:?} overflows"),
            })?;
            let raw = r.take(r.len_checked(n as u64, dtype.size_of(), "values")?, "values")?;
            let data = match dtype {
                DType::F32 => EntryData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => EntryData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint { offset: r.pos as u64, reason: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Checkpoint { config_json, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds a store; entries whose names start with a frozen prefix are frozen.
    pub fn to_store<T: Real>(&self, frozen_prefixes: &[&str]) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let frozen = frozen_prefixes.iter().any(|p| e.name.starts_with(p));
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), e.data.to_real())?, frozen)?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint {
            offset: self.pos as u64,
            reason: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    /// Byte length of `count` items of `size` bytes, rejecting impossible values early.
    fn len_checked(&self, count: u64, size: usize, what: &str) -> Result<usize> {
        count
            .checked_mul(size as u64)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Checkpoint { offset: self.pos as u64, reason: format!("{what} length {count} overflows") })
    }
}
