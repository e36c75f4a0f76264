//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"TPMB"`, version `u32`, metadata length `u64`, TOML metadata,
//! tensor count `u64`, then per tensor: name length `u32`, name, rank `u32`,
//! dims `u64 * rank`, offset `u64` and length `u64` in values; finally the
//! `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TpmSr};

pub const MAGIC: &[u8; 4] = b"TPMB";
pub const VERSION: u32 = 1;

/// Tensors whose names start with this belong to the optimiser, not the model.
pub const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    #[serde(default)]
    extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Free-form string metadata, e.g. trainer progress.
    pub extra: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} out of range")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &TpmSr) -> Self {
        let p = model.params();
        Self {
            config: model.config().clone(),
            extra: BTreeMap::new(),
            tensors: p
                .ids()
                .map(|id| NamedTensor {
                    name: p.name(id).to_string(),
                    shape: p.shape(id).to_vec(),
                    values: p.values(id).to_vec(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string(&Meta {
            model: self.config.clone(),
            extra: self.extra.clone(),
        })
        .expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.values.len() as u64).to_le_bytes());
            offset += t.values.len() as u64;
        }
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64("metadata length")?;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
        let meta: Meta = toml::from_str(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        meta.model.validate()?;
        let count = r.u64("tensor count")?;
        let mut table = Vec::new();
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(n, "name")?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dim")).collect::<Result<Vec<_>>>()?;
            let offset = r.u64("offset")?;
            let len = r.u64("length")?;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} holds {len} values")));
            }
            table.push((name, shape, offset, len));
        }
        let payload = &buf[r.pos..];
        let total: usize = table.iter().map(|t| t.3).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, table needs {}",
                payload.len(),
                total * 8
            )));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset, len) in table {
            let bytes = offset
                .checked_add(len)
                .filter(|&e| e <= total)
                .map(|e| &payload[offset * 8..e * 8])
                .ok_or_else(|| Error::Checkpoint(format!("{name}: range outside payload")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        Ok(Self {
            config: meta.model,
            extra: meta.extra,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model. Every parameter must be present exactly once
    /// with its shape; names other than optimiser state are rejected if the
    /// model has no such parameter.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<TpmSr> {
        if let Some(want) = expected {
            if want != &self.config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config differs from the requested one:\n{}\nvs\n{}",
                    self.config.to_toml(),
                    want.to_toml()
                )));
            }
        }
        let mut model = TpmSr::new(&self.config, 0)?;
        let store = model.params_mut();
        let mut seen = vec![false; store.len()];
        for t in self.tensors.iter().filter(|t| !t.name.starts_with(OPTIM_PREFIX)) {
            let id = store
                .find(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {:?}", t.name)))?;
            if seen[id.index()] {
                return Err(Error::Checkpoint(format!("duplicate parameter {:?}", t.name)));
            }
            if store.shape(id) != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    store.shape(id)
                )));
            }
            store.set(id, t.values.clone())?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = store.ids().nth(i).expect("index in range");
            return Err(Error::Checkpoint(format!("missing parameter {:?}", store.name(id))));
        }
        Ok(model)
    }
}

pub fn save_model(model: &TpmSr, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<TpmSr> {
    Checkpoint::load(path)?.to_model(expected)
}
