//! Parameter checkpoints.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "FAIRGENP"
//! version u32      1
//! count   u32      number of records
//! record  name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, values f64 × Π dims
//! ```
//!
//! Records appear in parameter order. A `.meta.toml` sidecar holds the
//! resolved run configuration, the trainer position and the vocabularies.

use std::path::{Path, PathBuf};

use fairgen::trainer::TrainerState;
use fairgen::{ParameterStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::data::Vocabulary;
use crate::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"FAIRGENP";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParameterStore, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a fairgen checkpoint".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| "parameter name is not UTF-8")?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        store
            .insert(name.clone(), t)
            .map_err(|e| format!("{name}: {e}"))?;
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after last record".into());
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEntry {
    pub epoch: u64,
    pub batch: usize,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub state: StateEntry,
    pub subgroups: Vec<String>,
    pub domains: Vec<String>,
    pub config: RunConfigFile,
}

impl CheckpointMeta {
    pub fn new(config: &RunConfigFile, state: TrainerState, vocab: &Vocabulary) -> Self {
        Self {
            state: StateEntry {
                epoch: state.epoch,
                batch: state.batch,
                iteration: state.iteration,
            },
            subgroups: vocab.subgroups.clone(),
            domains: vocab.domains.clone(),
            config: config.clone(),
        }
    }

    pub fn trainer_state(&self) -> TrainerState {
        TrainerState {
            epoch: self.state.epoch,
            batch: self.state.batch,
            iteration: self.state.iteration,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            subgroups: self.subgroups.clone(),
            domains: self.domains.clone(),
        }
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.toml")
}

pub fn save(path: &Path, params: &ParameterStore, meta: &CheckpointMeta) -> Result<()> {
    crate::write_file(path, encode(params))?;
    let text = toml::to_string(meta).expect("meta serializes");
    crate::write_file(&meta_path(path), text)
}

pub fn load(path: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let params = decode(&bytes).map_err(|m| CliError::format(path, 0, m))?;
    let mpath = meta_path(path);
    let meta = toml::from_str(&crate::read_to_string(&mpath)?)
        .map_err(|e: toml::de::Error| CliError::format(&mpath, 0, e.message().to_string()))?;
    Ok((params, meta))
}
