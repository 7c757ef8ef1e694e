//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | field            | encoding                                   |
//! |------------------|--------------------------------------------|
//! | magic            | `DPAFCKPT`                                 |
//! | version          | u32, currently 1                           |
//! | config           | u32 length + UTF-8 JSON of [`ModelConfig`] |
//! | parameters       | parameter container                        |
//! | section count    | u32                                        |
//! | each section     | u32 name length, name, u64 length, bytes   |
//!
//! Sections carry optional extras such as optimizer state.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{decode_container_from, Reader};
use crate::tensor::Real;

use super::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DPAFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub bytes: Vec<u8>,
}

pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub sections: Vec<Section>,
}

impl<T> Checkpoint<T> {
    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|s| s.name == name).map(|s| s.bytes.as_slice())
    }
}

pub fn write_checkpoint<T: Real>(model: &Model<T>, sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&model.params.to_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.bytes);
    }
    out
}

/// Parses a checkpoint, rebuilding the model from its embedded config and
/// checking every stored parameter against that structure.
pub fn read_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes, path);
    if r.take(8)? != MAGIC {
        return Err(r.error("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| r.error(format!("embedded model config: {e}")))?;
    let mut model = Model::build(&config, 0).map_err(|e| Error::format(path, format!("embedded model config: {e}")))?;
    let entries = decode_container_from::<T>(&mut r)?;
    model.params.load_entries(entries, path)?;
    let count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.error("section name is not UTF-8"))?
            .to_owned();
        let len = r.u64()? as usize;
        sections.push(Section { name, bytes: r.take(len)?.to_vec() });
    }
    if !r.is_done() {
        return Err(r.error("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { model, sections })
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, sections: &[Section]) -> Result<()> {
    let bytes = write_checkpoint(model, sections);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
