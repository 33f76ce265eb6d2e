//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "UCKCKPT\0"
//! version  u32 LE
//! meta     u32 LE length, then JSON {format, version, task, config}
//! count    u32 LE
//! entries  name (u32 length + UTF-8), decay (u8), rank (u32),
//!          dims (u64 each), values (f64 LE, row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UckModel};
use crate::tasks::Task;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UCKCKPT\0";
pub const CHECKPOINT_FORMAT: &str = "uck-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub task: Option<Task>,
    pub config: ModelConfig,
}

pub fn checkpoint_bytes(model: &UckModel, task: Option<Task>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        task,
        config: model.config.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_len(&mut out, meta.len());
    out.extend_from_slice(&meta);
    let entries = model.store.entries();
    put_len(&mut out, entries.len());
    for e in entries {
        put_len(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        out.push(u8::from(e.decay));
        put_len(&mut out, e.value.rank());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in e.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&u32::try_from(n).expect("length fits u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model described by the header and loads every entry.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, UckModel)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != version {
        return Err(Error::Format("checkpoint header disagrees with its preamble".into()));
    }
    let mut model = UckModel::new(meta.config.clone())?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, configuration expects {}",
            model.store.len()
        )));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("parameter {i}: name is not UTF-8")))?
            .to_string();
        let decay = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("{name}: decay flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let entry = &mut model.store.entries_mut()[i];
        if entry.name != name || entry.value.shape() != shape.as_slice() || entry.decay != decay {
            return Err(Error::Format(format!(
                "entry {i} is {name} {shape:?}, configuration expects {} {:?}",
                entry.name,
                entry.value.shape()
            )));
        }
        entry.value = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok((meta, model))
}

pub fn save_checkpoint(path: &Path, model: &UckModel, task: Option<Task>) -> Result<()> {
    let bytes = checkpoint_bytes(model, task)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, UckModel)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
