//! JSON-lines dataset files: one header line, then one instance per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::TaskSpec;
use super::GraphInstance;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "uck-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub spec: TaskSpec,
}

impl DatasetHeader {
    pub fn new(spec: TaskSpec) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            spec,
        }
    }
}

/// Serialized file contents; byte-identical for identical inputs.
pub fn dataset_bytes(spec: &TaskSpec, instances: &[GraphInstance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let header = DatasetHeader::new(spec.clone());
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    for inst in instances {
        serde_json::to_writer(&mut out, inst).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, spec: &TaskSpec, instances: &[GraphInstance]) -> Result<()> {
    let bytes = dataset_bytes(spec, instances)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset; every instance must match the header task.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<GraphInstance>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let where_ = |line: usize| format!("{}:{line}", path.display());
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("{}: bad header: {e}", where_(1))))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("{}: format `{}` is not {DATASET_FORMAT}", where_(1), header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset version {} (expected {DATASET_VERSION})",
            where_(1),
            header.version
        )));
    }
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: GraphInstance =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", where_(i + 2))))?;
        inst.validate()
            .map_err(|e| Error::Data(format!("{}: {e}", where_(i + 2))))?;
        if inst.task != header.spec.task {
            return Err(Error::Data(format!(
                "{}: {} instance in a {} dataset",
                where_(i + 2),
                inst.task.name(),
                header.spec.task.name()
            )));
        }
        instances.push(inst);
    }
    Ok((header, instances))
}
