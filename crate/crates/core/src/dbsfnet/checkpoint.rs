//! Checkpoint files.
//!
//! Layout: the ASCII bytes `FGS1`, a little-endian `u64` index length, a JSON
//! index `{"config": …, "tensors": {path: {"offset", "shape"}}}`, then one
//! `NDT1` record per tensor. Offsets count bytes from the end of the index.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DbSfNet, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::ndtensor::{read_ndt_from, write_ndt_to};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGS1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, net: &DbSfNet) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = BTreeMap::new();
    for (path, t) in net.params().iter() {
        tensors.insert(
            path.clone(),
            TensorEntry {
                offset: payload.len() as u64,
                shape: t.shape().to_vec(),
            },
        );
        write_ndt_to(&mut payload, t)?;
    }
    let index = serde_json::to_vec(&Index {
        config: net.config().clone(),
        tensors,
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    w.write_all(&index)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, source: &str) -> Result<DbSfNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::parse(source, format!("missing magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(source, format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|e| Error::parse(source, format!("missing index length: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::parse(
            source,
            format!("implausible index length {len}"),
        ));
    }
    let mut index = vec![0u8; len as usize];
    r.read_exact(&mut index)
        .map_err(|e| Error::parse(source, format!("truncated index: {e}")))?;
    let index: Index = serde_json::from_slice(&index)
        .map_err(|e| Error::parse(source, format!("bad index: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut params = ModelParams::default();
    for (path, entry) in index.tensors {
        let start = usize::try_from(entry.offset)
            .ok()
            .filter(|&o| o < payload.len())
            .ok_or_else(|| {
                Error::parse(
                    source,
                    format!("{path}: offset {} out of range", entry.offset),
                )
            })?;
        let t = read_ndt_from(Cursor::new(&payload[start..]), source)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::parse(
                source,
                format!(
                    "{path}: record shape {:?} vs index {:?}",
                    t.shape(),
                    entry.shape
                ),
            ));
        }
        params.insert(path, t);
    }
    DbSfNet::from_parts(index.config, params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &DbSfNet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DbSfNet> {
    let path = path.as_ref();
    read_checkpoint(
        BufReader::new(File::open(path)?),
        &path.display().to_string(),
    )
}
