use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generative::MemoryBank;
use crate::network::{Network, SgdState};
use crate::trainer::{EpochRecord, TrainerSnapshot};

/// Everything needed to inspect or resume a run after `epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: usize,
    pub network: Network,
    pub sgd: SgdState,
    pub bank: Option<MemoryBank>,
}

/// Borrowed twin of [`Checkpoint`]; serializes to the same bytes.
#[derive(Serialize)]
struct CheckpointRef<'a> {
    config_hash: &'a str,
    epoch: usize,
    network: &'a Network,
    sgd: &'a SgdState,
    bank: Option<&'a MemoryBank>,
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomically(path, &bincode::serialize(checkpoint)?)
}

pub(super) fn save_snapshot(path: &Path, hash: &str, epoch: usize, state: &TrainerSnapshot<'_>) -> Result<()> {
    let view = CheckpointRef {
        config_hash: hash,
        epoch,
        network: state.network,
        sgd: state.sgd,
        bank: state.bank,
    };
    write_atomically(path, &bincode::serialize(&view)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bincode::deserialize(&bytes)?)
}

/// Reads a JSONL run record; blank lines are ignored.
pub fn read_record(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Pretty JSON with object keys in sorted order.
pub fn write_canonical_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let canonical = serde_json::to_value(value)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &canonical)?;
    Ok(())
}
