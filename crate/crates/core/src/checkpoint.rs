//! Binary checkpoint format for trained LSA parameters.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "LSACKPT1"
//! 8 bytes   header length H, u64 little-endian
//! H bytes   JSON header (CheckpointHeader)
//! rest      f64 little-endian, layer by layer, matrices K, Q, V, O,
//!           each (d+1) x (d+1) in column-major order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsa::{param_count, LsaParams, TrainConfig};
use crate::taskgen::GenConfig;

const MAGIC: &[u8; 8] = b"LSACKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d: usize,
    pub n_trained: usize,
    pub layers: usize,
    pub init_seed: u64,
    pub train_config: TrainConfig,
    pub gen: GenConfig,
}

impl CheckpointHeader {
    pub fn new(cfg: &TrainConfig, init_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            d: cfg.gen.d,
            n_trained: cfg.gen.n,
            layers: cfg.layers,
            init_seed,
            train_config: cfg.clone(),
            gen: cfg.gen.clone(),
        }
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    header: &CheckpointHeader,
    params: &LsaParams,
) -> Result<()> {
    if header.d != params.d || header.layers != params.num_layers() {
        return Err(Error::Checkpoint("header does not describe the parameters".into()));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint; when `expected_d` is given the header must match it.
pub fn read_checkpoint<R: Read>(
    mut r: R,
    expected_d: Option<usize>,
) -> Result<(CheckpointHeader, LsaParams)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let mut header: CheckpointHeader = serde_json::from_slice(&json)?;
    header.train_config.gen = header.gen.clone();
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if let Some(d) = expected_d {
        if d != header.d {
            return Err(Error::Checkpoint(format!(
                "checkpoint has d = {}, expected {d}",
                header.d
            )));
        }
    }
    if header.layers == 0 {
        return Err(Error::Checkpoint("checkpoint has no layers".into()));
    }
    let count = param_count(header.d, header.layers);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of weights, found {}",
            count * 8,
            raw.len()
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = LsaParams::from_values(header.d, header.layers, &values)?;
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &LsaParams) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, header, params)
}

pub fn load(path: &Path, expected_d: Option<usize>) -> Result<(CheckpointHeader, LsaParams)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f, expected_d)
}
