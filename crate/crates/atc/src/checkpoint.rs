//! Versioned binary weight snapshots.
//!
//! Layout (little-endian): magic "ATCK", u32 format version, u64 config
//! digest, u32 block count, then per block: u32 name length, name bytes,
//! u32 rank, u32 dims, f32 payload, u32 CRC32 over everything since the
//! name length. `load(save(x))` restores `x` bitwise. A digest mismatch on
//! load is a warning (weights may be reused across configs deliberately); a
//! CRC mismatch is an error.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AtcError, Result};
use crate::model::AtcModel;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn block_bytes(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + name.len() + t.numel() * 4);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write every learned parameter and momentum copy of the model.
pub fn save_checkpoint(path: &Path, model: &AtcModel, config_digest: u64) -> Result<()> {
    let mut blocks: Vec<Vec<u8>> = Vec::new();
    model.visit_params(|name, t| blocks.push(block_bytes(name, t)));
    model.visit_momentum(|name, t| blocks.push(block_bytes(name, t)));

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&config_digest.to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in &blocks {
        w.write_all(b)?;
        w.write_all(&crc32fast::hash(b).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Non-fatal observations from a load.
#[derive(Debug, Clone, Default)]
pub struct LoadWarnings {
    pub digest_mismatch: Option<(u64, u64)>,
}

/// Restore parameters into `model` (shapes must match its architecture).
pub fn load_checkpoint(path: &Path, model: &mut AtcModel, expected_digest: u64) -> Result<LoadWarnings> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AtcError::data(format!("bad checkpoint magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(AtcError::data(format!("unsupported checkpoint version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let digest = u64::from_le_bytes(u64b);
    let mut warnings = LoadWarnings::default();
    if digest != expected_digest {
        warnings.digest_mismatch = Some((digest, expected_digest));
    }
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;

    let mut by_name: std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)> = Default::default();
    for i in 0..count {
        let mut block: Vec<u8> = Vec::new();
        let mut name_len = [0u8; 4];
        r.read_exact(&mut name_len)
            .map_err(|e| AtcError::data(format!("truncated checkpoint at block {i}: {e}")))?;
        block.extend_from_slice(&name_len);
        let nl = u32::from_le_bytes(name_len) as usize;
        if nl > 4096 {
            return Err(AtcError::data(format!("implausible name length {nl} in block {i}")));
        }
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name)?;
        block.extend_from_slice(&name);
        let name = String::from_utf8(name).map_err(|_| AtcError::data("non-utf8 block name"))?;
        r.read_exact(&mut u32b)?;
        block.extend_from_slice(&u32b);
        let rank = u32::from_le_bytes(u32b) as usize;
        if rank > 8 {
            return Err(AtcError::data(format!("implausible rank {rank} in block {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32b)?;
            block.extend_from_slice(&u32b);
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|e| AtcError::data(format!("truncated payload in block {name}: {e}")))?;
        block.extend_from_slice(&payload);
        r.read_exact(&mut u32b)?;
        if crc32fast::hash(&block) != u32::from_le_bytes(u32b) {
            return Err(AtcError::data(format!("checksum mismatch in block {name}")));
        }
        let data: Vec<f32> =
            payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        by_name.insert(name, (shape, data));
    }

    let mut missing: Vec<String> = Vec::new();
    let mut restore = |name: &str, t: &mut Tensor| {
        match by_name.remove(name) {
            Some((shape, data)) => {
                if shape != t.shape() {
                    missing.push(format!("{name}: shape {shape:?} != {:?}", t.shape()));
                } else {
                    t.data_mut().copy_from_slice(&data);
                }
            }
            None => missing.push(format!("{name}: absent")),
        }
    };
    model.visit_params_mut(|name, t| restore(name, t));
    model.visit_momentum_mut(|name, t| restore(name, t));
    if !missing.is_empty() {
        return Err(AtcError::data(format!("checkpoint does not fit the model: {}", missing.join("; "))));
    }
    if !by_name.is_empty() {
        let extra: Vec<String> = by_name.keys().cloned().collect();
        return Err(AtcError::data(format!("checkpoint has unknown blocks: {}", extra.join(", "))));
    }
    Ok(warnings)
}
