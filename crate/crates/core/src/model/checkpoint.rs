//! Flat binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AIDKCKPT"
//! version  u32      1
//! count    u32      number of records
//! record*  u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f64 data
//! ```
//!
//! The first record is `config`, holding the eight [`ModelConfig`] integers
//! as `f64`; the parameter tensors follow in [`DenoiserWeights::tensors`] order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AidError, Result};
use crate::numerics::Tensor;

use super::{DenoiserWeights, ModelConfig};

const MAGIC: &[u8; 8] = b"AIDKCKPT";
const VERSION: u32 = 1;

fn config_record(c: &ModelConfig) -> Tensor {
    let vals = [
        c.image_size,
        c.patch,
        c.width,
        c.blocks,
        c.hidden,
        c.cond_tokens,
        c.classes,
        c.train_steps,
    ];
    Tensor::new(vec![8], vals.iter().map(|&v| v as f64).collect()).expect("config record")
}

fn config_from_record(t: &Tensor) -> Result<ModelConfig> {
    if t.shape() != [8] || t.data().iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(AidError::Format("malformed config record".into()));
    }
    let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
    let cfg = ModelConfig {
        image_size: v[0],
        patch: v[1],
        width: v[2],
        blocks: v[3],
        hidden: v[4],
        cond_tokens: v[5],
        classes: v[6],
        train_steps: v[7],
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_record(out: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &DenoiserWeights, out: &mut impl Write) -> Result<()> {
    let tensors = w.tensors();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32 + 1).to_le_bytes())?;
    write_record(out, "config", &config_record(&w.config))?;
    for (name, t) in tensors {
        write_record(out, &name, t)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_record(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(AidError::Format(format!("record name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| AidError::Format("record name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(AidError::Format(format!("record '{name}' has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| AidError::Format(format!("record '{name}' is too large")))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<DenoiserWeights> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AidError::Format("not a weight checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(AidError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let (name, cfg) = read_record(r)?;
    if name != "config" {
        return Err(AidError::Format("first record must be 'config'".into()));
    }
    let config = config_from_record(&cfg)?;
    let mut w = DenoiserWeights::zeros(config);
    let expected: Vec<(String, Vec<usize>)> = w
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if count != expected.len() + 1 {
        return Err(AidError::Format(format!(
            "expected {} records, header says {count}",
            expected.len() + 1
        )));
    }
    for ((want_name, want_shape), slot) in expected.into_iter().zip(w.tensors_mut()) {
        let (name, t) = read_record(r)?;
        if name != want_name || t.shape() != want_shape.as_slice() {
            return Err(AidError::Format(format!(
                "record '{name}' {:?} where '{want_name}' {want_shape:?} was expected",
                t.shape()
            )));
        }
        *slot = t;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(AidError::Format("trailing bytes after last record".into()));
    }
    Ok(w)
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(w: &DenoiserWeights, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_checkpoint(w, &mut bytes)?;
    crate::io::write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserWeights> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Git-style object hash (`blob <len>\0` header) using SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}
