//! Run manifests and sequence archives.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::io::write_atomic;
use crate::numerics::Tensor;
use crate::pipeline::{InterpolationSequence, ItemProvenance, Method};

use super::image::{render_grid, GrayImage};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run. Wall-clock time is deliberately
/// absent so reruns produce byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_hash: Option<String>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub result: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            checkpoint_hash: None,
            outputs: Vec::new(),
            result: serde_json::Value::Null,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// The `result` block of an interpolation archive's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub method: Method,
    pub fused: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warmup_steps: Option<usize>,
    pub coefficients: Vec<f64>,
    pub provenance: Vec<ItemProvenance>,
    pub images: Vec<String>,
    pub strip: String,
}

pub fn image_name(i: usize) -> String {
    format!("item_{i:02}.pgm")
}

/// Writes the images and a strip of the whole sequence into `dir`; returns
/// the record to embed in the manifest.
pub fn write_sequence_images(seq: &InterpolationSequence, dir: &Path) -> Result<SequenceRecord> {
    let mut images = Vec::with_capacity(seq.images.len());
    for (i, img) in seq.images.iter().enumerate() {
        let name = image_name(i);
        write_atomic(&dir.join(&name), &GrayImage::from_tensor(img)?.encode_pgm())?;
        images.push(name);
    }
    let strip = "strip.pgm".to_string();
    write_atomic(&dir.join(&strip), &render_grid(std::slice::from_ref(&seq.images))?.encode_pgm())?;
    Ok(SequenceRecord {
        method: seq.method,
        fused: seq.fused,
        warmup_steps: seq.warmup_steps,
        coefficients: seq.coefficients.values().to_vec(),
        provenance: seq.provenance.clone(),
        images,
        strip,
    })
}

/// A sequence archive read back from disk (images quantized to 8 bits).
#[derive(Debug, Clone)]
pub struct Archive {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub record: SequenceRecord,
    pub images: Vec<Tensor>,
}

impl AsRef<[Tensor]> for Archive {
    fn as_ref(&self) -> &[Tensor] {
        &self.images
    }
}

pub fn read_archive(dir: &Path) -> Result<Archive> {
    let manifest = RunManifest::read(&dir.join(MANIFEST_FILE))?;
    if manifest.command != "interpolate" {
        return Err(AidError::Format(format!(
            "{} is a '{}' manifest, not a sequence archive",
            dir.display(),
            manifest.command
        )));
    }
    let record: SequenceRecord = serde_json::from_value(manifest.result.clone())?;
    if record.images.len() < 2 || record.images.len() != record.coefficients.len() {
        return Err(AidError::Format(format!(
            "{}: {} images for {} coefficients",
            dir.display(),
            record.images.len(),
            record.coefficients.len()
        )));
    }
    let images = record
        .images
        .iter()
        .map(|name| {
            if Path::new(name).components().count() != 1 {
                return Err(AidError::Format(format!("image path '{name}' leaves the archive")));
            }
            Ok(GrayImage::decode_pgm(&fs::read(dir.join(name))?)?.to_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Archive {
        dir: dir.to_path_buf(),
        manifest,
        record,
        images,
    })
}
