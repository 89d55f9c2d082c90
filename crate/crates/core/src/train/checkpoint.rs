//! Checkpoints: raw little-endian parameter and optimizer blobs next to a
//! JSON manifest with the model configuration, noise schedule, residual
//! scale, training step and dataset hash.
//!
//! Nothing run-specific (paths, clocks) is stored, so identical runs write
//! byte-identical checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, Trainer};
use crate::diffusion::NoiseSchedule;
use crate::scorenet::{ScoreModel, ScoreModelConfig};
use crate::{CsrdError, Result};

pub const CHECKPOINT_FORMAT: &str = "csrd-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    pub dtype: String,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub tool_version: String,
    pub step: u64,
    pub model: ScoreModelConfig,
    pub schedule: NoiseSchedule,
    pub residual_scale: f64,
    pub dataset_hash: String,
    /// Training configuration; the dataset is identified by
    /// `dataset_hash`, so its path is left empty.
    pub train: TrainConfig,
    pub n_params: usize,
    pub adam_t: u64,
    pub blobs: BTreeMap<String, BlobRef>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<f32>,
    pub ema: Vec<f32>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    /// Model carrying the averaged parameters in `ema`.
    pub fn model(&self) -> Result<ScoreModel<f32>> {
        ScoreModel::from_params(
            self.manifest.model.clone(),
            self.manifest.schedule,
            self.manifest.residual_scale,
            self.params.clone(),
            Some(self.ema.clone()),
        )
    }

    pub fn into_trainer(self, cfg: TrainConfig) -> Result<Trainer<ScoreModel<f32>>> {
        let mut model = self.model()?;
        model.ema = None;
        let mut adam = Adam::new(self.params.len(), cfg.lr);
        adam.t = self.manifest.adam_t;
        adam.m = self.adam_m;
        adam.v = self.adam_v;
        Ok(Trainer {
            model,
            ema: self.ema,
            adam,
            step: self.manifest.step,
            cfg,
        })
    }
}

fn write_blob(dir: &Path, name: &str, dtype: &str, len: usize, bytes: Vec<u8>) -> Result<(String, BlobRef)> {
    let file = format!("{name}.bin");
    let path = dir.join(&file);
    let sha256 = hex::encode(Sha256::digest(&bytes));
    fs::write(&path, bytes).map_err(|e| CsrdError::io(&path, e))?;
    Ok((
        name.to_string(),
        BlobRef {
            file,
            dtype: dtype.into(),
            len,
            sha256,
        },
    ))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save_checkpoint(dir: &Path, trainer: &Trainer<ScoreModel<f32>>, dataset_hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CsrdError::io(dir, e))?;
    let n = trainer.model.params.len();
    let blobs = [
        write_blob(dir, "params", "f32le", n, f32_bytes(&trainer.model.params))?,
        write_blob(dir, "ema", "f32le", n, f32_bytes(&trainer.ema))?,
        write_blob(dir, "adam_m", "f64le", n, f64_bytes(&trainer.adam.m))?,
        write_blob(dir, "adam_v", "f64le", n, f64_bytes(&trainer.adam.v))?,
    ]
    .into_iter()
    .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        step: trainer.step,
        model: trainer.model.config.clone(),
        schedule: trainer.model.schedule,
        residual_scale: trainer.model.residual_scale,
        dataset_hash: dataset_hash.into(),
        train: TrainConfig {
            dataset_manifest: PathBuf::new(),
            ..trainer.cfg.clone()
        },
        n_params: n,
        adam_t: trainer.adam.t,
        blobs,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CsrdError::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| CsrdError::io(&path, e))?;
    Ok(dir.to_path_buf())
}

fn read_blob(dir: &Path, manifest: &CheckpointManifest, name: &str, dtype: &str) -> Result<Vec<u8>> {
    let blob = manifest
        .blobs
        .get(name)
        .ok_or_else(|| CsrdError::Checkpoint(format!("{}: manifest lists no '{name}' blob", dir.display())))?;
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(|e| CsrdError::io(&path, e))?;
    let width = if dtype == "f32le" { 4 } else { 8 };
    if blob.dtype != dtype || blob.len != manifest.n_params || bytes.len() != blob.len * width {
        return Err(CsrdError::Checkpoint(format!(
            "{}: blob '{name}' has {} bytes of {}, expected {} values of {dtype}",
            dir.display(),
            bytes.len(),
            blob.dtype,
            manifest.n_params
        )));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != blob.sha256 {
        return Err(CsrdError::Checkpoint(format!("{}: blob '{name}' is corrupt (digest mismatch)", dir.display())));
    }
    Ok(bytes)
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CsrdError::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| CsrdError::json(&path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CsrdError::Checkpoint(format!("{}: unknown format '{}'", path.display(), manifest.format)));
    }
    manifest.model.validate()?;
    if manifest.model != manifest.train.model_config() || manifest.schedule != manifest.train.schedule {
        return Err(CsrdError::Checkpoint(format!(
            "{}: model configuration disagrees with the training configuration",
            path.display()
        )));
    }
    let expected = ScoreModel::<f32>::new(manifest.model.clone(), manifest.schedule, manifest.residual_scale, 0)?.n_params();
    if expected != manifest.n_params {
        return Err(CsrdError::Checkpoint(format!(
            "{}: architecture has {expected} parameters, manifest says {}",
            path.display(),
            manifest.n_params
        )));
    }
    let f32s = |b: Vec<u8>| b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let f64s = |b: Vec<u8>| b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Checkpoint {
        params: f32s(read_blob(dir, &manifest, "params", "f32le")?),
        ema: f32s(read_blob(dir, &manifest, "ema", "f32le")?),
        adam_m: f64s(read_blob(dir, &manifest, "adam_m", "f64le")?),
        adam_v: f64s(read_blob(dir, &manifest, "adam_v", "f64le")?),
        manifest,
    })
}
