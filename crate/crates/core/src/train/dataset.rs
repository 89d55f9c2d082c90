//! Phantom datasets on disk and the in-memory training set built from them.
//!
//! A dataset directory holds RV3D volumes plus `manifest.json`, which lists
//! every subject with its normal-dose, MR and low-dose files, their SHA-256
//! digests, the per-subject normalization scale and the pooled residual
//! standard deviation of the training split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TrainingTriple;
use crate::dosesim::{
    default_scale, generate_phantom, normalize_counts, normalize_low_dose, poisson_thin, PhantomSpec, ThinningSpec,
    TEST_FACTORS, TRAIN_FACTORS,
};
use crate::rng::derive_seed;
use crate::volumes::{compute_residual, read_rv3d, write_rv3d, Shape3, Volume3D};
use crate::{CsrdError, Result};

pub const DATASET_FORMAT: &str = "csrd-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    /// Held out for tuning baselines.
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowDoseRecord {
    pub factor: f64,
    pub thinning_seed: u64,
    pub file: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub split: Split,
    pub phantom_seed: u64,
    /// Counts per unit normalized intensity.
    pub scale: f64,
    pub nor: FileRef,
    pub mr: FileRef,
    pub low: Vec<LowDoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub shape: Shape3,
    pub train_factors: Vec<f64>,
    pub test_factors: Vec<f64>,
    /// Standard deviation of `low - nor` pooled over training subjects and
    /// training factors.
    pub residual_std: f64,
    pub subjects: Vec<SubjectRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CsrdError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CsrdError::json(path, e))?;
        if m.format != DATASET_FORMAT {
            return Err(CsrdError::Manifest(format!("{}: unknown format '{}'", path.display(), m.format)));
        }
        if !(m.residual_std > 0.0) {
            return Err(CsrdError::Manifest(format!("{}: residual_std must be positive", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CsrdError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| CsrdError::io(path, e))
    }

    pub fn subjects(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(move |s| s.split == split)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CsrdError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash identifying a dataset: the digest of its manifest file.
pub fn dataset_hash(manifest_path: &Path) -> Result<String> {
    file_digest(manifest_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_train: usize,
    #[serde(default)]
    pub n_val: usize,
    pub n_test: usize,
    /// Template for every subject; its seed is replaced per subject.
    pub phantom: PhantomSpec,
    pub train_factors: Vec<f64>,
    pub test_factors: Vec<f64>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_val: 1,
            n_test: 4,
            phantom: PhantomSpec::default(),
            train_factors: TRAIN_FACTORS.to_vec(),
            test_factors: TEST_FACTORS.to_vec(),
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_train == 0 {
            problems.push("n_train must be at least 1".to_string());
        }
        for f in self.train_factors.iter().chain(&self.test_factors) {
            if !(*f > 1.0) {
                problems.push(format!("dose factor {f} must exceed 1"));
            }
        }
        if self.train_factors.is_empty() {
            problems.push("train_factors is empty".into());
        }
        if let Err(e) = self.phantom.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CsrdError::Config(problems.join("; ")))
        }
    }
}

fn write_ref(dir: &Path, rel: &str, vol: &Volume3D) -> Result<FileRef> {
    let path = dir.join(rel);
    write_rv3d(&path, vol)?;
    Ok(FileRef {
        path: PathBuf::from(rel),
        sha256: file_digest(&path)?,
    })
}

fn factor_tag(f: f64) -> u64 {
    f.to_bits()
}

/// Generates phantoms, simulates low-dose volumes, writes everything under
/// `dir` and returns the manifest (also saved as `dir/manifest.json`).
pub fn simulate_dataset(cfg: &SimulateConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| CsrdError::io(dir, e))?;
    let mut subjects = Vec::new();
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
    for i in 0..cfg.n_train + cfg.n_val + cfg.n_test {
        let split = if i < cfg.n_train {
            Split::Train
        } else if i < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let id = match split {
            Split::Train => format!("train{i:03}"),
            Split::Val => format!("val{i:03}"),
            Split::Test => format!("test{i:03}"),
        };
        let phantom_seed = derive_seed(cfg.seed, &[0xFA, i as u64]);
        let spec = PhantomSpec {
            seed: phantom_seed,
            ..cfg.phantom.clone()
        };
        let (pet, mut mr) = generate_phantom(&spec)?;
        let scale = default_scale(&pet);
        let mut nor = normalize_counts(&pet, scale)?;
        nor.name = format!("{id}-nor");
        mr.name = format!("{id}-mr");
        let factors = if split == Split::Train { &cfg.train_factors } else { &cfg.test_factors };
        let mut low = Vec::new();
        for &factor in factors {
            let thinning_seed = derive_seed(cfg.seed, &[0x7E, i as u64, factor_tag(factor)]);
            let thinned = poisson_thin(&pet, &ThinningSpec::new(factor, thinning_seed)?)?;
            let mut vol = normalize_low_dose(&thinned, factor, scale)?;
            vol.name = format!("{id}-low{factor}x");
            if split == Split::Train {
                for r in &compute_residual(&vol, &nor)?.data.data {
                    sum += r;
                    sum_sq += r * r;
                    count += 1;
                }
            }
            low.push(LowDoseRecord {
                factor,
                thinning_seed,
                file: write_ref(dir, &format!("{id}/low_{factor}x.rv3d"), &vol)?,
            });
        }
        subjects.push(SubjectRecord {
            nor: write_ref(dir, &format!("{id}/nor.rv3d"), &nor)?,
            mr: write_ref(dir, &format!("{id}/mr.rv3d"), &mr)?,
            id,
            split,
            phantom_seed,
            scale,
            low,
        });
    }
    let mean = sum / count as f64;
    let residual_std = (sum_sq / count as f64 - mean * mean).max(0.0).sqrt();
    if !(residual_std > 0.0) {
        return Err(CsrdError::Manifest("training residuals are identically zero".into()));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        shape: cfg.phantom.shape,
        train_factors: cfg.train_factors.clone(),
        test_factors: cfg.test_factors.clone(),
        residual_std,
        subjects,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a referenced volume, checking its digest and grid.
pub fn load_ref(base: &Path, r: &FileRef, shape: Shape3, entry: &str) -> Result<Volume3D> {
    let path = base.join(&r.path);
    let digest = file_digest(&path).map_err(|e| CsrdError::Manifest(format!("entry {entry}: {e}")))?;
    if digest != r.sha256 {
        return Err(CsrdError::Manifest(format!(
            "entry {entry}: {} has digest {digest}, manifest says {}",
            path.display(),
            r.sha256
        )));
    }
    let vol = read_rv3d(&path).map_err(|e| CsrdError::Manifest(format!("entry {entry}: {e}")))?;
    if vol.shape() != shape {
        return Err(CsrdError::Manifest(format!(
            "entry {entry}: {} is {} but the dataset grid is {shape}",
            path.display(),
            vol.shape()
        )));
    }
    Ok(vol)
}

/// One (subject, dose factor) training pair.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub subject: String,
    pub factor: f64,
    pub triple: TrainingTriple,
}

/// All training pairs of a dataset held in memory, with residuals already
/// divided by the model's residual scale.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<TrainingItem>,
    pub residual_scale: f64,
    pub dataset_hash: String,
}

impl TrainingSet {
    /// Loads the training split. `residual_scale` is the divisor applied to
    /// `low - nor`.
    pub fn load(manifest_path: &Path, use_mr: bool, residual_scale: f64) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut items = Vec::new();
        for s in manifest.subjects(Split::Train) {
            let nor = load_ref(base, &s.nor, manifest.shape, &s.id)?;
            let mr = use_mr.then(|| load_ref(base, &s.mr, manifest.shape, &s.id)).transpose()?;
            for l in &s.low {
                if !manifest.train_factors.contains(&l.factor) {
                    continue;
                }
                let entry = format!("{}@{}x", s.id, l.factor);
                let low = load_ref(base, &l.file, manifest.shape, &entry)?;
                let r = compute_residual(&low, &nor).map_err(|e| CsrdError::Manifest(format!("entry {entry}: {e}")))?;
                let residual = r.data.map(|v| v / residual_scale);
                items.push(TrainingItem {
                    subject: s.id.clone(),
                    factor: l.factor,
                    triple: TrainingTriple::new(residual, low.grid, mr.as_ref().map(|m| m.grid.clone()))?,
                });
            }
        }
        if items.is_empty() {
            return Err(CsrdError::Manifest(format!("{}: no training pairs", manifest_path.display())));
        }
        Ok(Self {
            items,
            residual_scale,
            dataset_hash: dataset_hash(manifest_path)?,
        })
    }

    /// Builds a set from in-memory triples (tests and toy problems).
    pub fn from_items(items: Vec<TrainingItem>, residual_scale: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(CsrdError::Manifest("no training pairs".into()));
        }
        Ok(Self {
            items,
            residual_scale,
            dataset_hash: String::new(),
        })
    }

    /// Uniform draw over (subject, factor) pairs.
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.items.len())
    }
}
