//! Score-model training: batched patch sampling over the dataset, the
//! weighted score-matching objective, Adam updates, a parameter EMA,
//! checkpoints and bitwise-resumable runs.
//!
//! Every iteration draws its batch from its own seed stream
//! `(seed, iteration)`, so a resumed run replays exactly the draws of an
//! uninterrupted one.

mod checkpoint;
mod dataset;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};
pub use dataset::{
    dataset_hash, file_digest, load_ref, simulate_dataset, DatasetManifest, FileRef, LowDoseRecord, SimulateConfig,
    Split, SubjectRecord, TrainingItem, TrainingSet, DATASET_FORMAT,
};

use crate::diffusion::{dsm_loss_grad, sample_region, standard_normal_vec, Differentiable, NoiseSchedule};
use crate::nn::Real;
use crate::rng::stream;
use crate::scorenet::{ScoreModel, ScoreModelConfig};
use crate::volumes::{PatchRegion, Shape3};
use crate::{CsrdError, Result};

/// Seed-path tag of per-iteration batch streams.
const BATCH_TAG: u64 = 0xBA7C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub patch_size: [usize; 3],
    pub ema_decay: f64,
    pub seed: u64,
    pub use_mr: bool,
    pub dataset_manifest: PathBuf,
    /// Checkpoint cadence in iterations; 0 saves only the final state.
    pub checkpoint_every: u64,
    pub base_channels: usize,
    pub depth: usize,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("phantom").expect("built-in preset")
    }
}

impl TrainConfig {
    /// `"full"`: the full-scale schedule (64³ patches, 64 channels, batch
    /// 16, 65k iterations). `"phantom"`: desk scale for 48³ phantoms.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            lr: 2e-3,
            batch_size: 16,
            total_iters: 65_000,
            patch_size: [64; 3],
            ema_decay: 0.999,
            seed: 0,
            use_mr: true,
            dataset_manifest: PathBuf::from("data/manifest.json"),
            checkpoint_every: 5_000,
            base_channels: 64,
            depth: 4,
            schedule: NoiseSchedule::default(),
        };
        match name {
            "full" => Ok(base),
            "phantom" => Ok(Self {
                batch_size: 8,
                total_iters: 5_000,
                patch_size: [16; 3],
                checkpoint_every: 1_000,
                base_channels: 8,
                depth: 3,
                ..base
            }),
            other => Err(CsrdError::Config(format!("unknown preset '{other}' (expected full or phantom)"))),
        }
    }

    pub fn model_config(&self) -> ScoreModelConfig {
        ScoreModelConfig {
            patch_size: self.patch_size,
            ..ScoreModelConfig::new(self.base_channels, self.depth, self.use_mr, self.patch_size[0])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            problems.push(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if let Err(e) = self.model_config().validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CsrdError::Config(problems.join("; ")))
        }
    }

    /// Whether a checkpoint written under `other` may be continued under
    /// `self`: everything but the run length and cadence must agree.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            total_iters: 0,
            checkpoint_every: 0,
            dataset_manifest: PathBuf::new(),
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// A model the training loop can update in place.
pub trait Trainable: Differentiable + Clone + Send + Sync {
    type Param: Real;
    fn parameters(&self) -> &[Self::Param];
    fn parameters_mut(&mut self) -> &mut [Self::Param];
}

impl<T: Real> Trainable for ScoreModel<T> {
    type Param = T;

    fn parameters(&self) -> &[T] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
}

/// Adaptive-moment optimizer without weight decay or warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[f64]) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = T::of(p.f64() - step);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Real>(ema: &mut [T], params: &[T], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = T::of(decay * e.f64() + (1.0 - decay) * p.f64());
    }
}

/// One sampled element of a training batch.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub item: usize,
    pub region: PatchRegion,
    pub sigma: f64,
    pub noise: Vec<f64>,
}

/// Draws the batch of iteration `iter`: uniform (subject, factor) pair,
/// uniform patch origin, log-normal σ and a fresh noise field per element.
pub fn draw_batch(data: &TrainingSet, cfg: &TrainConfig, iter: u64) -> Result<Vec<BatchItem>> {
    let mut rng = stream(cfg.seed, &[BATCH_TAG, iter]);
    let patch = Shape3(cfg.patch_size);
    (0..cfg.batch_size)
        .map(|_| {
            let item = data.draw(&mut rng);
            let region = sample_region(data.items[item].triple.shape(), patch, &mut rng)?;
            let sigma = cfg.schedule.sample_training_sigma(&mut rng);
            let noise = standard_normal_vec(patch.len(), &mut rng);
            Ok(BatchItem {
                item,
                region,
                sigma,
                noise,
            })
        })
        .collect()
}

/// Telemetry of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    /// Batch mean of the per-patch weighted losses.
    pub loss: f64,
    pub sigma_mean: f64,
    pub lr: f64,
    /// Seconds since the run (or resumed segment) started.
    pub wallclock: f64,
}

/// Model, averaged parameters and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct Trainer<M: Trainable> {
    pub model: M,
    pub ema: Vec<M::Param>,
    pub adam: Adam,
    /// Iterations completed.
    pub step: u64,
    pub cfg: TrainConfig,
}

impl<M: Trainable> Trainer<M> {
    pub fn new(model: M, cfg: TrainConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.ema_decay) {
            return Err(CsrdError::Config("invalid lr, batch_size or ema_decay".into()));
        }
        let ema = model.parameters().to_vec();
        let adam = Adam::new(ema.len(), cfg.lr);
        Ok(Self {
            model,
            ema,
            adam,
            step: 0,
            cfg,
        })
    }

    /// Runs one iteration; returns the batch loss and mean σ.
    pub fn step(&mut self, data: &TrainingSet) -> Result<(f64, f64)> {
        let batch = draw_batch(data, &self.cfg, self.step)?;
        let model = &self.model;
        let sched = &self.cfg.schedule;
        let results: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|b| {
                let item = &data.items[b.item];
                let patch = item.triple.patch(&b.region)?;
                let (rec, grad) = dsm_loss_grad(model, &patch.target, &patch.condition(), b.sigma, &b.noise, sched)
                    .map_err(|e| nan_diagnostic(e, b, item, self.step))?;
                Ok((rec.per_patch_loss, grad))
            })
            .collect();
        let n = self.ema.len();
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;
        for (r, b) in results.into_iter().zip(&batch) {
            let (l, g) = r?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(nan_diagnostic(
                    CsrdError::Numeric("non-finite loss or gradient".into()),
                    b,
                    &data.items[b.item],
                    self.step,
                ));
            }
            loss += l;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
        }
        let k = 1.0 / batch.len() as f64;
        for g in &mut grad {
            *g *= k;
        }
        self.adam.update(self.model.parameters_mut(), &grad);
        ema_update(&mut self.ema, self.model.parameters(), self.cfg.ema_decay);
        self.step += 1;
        let sigma_mean = batch.iter().map(|b| b.sigma).sum::<f64>() * k;
        Ok((loss * k, sigma_mean))
    }
}

fn nan_diagnostic(e: CsrdError, b: &BatchItem, item: &TrainingItem, iter: u64) -> CsrdError {
    match e {
        CsrdError::Numeric(msg) => CsrdError::Numeric(format!(
            "iteration {iter}, volume {} at {}x, sigma {}, region origin {:?} size {}: {msg}",
            item.subject, item.factor, b.sigma, b.region.origin, b.region.size
        )),
        other => other,
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoreModel<f32>,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:07}"))
}

/// Trains a score model on the dataset named by `cfg`, writing
/// checkpoints and `telemetry.jsonl` under `out_dir`. With `resume`, the
/// run continues from that checkpoint after verifying that its
/// configuration and dataset hash match.
pub fn train(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CsrdError::io(out_dir, e))?;
    let manifest = DatasetManifest::load(&cfg.dataset_manifest)?;
    let residual_scale = manifest.residual_std / cfg.schedule.sigma_data;
    let data = TrainingSet::load(&cfg.dataset_manifest, cfg.use_mr, residual_scale)?;

    let mut trainer = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if !cfg.resumable_from(&ck.manifest.train) {
                return Err(CsrdError::Checkpoint(format!(
                    "{}: training configuration differs from the checkpoint's",
                    dir.display()
                )));
            }
            if ck.manifest.dataset_hash != data.dataset_hash {
                return Err(CsrdError::Checkpoint(format!(
                    "{}: dataset hash {} does not match {} of {}",
                    dir.display(),
                    ck.manifest.dataset_hash,
                    data.dataset_hash,
                    cfg.dataset_manifest.display()
                )));
            }
            ck.into_trainer(cfg.clone())?
        }
        None => {
            let model = ScoreModel::<f32>::new(cfg.model_config(), cfg.schedule, residual_scale, cfg.seed)?;
            Trainer::new(model, cfg.clone())?
        }
    };

    let tpath = out_dir.join("telemetry.jsonl");
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&tpath)
    } else {
        File::create(&tpath)
    }
    .map_err(|e| CsrdError::io(&tpath, e))?;
    let mut telemetry = BufWriter::new(file);

    let start = Instant::now();
    let mut checkpoints = Vec::new();
    while trainer.step < cfg.total_iters {
        let (loss, sigma_mean) = trainer.step(&data)?;
        let rec = StepRecord {
            iter: trainer.step,
            loss,
            sigma_mean,
            lr: cfg.lr,
            wallclock: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| CsrdError::json(&tpath, e))?;
        writeln!(telemetry, "{line}").map_err(|e| CsrdError::io(&tpath, e))?;
        if trainer.step % 100 == 0 {
            log::info!("iter {} loss {:.4} ({:.0} s)", trainer.step, loss, rec.wallclock);
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.total_iters {
            let dir = checkpoint_dir(out_dir, trainer.step);
            save_checkpoint(&dir, &trainer, &data.dataset_hash)?;
            checkpoints.push(dir);
        }
    }
    telemetry.flush().map_err(|e| CsrdError::io(&tpath, e))?;
    let dir = checkpoint_dir(out_dir, trainer.step);
    save_checkpoint(&dir, &trainer, &data.dataset_hash)?;
    checkpoints.push(dir.clone());
    let mut model = trainer.model;
    model.ema = Some(trainer.ema);
    Ok(TrainOutcome {
        model,
        final_checkpoint: dir,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = TrainConfig::preset("full").unwrap();
        assert_eq!((p.total_iters, p.batch_size, p.patch_size, p.base_channels), (65_000, 16, [64; 3], 64));
        p.validate().unwrap();
        let d = TrainConfig::preset("phantom").unwrap();
        assert_eq!((d.total_iters, d.patch_size, d.depth), (5_000, [16; 3], 3));
        d.validate().unwrap();
        assert!(TrainConfig::preset("huge").is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 0,
            patch_size: [12; 3],
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("lr") && msg.contains("batch_size") && msg.contains("patch_size"), "{msg}");
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut opt = Adam::new(3, 0.1);
        opt.update(&mut p, &[3.0, -0.5, 0.0]);
        // Exact up to the eps guard in the denominator.
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 1.9).abs() < 1e-8);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn ema_matches_scalar_recursion() {
        let mut ema = vec![0.0f64];
        let mut reference = 0.0;
        let decay = 0.9;
        for t in 1..50 {
            let theta = (t as f64).sin();
            ema_update(&mut ema, &[theta], decay);
            reference = decay * reference + (1.0 - decay) * theta;
        }
        assert_eq!(ema[0], reference);
    }
}
