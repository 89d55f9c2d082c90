//! End-to-end phantom experiment: simulate a dataset, train score models
//! with and without the MR prior, tune the TV baseline on held-out
//! phantoms, denoise every test case and tabulate the metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{tv_denoise, tv_grid_search, TvConfig, DEFAULT_TV_GRID};
use crate::metrics::{evaluate_pair, write_csv, write_json, EvalConfig, EvalRow};
use crate::sampler::{sample_residual, DenoiseResult, SamplerConfig, SamplerMode};
use crate::scorenet::ScoreModel;
use crate::train::{load_ref, train, DatasetManifest, SimulateConfig, Split, TrainConfig};
use crate::volumes::{tile, write_rv3d, Shape3, TilingPlan, Volume3D};
use crate::{CsrdError, Result};

/// How a trained model is applied to a full volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Inference {
    /// One trajectory over the whole grid.
    Whole,
    /// Independent patch trajectories blended at the end.
    Patch { patch: [usize; 3], stride: [usize; 3] },
}

impl Inference {
    pub fn plan(&self, shape: Shape3) -> Result<Option<TilingPlan>> {
        match self {
            Inference::Whole => Ok(None),
            Inference::Patch { patch, stride } => tile(shape, Shape3(*patch), *stride).map(Some),
        }
    }
}

/// Sampler settings used at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    /// Denoiser evaluations per trajectory.
    pub nfe: usize,
    pub mode: SamplerMode,
    pub seed: u64,
    pub inference: Inference,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            nfe: 100,
            mode: SamplerMode::Deterministic,
            seed: 0,
            inference: Inference::Whole,
        }
    }
}

impl DenoiseConfig {
    pub fn sampler(&self, model: &ScoreModel<f32>) -> Result<SamplerConfig> {
        let n = SamplerConfig::steps_for_nfe(self.nfe);
        if n < 2 {
            return Err(CsrdError::Config(format!("nfe {} leaves fewer than 2 grid points", self.nfe)));
        }
        match self.mode {
            SamplerMode::Deterministic => Ok(SamplerConfig::deterministic(n, self.seed)),
            SamplerMode::Stochastic => SamplerConfig::stochastic(n, self.seed, &model.schedule),
        }
    }
}

/// Denoises `low` with the model's averaged parameters.
pub fn csrd_denoise(model: &ScoreModel<f32>, low: &Volume3D, mr: Option<&Volume3D>, cfg: &DenoiseConfig) -> Result<DenoiseResult> {
    if model.config.use_mr != mr.is_some() {
        return Err(CsrdError::Config(format!(
            "model was trained with use_mr = {} but MR was {}",
            model.config.use_mr,
            if mr.is_some() { "given" } else { "not given" }
        )));
    }
    let net = model.inference_model();
    let plan = cfg.inference.plan(low.shape())?;
    sample_residual(&net, &model.schedule, low, mr, plan.as_ref(), &cfg.sampler(model)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub simulate: SimulateConfig,
    /// Shared by both arms; `use_mr` and `dataset_manifest` are set per arm.
    pub train: TrainConfig,
    pub denoise: DenoiseConfig,
    pub tv: TvConfig,
    pub tv_grid: Vec<f64>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            simulate: SimulateConfig::default(),
            train: TrainConfig::preset("phantom").expect("built-in preset"),
            denoise: DenoiseConfig::default(),
            tv: TvConfig::default(),
            tv_grid: DEFAULT_TV_GRID.to_vec(),
            eval: EvalConfig::default(),
        }
    }
}

pub const METHOD_LOW: &str = "lowdose";
pub const METHOD_TV: &str = "tv";
pub const METHOD_CSRD: &str = "csrd";
pub const METHOD_CSRD_MR: &str = "csrd_mr";

/// Mean metrics of one method at one dose factor over the test cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub dose_factor: f64,
    pub n_cases: usize,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub h_dist: f64,
    pub p_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
    /// Chosen TV weight per dose factor.
    pub tv_weights: Vec<(f64, f64)>,
    pub checkpoint_mr: PathBuf,
    pub checkpoint_no_mr: PathBuf,
}

impl ExperimentReport {
    pub fn summary_for(&self, method: &str, factor: f64) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method && s.dose_factor == factor)
    }

    /// Mean of a summary field over the given factors.
    pub fn mean_over(&self, method: &str, factors: &[f64], field: impl Fn(&MethodSummary) -> f64) -> Option<f64> {
        let vals: Option<Vec<f64>> = factors.iter().map(|&f| self.summary_for(method, f).map(&field)).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn summarize(rows: &[EvalRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, f)| *m == r.method && *f == r.dose_factor) {
            keys.push((r.method.clone(), r.dose_factor));
        }
    }
    keys.into_iter()
        .map(|(method, dose_factor)| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method && r.dose_factor == dose_factor).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            MethodSummary {
                n_cases: sel.len(),
                mae: mean(|r| r.mae),
                psnr_db: mean(|r| r.psnr_db),
                ssim: mean(|r| r.ssim),
                h_dist: mean(|r| r.h_dist),
                p_dist: mean(|r| r.p_dist),
                method,
                dose_factor,
            }
        })
        .collect()
}

fn arm_config(cfg: &ExperimentConfig, manifest: &Path, use_mr: bool) -> TrainConfig {
    TrainConfig {
        use_mr,
        dataset_manifest: manifest.to_path_buf(),
        ..cfg.train.clone()
    }
}

/// Runs the whole experiment under `dir`. Artifacts: `data/`,
/// `train_mr/`, `train_no_mr/`, `denoised/`, `report.csv`, `report.json`
/// and `config.json`. Wall-clock timings go to `timings.json` only, so the
/// other files are identical across repeated runs.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(dir).map_err(|e| CsrdError::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut timings = Vec::new();
    let t = Instant::now();
    let data_dir = dir.join("data");
    crate::train::simulate_dataset(&cfg.simulate, &data_dir)?;
    let manifest_path = data_dir.join("manifest.json");
    let manifest = DatasetManifest::load(&manifest_path)?;
    timings.push(("simulate".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let with_mr = train(&arm_config(cfg, &manifest_path, true), &dir.join("train_mr"), None)?;
    timings.push(("train_mr".to_string(), t.elapsed().as_secs_f64()));
    let t = Instant::now();
    let without_mr = train(&arm_config(cfg, &manifest_path, false), &dir.join("train_no_mr"), None)?;
    timings.push(("train_no_mr".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let mut tv_weights = Vec::new();
    let val: Vec<_> = manifest.subjects(Split::Val).collect();
    for &factor in &manifest.test_factors {
        let weight = if val.is_empty() {
            cfg.tv.weight
        } else {
            let mut pairs = Vec::new();
            for s in &val {
                let nor = load_ref(&data_dir, &s.nor, manifest.shape, &s.id)?;
                let l = s.low.iter().find(|l| l.factor == factor).ok_or_else(|| {
                    CsrdError::Manifest(format!("validation subject {} lacks factor {factor}", s.id))
                })?;
                pairs.push((load_ref(&data_dir, &l.file, manifest.shape, &s.id)?, nor));
            }
            tv_grid_search(&pairs, &cfg.tv_grid, &cfg.tv)?.0
        };
        tv_weights.push((factor, weight));
    }
    timings.push(("tv_tuning".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let out_dir = dir.join("denoised");
    let mut rows = Vec::new();
    for s in manifest.subjects(Split::Test) {
        let nor = load_ref(&data_dir, &s.nor, manifest.shape, &s.id)?;
        let mr = load_ref(&data_dir, &s.mr, manifest.shape, &s.id)?;
        for l in &s.low {
            let low = load_ref(&data_dir, &l.file, manifest.shape, &s.id)?;
            let weight = tv_weights.iter().find(|(f, _)| *f == l.factor).map_or(cfg.tv.weight, |w| w.1);
            let tv = tv_denoise(&low, &TvConfig { weight, ..cfg.tv.clone() })?;
            let csrd_mr = csrd_denoise(&with_mr.model, &low, Some(&mr), &cfg.denoise)?.denoised;
            let csrd = csrd_denoise(&without_mr.model, &low, None, &cfg.denoise)?.denoised;
            for (method, vol) in [(METHOD_LOW, &low), (METHOD_TV, &tv), (METHOD_CSRD, &csrd), (METHOD_CSRD_MR, &csrd_mr)] {
                if method != METHOD_LOW {
                    write_rv3d(&out_dir.join(&s.id).join(format!("{method}_{}x.rv3d", l.factor)), vol)?;
                }
                let report = evaluate_pair(&nor, vol, &cfg.eval, None, None)?;
                rows.push(EvalRow::new(&s.id, l.factor, method, &report));
            }
            log::info!("denoised {} at {}x", s.id, l.factor);
        }
    }
    timings.push(("test".to_string(), t.elapsed().as_secs_f64()));

    let report = ExperimentReport {
        summary: summarize(&rows),
        rows,
        tv_weights,
        checkpoint_mr: with_mr.final_checkpoint.strip_prefix(dir).unwrap_or(&with_mr.final_checkpoint).to_path_buf(),
        checkpoint_no_mr: without_mr
            .final_checkpoint
            .strip_prefix(dir)
            .unwrap_or(&without_mr.final_checkpoint)
            .to_path_buf(),
    };
    write_csv(&dir.join("report.csv"), &report.rows)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(report)
}
