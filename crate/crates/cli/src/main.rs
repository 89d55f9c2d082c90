//! `csrd`: simulate phantom datasets, train score models, denoise volumes
//! and evaluate them.
//!
//! Settings come from built-in defaults, then an optional JSON run config
//! (`--config`), then command-line flags, each overriding the previous.
//! The output directory is taken from `--out`, else `CSRD_OUTPUT_DIR`,
//! else the config's `output_dir`, else `runs/<command>`. Every run writes
//! `config.resolved.json` and `run.json` (tool version and input digests)
//! into its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use csrd::baselines::{tv_denoise, TvConfig};
use csrd::metrics::{evaluate_pair, write_csv, write_json, EvalConfig, EvalReport, EvalRow};
use csrd::pipeline::{csrd_denoise, run_experiment, DenoiseConfig, ExperimentConfig, Inference};
use csrd::sampler::{sample_ensemble, SamplerMode};
use csrd::train::{file_digest, load_checkpoint, simulate_dataset, train, SimulateConfig, TrainConfig};
use csrd::volumes::{read_rv3d, write_rv3d, Grid, Volume3D};
use csrd::CsrdError;

const OUTPUT_ENV: &str = "CSRD_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "csrd", version, about = "Score-based residual diffusion for low-dose PET denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset with simulated low-dose volumes.
    Simulate(SimulateArgs),
    /// Train a score model.
    Train(TrainArgs),
    /// Denoise one low-dose volume.
    Denoise(DenoiseArgs),
    /// Compare volumes against a reference.
    Evaluate(EvaluateArgs),
    /// Run simulate, train (with and without MR), denoise and evaluate.
    Experiment(ExperimentArgs),
    /// Print the tool version.
    Version,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Start from a named preset instead of the config's train section.
    #[arg(long, value_parser = ["full", "phantom"])]
    preset: Option<String>,
    /// Dataset manifest produced by `simulate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    no_mr: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Csrd,
    Tv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[command(flatten)]
    common: Common,
    /// Low-dose RV3D volume.
    #[arg(long, visible_alias = "low")]
    input: PathBuf,
    /// Co-registered MR RV3D volume.
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Checkpoint directory (csrd method).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Integrate independent patches of this edge length.
    #[arg(long, conflicts_with = "whole")]
    patch: Option<usize>,
    /// Patch stride (defaults to half the patch).
    #[arg(long, requires = "patch")]
    stride: Option<usize>,
    /// One trajectory over the whole volume.
    #[arg(long)]
    whole: bool,
    /// Number of realizations; writes their mean and standard deviation.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "ref", required_unless_present = "manifest")]
    reference: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    test: Option<PathBuf>,
    /// JSON list of {case, dose_factor, method, ref, test} entries.
    #[arg(long, conflicts_with_all = ["reference", "test"])]
    manifest: Option<PathBuf>,
    /// RV3D mask; voxels > 0 are evaluated for MAE and PSNR.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "case")]
    case: String,
    #[arg(long, default_value_t = 0.0)]
    dose_factor: f64,
    #[arg(long, default_value = "test")]
    method: String,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    /// f32 network storage with f64 accumulation of losses and solver state.
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DenoiseSection {
    method: Method,
    checkpoint: Option<PathBuf>,
    sampler: DenoiseConfig,
    ensemble: Option<usize>,
    tv: TvConfig,
}

impl Default for DenoiseSection {
    fn default() -> Self {
        Self {
            method: Method::Csrd,
            checkpoint: None,
            sampler: DenoiseConfig::default(),
            ensemble: None,
            tv: TvConfig::default(),
        }
    }
}

/// The single JSON document configuring any command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    precision: Precision,
    device_count_hint: usize,
    output_dir: Option<PathBuf>,
    simulate: SimulateConfig,
    train: TrainConfig,
    denoise: DenoiseSection,
    evaluate: EvalConfig,
    experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Full,
            device_count_hint: 1,
            output_dir: None,
            simulate: SimulateConfig::default(),
            train: TrainConfig::default(),
            denoise: DenoiseSection::default(),
            evaluate: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord {
    tool_version: &'static str,
    command: String,
    inputs: Vec<(PathBuf, String)>,
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(common: &Common, cfg: &RunConfig, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

/// Writes the resolved config and the run record into `dir`.
fn record_run(dir: &Path, cfg: &RunConfig, command: &str, inputs: &[&Path]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(dir.to_path_buf());
    write_json(&dir.join("config.resolved.json"), &resolved)?;
    let mut digests = Vec::new();
    for p in inputs {
        let target = if p.is_dir() { p.join("manifest.json") } else { p.to_path_buf() };
        digests.push((target.clone(), file_digest(&target)?));
    }
    let record = RunRecord {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        inputs: digests,
    };
    write_json(&dir.join("run.json"), &record)?;
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if args.common.seed.is_some() || args.common.config.is_none() {
        cfg.simulate.seed = cfg.seed;
    }
    if let Some(n) = args.n_train {
        cfg.simulate.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.simulate.n_val = n;
    }
    if let Some(n) = args.n_test {
        cfg.simulate.n_test = n;
    }
    let dir = output_dir(&args.common, &cfg, "simulate");
    record_run(&dir, &cfg, "simulate", &[])?;
    let m = simulate_dataset(&cfg.simulate, &dir)?;
    println!("{}", dir.join("manifest.json").display());
    log::info!("{} subjects, residual std {:.4}", m.subjects.len(), m.residual_std);
    Ok(())
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.preset {
        cfg.train = TrainConfig {
            dataset_manifest: cfg.train.dataset_manifest.clone(),
            ..TrainConfig::preset(p)?
        };
    }
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(d) = args.dataset {
        cfg.train.dataset_manifest = d;
    }
    if let Some(n) = args.iters {
        cfg.train.total_iters = n;
    }
    if args.no_mr {
        cfg.train.use_mr = false;
    }
    let dir = output_dir(&args.common, &cfg, "train");
    let mut inputs = vec![cfg.train.dataset_manifest.as_path()];
    if let Some(r) = &args.resume {
        inputs.push(r);
    }
    record_run(&dir, &cfg, "train", &inputs)?;
    let outcome = train(&cfg.train, &dir, args.resume.as_deref())?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn mean_volume(members: &[&Volume3D], name: &str) -> anyhow::Result<Volume3D> {
    let first = members[0];
    let n = members.len() as f64;
    let data = (0..first.data().len())
        .map(|i| (members.iter().map(|m| f64::from(m.data()[i])).sum::<f64>() / n) as f32)
        .collect();
    Ok(Volume3D::new(Grid::from_vec(first.shape(), data)?, first.spacing, first.domain, name)?)
}

fn denoise_cmd(args: DenoiseArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    let d = &mut cfg.denoise;
    d.sampler.seed = args.common.seed.unwrap_or(d.sampler.seed);
    if let Some(m) = args.method {
        d.method = m;
    }
    if let Some(c) = &args.checkpoint {
        d.checkpoint = Some(c.clone());
    }
    if let Some(w) = args.tv_weight {
        d.tv.weight = w;
    }
    if let Some(n) = args.nfe {
        d.sampler.nfe = n;
    }
    if let Some(m) = args.mode {
        d.sampler.mode = match m {
            ModeArg::Deterministic => SamplerMode::Deterministic,
            ModeArg::Stochastic => SamplerMode::Stochastic,
        };
    }
    if let Some(p) = args.patch {
        let s = args.stride.unwrap_or((p / 2).max(1));
        d.sampler.inference = Inference::Patch {
            patch: [p; 3],
            stride: [s; 3],
        };
    }
    if args.whole {
        d.sampler.inference = Inference::Whole;
    }
    if let Some(n) = args.ensemble {
        d.ensemble = Some(n);
    }
    let dir = output_dir(&args.common, &cfg, "denoise");
    let d = &cfg.denoise;
    let mut inputs: Vec<&Path> = vec![&args.input];
    if let Some(m) = &args.mr {
        inputs.push(m);
    }
    if d.method == Method::Csrd {
        match &d.checkpoint {
            Some(c) => inputs.push(c),
            None => bail!("the csrd method needs --checkpoint"),
        }
    }
    record_run(&dir, &cfg, "denoise", &inputs)?;
    let low = read_rv3d(&args.input)?;
    let mr = args.mr.as_deref().map(read_rv3d).transpose()?;
    let out = dir.join("denoised.rv3d");
    match d.method {
        Method::Tv => write_rv3d(&out, &tv_denoise(&low, &d.tv)?)?,
        Method::Csrd => {
            let ck = load_checkpoint(d.checkpoint.as_deref().expect("checked above"))?;
            let model = ck.model()?;
            match d.ensemble {
                Some(n) => {
                    let net = model.inference_model();
                    let plan = d.sampler.inference.plan(low.shape())?;
                    let ens = sample_ensemble(&net, &model.schedule, &low, mr.as_ref(), plan.as_ref(), &d.sampler.sampler(&model)?, n)?;
                    let members: Vec<&Volume3D> = ens.members.iter().map(|m| &m.denoised).collect();
                    write_rv3d(&out, &mean_volume(&members, &format!("{}-csrd-mean", low.name))?)?;
                    write_rv3d(&dir.join("denoised_std.rv3d"), &ens.std)?;
                    for (k, m) in ens.members.iter().enumerate() {
                        write_rv3d(&dir.join(format!("member_{k}.rv3d")), &m.denoised)?;
                    }
                }
                None => {
                    let r = csrd_denoise(&model, &low, mr.as_ref(), &d.sampler)?;
                    write_json(&dir.join("sampling.json"), &serde_json::json!({
                        "nfe_used": r.nfe_used,
                        "total_calls": r.total_calls,
                        "per_patch_seams": r.per_patch_seams,
                        "seeds": r.seeds,
                    }))?;
                    write_rv3d(&out, &r.denoised)?;
                }
            }
        }
    }
    println!("{}", out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalEntry {
    case: String,
    dose_factor: f64,
    method: String,
    #[serde(rename = "ref")]
    reference: PathBuf,
    test: PathBuf,
}

fn evaluate_cmd(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let dir = output_dir(&args.common, &cfg, "evaluate");
    let entries = match &args.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Vec<EvalEntry>>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => vec![EvalEntry {
            case: args.case.clone(),
            dose_factor: args.dose_factor,
            method: args.method.clone(),
            reference: args.reference.clone().expect("required by clap"),
            test: args.test.clone().expect("required by clap"),
        }],
    };
    let mut inputs: Vec<&Path> = entries.iter().flat_map(|e| [e.reference.as_path(), e.test.as_path()]).collect();
    if let Some(m) = &args.mask {
        inputs.push(m);
    }
    if let Some(m) = &args.manifest {
        inputs.push(m);
    }
    record_run(&dir, &cfg, "evaluate", &inputs)?;
    let mask = args.mask.as_deref().map(read_rv3d).transpose()?.map(|m| m.grid.map(|v| v > 0.0));
    let mask_desc = args.mask.as_ref().map(|p| p.display().to_string());
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut rows = Vec::new();
    for e in &entries {
        let reference = read_rv3d(&e.reference)?;
        let test = read_rv3d(&e.test)?;
        let m = mask.as_ref().zip(mask_desc.as_deref());
        let report = evaluate_pair(&reference, &test, &cfg.evaluate, m, None)?;
        rows.push(EvalRow::new(&e.case, e.dose_factor, &e.method, &report));
        reports.push(report);
    }
    write_json(&dir.join("report.json"), &reports)?;
    write_csv(&dir.join("report.csv"), &rows)?;
    for r in &rows {
        println!(
            "{} {}x {}: mae {:.5} psnr {:.3} dB ssim {:.4} h {:.4} p {:.5}",
            r.case, r.dose_factor, r.method, r.mae, r.psnr_db, r.ssim, r.h_dist, r.p_dist
        );
    }
    Ok(())
}

fn experiment_cmd(args: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.iters {
        cfg.experiment.train.total_iters = n;
    }
    let dir = output_dir(&args.common, &cfg, "experiment");
    record_run(&dir, &cfg, "experiment", &[])?;
    let report = run_experiment(&cfg.experiment, &dir)?;
    for s in &report.summary {
        println!(
            "{:>8} {:>4}x  mae {:.5}  psnr {:7.3} dB  ssim {:.4}  h {:8.4}  p {:.5}",
            s.method, s.dose_factor, s.mae, s.psnr_db, s.ssim, s.h_dist, s.p_dist
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CsrdError>() {
        Some(CsrdError::Config(_)) => 2,
        _ if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Version => {
            println!("csrd {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
