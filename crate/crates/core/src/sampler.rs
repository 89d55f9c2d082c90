//! Reverse diffusion with a second-order corrected (Heun) integrator.
//!
//! A residual is drawn from `N(0, t_0²)` and integrated down the noise-level
//! grid with optional stochastic churn; the denoised volume is the low-dose
//! input minus the sampled residual.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{discretize_sigmas, standard_normal_vec, Condition, Denoiser, NoiseSchedule};
use crate::rng::{derive_seed, stream};
use crate::volumes::{
    apply_residual, extract_patch, stitch, Domain, Grid, PatchRegion, ResidualVolume, TilingPlan, Volume3D,
};
use crate::{CsrdError, Result};

/// Fraction of the noise-level grid trimmed at each end before churn is
/// enabled in stochastic mode.
const CHURN_TRIM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Grid size; the sampler spends `2·(n_steps − 1) + 1` denoiser calls.
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_t_min: f64,
    pub s_t_max: f64,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn deterministic(n_steps: usize, seed: u64) -> Self {
        Self {
            n_steps,
            s_churn: 0.0,
            s_noise: 1.0,
            s_t_min: 0.0,
            s_t_max: f64::MAX,
            mode: SamplerMode::Deterministic,
            seed,
        }
    }

    /// Churn 40, noise inflation 1.003, active on the middle 80% of the
    /// noise-level grid.
    pub fn stochastic(n_steps: usize, seed: u64, sched: &NoiseSchedule) -> Result<Self> {
        let grid = discretize_sigmas(n_steps, sched)?;
        let last = (n_steps - 1) as f64;
        let hi = (CHURN_TRIM * last).ceil() as usize;
        let lo = ((1.0 - CHURN_TRIM) * last).floor() as usize;
        Ok(Self {
            n_steps,
            s_churn: 40.0,
            s_noise: 1.003,
            s_t_min: grid[lo],
            s_t_max: grid[hi],
            mode: SamplerMode::Stochastic,
            seed,
        })
    }

    /// Grid size that spends at most `nfe` denoiser calls.
    pub fn steps_for_nfe(nfe: usize) -> usize {
        nfe.saturating_sub(1) / 2 + 1
    }

    pub fn nfe(&self) -> usize {
        2 * (self.n_steps - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_steps < 2 {
            problems.push(format!("n_steps must be at least 2, got {}", self.n_steps));
        }
        if !(self.s_churn >= 0.0) {
            problems.push("s_churn must be non-negative".to_string());
        }
        if !(self.s_noise > 0.0) {
            problems.push("s_noise must be positive".to_string());
        }
        if !(self.s_t_min <= self.s_t_max) {
            problems.push("s_t_min must not exceed s_t_max".to_string());
        }
        if (self.mode == SamplerMode::Deterministic) != (self.s_churn == 0.0) {
            problems.push("deterministic mode requires s_churn = 0 and stochastic mode s_churn > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CsrdError::Config(problems.join("; ")))
        }
    }

    /// Churn factor γ applied at noise level `t`.
    fn gamma(&self, t: f64) -> f64 {
        if self.mode == SamplerMode::Stochastic && t >= self.s_t_min && t <= self.s_t_max {
            (self.s_churn / self.n_steps as f64).min(2f64.sqrt() - 1.0)
        } else {
            0.0
        }
    }
}

fn checked_denoise<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    cond: &Condition,
    calls: &mut usize,
) -> Result<Vec<f64>> {
    *calls += 1;
    let out = denoiser.denoise(x, sigma, cond)?;
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(CsrdError::Numeric(format!(
            "denoiser produced a non-finite value at voxel {i}, sigma {sigma}"
        )));
    }
    Ok(out)
}

/// One churned Heun step from `t_cur` to `t_next`; increments `calls` once
/// per denoiser evaluation.
#[allow(clippy::too_many_arguments)]
pub fn heun_step<D: Denoiser + ?Sized>(
    r: &[f64],
    t_cur: f64,
    t_next: f64,
    denoiser: &D,
    cond: &Condition,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
    calls: &mut usize,
) -> Result<Vec<f64>> {
    if !(t_cur > t_next && t_next >= 0.0) {
        return Err(CsrdError::Domain(format!("step must decrease time: {t_cur} -> {t_next}")));
    }
    let gamma = cfg.gamma(t_cur);
    let t_hat = t_cur * (1.0 + gamma);
    let r_hat: Vec<f64> = if gamma > 0.0 {
        let amp = (t_hat * t_hat - t_cur * t_cur).sqrt() * cfg.s_noise;
        let eps = standard_normal_vec(r.len(), rng);
        r.iter().zip(&eps).map(|(v, e)| v + amp * e).collect()
    } else {
        r.to_vec()
    };
    let h = t_next - t_hat;
    let den = checked_denoise(denoiser, &r_hat, t_hat, cond, calls)?;
    let d: Vec<f64> = r_hat.iter().zip(&den).map(|(x, dn)| (x - dn) / t_hat).collect();
    let euler: Vec<f64> = r_hat.iter().zip(&d).map(|(x, s)| x + h * s).collect();
    if t_next == 0.0 {
        return Ok(euler);
    }
    let den2 = checked_denoise(denoiser, &euler, t_next, cond, calls)?;
    Ok(r_hat
        .iter()
        .zip(&d)
        .zip(euler.iter().zip(&den2))
        .map(|((x, s), (e, dn))| x + h * 0.5 * (s + (e - dn) / t_next))
        .collect())
}

/// Integrates one trajectory over the full grid; returns the standardized
/// residual and the number of denoiser calls.
pub fn integrate<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Condition,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    cfg.validate()?;
    let grid = discretize_sigmas(cfg.n_steps, sched)?;
    let n = cond.shape().len();
    let mut r: Vec<f64> = standard_normal_vec(n, rng).into_iter().map(|e| e * grid[0]).collect();
    let mut calls = 0;
    for (i, w) in grid.windows(2).enumerate() {
        r = heun_step(&r, w[0], w[1], denoiser, cond, cfg, rng, &mut calls).map_err(|e| match e {
            CsrdError::Numeric(msg) => CsrdError::Numeric(format!("step {i} ({} -> {}): {msg}", w[0], w[1])),
            other => other,
        })?;
    }
    Ok((r, calls))
}

/// Seeds used by one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub run_seed: u64,
    pub member: u64,
    /// Derived seed of each patch trajectory, in plan order.
    pub patch_seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    /// `low − denoised`, exactly.
    pub residual: ResidualVolume,
    pub denoised: Volume3D,
    /// Denoiser calls per trajectory.
    pub nfe_used: usize,
    /// Denoiser calls summed over all patch trajectories.
    pub total_calls: usize,
    pub per_patch_seams: f64,
    pub seeds: SeedRecord,
}

fn check_inputs(low: &Volume3D, mr: Option<&Volume3D>) -> Result<()> {
    low.validate()?;
    if low.domain != Domain::Normalized {
        return Err(CsrdError::Domain(format!("'{}' must be normalized before denoising", low.name)));
    }
    if let Some(mr) = mr {
        low.ensure_same_grid(mr)?;
    }
    Ok(())
}

fn sample_member<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    low: &Volume3D,
    mr: Option<&Volume3D>,
    plan: Option<&TilingPlan>,
    cfg: &SamplerConfig,
    member: u64,
) -> Result<DenoiseResult> {
    check_inputs(low, mr)?;
    cfg.validate()?;
    let whole = TilingPlan::whole(low.shape());
    let plan = plan.unwrap_or(&whole);
    if plan.shape != low.shape() {
        return Err(CsrdError::Config(format!(
            "tiling plan is for {} but the volume is {}",
            plan.shape,
            low.shape()
        )));
    }
    let patch_seeds: Vec<u64> = (0..plan.regions.len() as u64)
        .map(|p| derive_seed(cfg.seed, &[member, p]))
        .collect();
    let trajectories: Vec<(PatchRegion, Grid<f64>, usize)> = plan
        .regions
        .par_iter()
        .enumerate()
        .map(|(p, region)| {
            let low_p = extract_patch(&low.grid, region)?;
            let mr_p = mr.map(|m| extract_patch(&m.grid, region)).transpose()?;
            let cond = Condition::new(&low_p.data, mr_p.as_ref().map(|g| g.data.as_slice()), *region)?;
            let mut rng = stream(cfg.seed, &[member, p as u64]);
            let (r, calls) = integrate(denoiser, &cond, cfg, sched, &mut rng)?;
            Ok((*region, Grid::from_vec(region.size, r)?, calls))
        })
        .collect::<Result<_>>()?;
    let total_calls = trajectories.iter().map(|t| t.2).sum();
    let patches: Vec<(PatchRegion, Grid<f64>)> = trajectories.into_iter().map(|(r, g, _)| (r, g)).collect();
    let stitched = stitch(&patches, plan)?;
    let scale = denoiser.residual_scale();
    let r = ResidualVolume::from_grid(stitched.grid.map(|v| v * scale), low)?;
    let denoised = apply_residual(low, &r)?;
    // Recompute the residual from the rounded volume so that
    // `denoised + residual == low` holds exactly.
    let exact: Vec<f64> = low
        .data()
        .iter()
        .zip(denoised.data())
        .map(|(&l, &d)| f64::from(l) - f64::from(d))
        .collect();
    let residual = ResidualVolume::from_grid(Grid::from_vec(low.shape(), exact)?, low)?;
    Ok(DenoiseResult {
        residual,
        denoised,
        nfe_used: cfg.nfe(),
        total_calls,
        per_patch_seams: stitched.seam_rms * scale,
        seeds: SeedRecord {
            run_seed: cfg.seed,
            member,
            patch_seeds,
        },
    })
}

/// Samples a residual for `low` and returns the denoised volume. Without a
/// plan the whole volume is one trajectory; with a plan every patch is
/// integrated independently under its own conditioning restriction and the
/// final residuals are blended.
pub fn sample_residual<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    low: &Volume3D,
    mr: Option<&Volume3D>,
    plan: Option<&TilingPlan>,
    cfg: &SamplerConfig,
) -> Result<DenoiseResult> {
    sample_member(denoiser, sched, low, mr, plan, cfg, 0)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<DenoiseResult>,
    /// Per-voxel sample standard deviation across the denoised members.
    pub std: Volume3D,
}

/// `n_realizations` members with seed paths `(cfg.seed, member)`.
pub fn sample_ensemble<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    low: &Volume3D,
    mr: Option<&Volume3D>,
    plan: Option<&TilingPlan>,
    cfg: &SamplerConfig,
    n_realizations: usize,
) -> Result<Ensemble> {
    if n_realizations < 2 {
        return Err(CsrdError::Config(format!(
            "an ensemble needs at least 2 realizations, got {n_realizations}"
        )));
    }
    let members = (0..n_realizations as u64)
        .into_par_iter()
        .map(|m| sample_member(denoiser, sched, low, mr, plan, cfg, m))
        .collect::<Result<Vec<_>>>()?;
    finish_ensemble(members, low)
}

/// One member per entry of `seeds`, each using that run seed.
pub fn sample_ensemble_with_seeds<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    low: &Volume3D,
    mr: Option<&Volume3D>,
    plan: Option<&TilingPlan>,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<Ensemble> {
    if seeds.len() < 2 {
        return Err(CsrdError::Config(format!(
            "an ensemble needs at least 2 realizations, got {}",
            seeds.len()
        )));
    }
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SamplerConfig { seed, ..cfg.clone() };
            sample_member(denoiser, sched, low, mr, plan, &cfg, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    finish_ensemble(members, low)
}

fn finish_ensemble(members: Vec<DenoiseResult>, low: &Volume3D) -> Result<Ensemble> {
    let n = members.len() as f64;
    let std = Grid::from_fn(low.shape(), |x, y, z| {
        let i = low.shape().index(x, y, z);
        let vals = members.iter().map(|m| f64::from(m.denoised.data()[i]));
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() as f32
    });
    let std = Volume3D::new(std, low.spacing, Domain::Normalized, format!("{}-ensemble-std", low.name))?;
    Ok(Ensemble { members, std })
}
