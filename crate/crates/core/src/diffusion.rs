//! Noise schedule, denoiser preconditioning, the score identity and the
//! denoising score-matching objectives.
//!
//! All quantities here act on standardized residuals: the data residual
//! divided by the dataset residual standard deviation.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::volumes::{extract_patch, Grid, PatchRegion, Shape3};
use crate::{CsrdError, Result};

/// Noise-level constants of the diffusion process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// Input/output scalings wrapping the raw network `F`:
/// `D(x; σ) = c_skip·x + c_out·F(c_in·x, c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.rho > 0.0
            && self.sigma_data > 0.0
            && self.p_std > 0.0
            && self.sigma_max.is_finite()
            && self.p_mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CsrdError::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    pub fn precond(&self, sigma: f64) -> Result<Precond> {
        check_sigma(sigma)?;
        let sd2 = self.sigma_data * self.sigma_data;
        let total = sigma * sigma + sd2;
        Ok(Precond {
            c_skip: sd2 / total,
            c_out: sigma * self.sigma_data / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
            c_noise: sigma.ln() / 4.0,
        })
    }

    /// Loss weight `λ(σ) = (σ² + σ_d²) / (σ·σ_d)²`.
    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        check_sigma(sigma)?;
        let sd = self.sigma_data;
        Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
    }

    /// Log-normal training noise level.
    pub fn sample_training_sigma(&self, rng: &mut impl Rng) -> f64 {
        let normal = Normal::new(self.p_mean, self.p_std).expect("validated p_std");
        normal.sample(rng).exp()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CsrdError::Domain(format!("noise level must be positive and finite, got {sigma}")))
    }
}

/// Noise level as a function of ODE time; the identity schedule.
pub fn sigma_of_t(t: f64) -> Result<f64> {
    if t >= 0.0 {
        Ok(t)
    } else {
        Err(CsrdError::Domain(format!("time must be non-negative, got {t}")))
    }
}

/// Time derivative of [`sigma_of_t`].
pub fn sigma_dot(_t: f64) -> f64 {
    1.0
}

/// ρ-spaced noise levels from `sigma_max` down to `sigma_min` followed by a
/// terminal 0; `n_steps + 1` entries.
pub fn discretize_sigmas(n_steps: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(CsrdError::Config(format!("need at least 2 steps, got {n_steps}")));
    }
    sched.validate()?;
    let inv = 1.0 / sched.rho;
    let (hi, lo) = (sched.sigma_max.powf(inv), sched.sigma_min.powf(inv));
    let last = (n_steps - 1) as f64;
    let mut out: Vec<f64> = (0..n_steps)
        .map(|i| match i {
            0 => sched.sigma_max,
            i if i == n_steps - 1 => sched.sigma_min,
            i => (hi + i as f64 / last * (lo - hi)).powf(sched.rho),
        })
        .collect();
    out.push(0.0);
    Ok(out)
}

/// Applies the output scalings to a raw network output.
pub fn precondition(raw: &[f64], noisy: &[f64], sigma: f64, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if raw.len() != noisy.len() {
        return Err(CsrdError::Dimension(format!(
            "raw output has {} values, noisy input {}",
            raw.len(),
            noisy.len()
        )));
    }
    let p = sched.precond(sigma)?;
    let out: Vec<f64> = raw.iter().zip(noisy).map(|(f, x)| p.c_skip * x + p.c_out * f).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CsrdError::Numeric(format!("non-finite preconditioned output at sigma {sigma}")));
    }
    Ok(out)
}

/// `∇_r log p(r; σ) = (D(r; σ) − r) / σ²`.
pub fn score_from_denoiser(denoised: &[f64], noisy: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if denoised.len() != noisy.len() {
        return Err(CsrdError::Dimension(format!(
            "denoised has {} values, noisy {}",
            denoised.len(),
            noisy.len()
        )));
    }
    let s2 = sigma * sigma;
    Ok(denoised.iter().zip(noisy).map(|(d, r)| (d - r) / s2).collect())
}

/// Conditioning inputs for one region: the low-dose and optional MR values
/// restricted to `region`, plus the region itself (for coordinates).
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    pub low: &'a [f32],
    pub mr: Option<&'a [f32]>,
    pub region: PatchRegion,
}

impl<'a> Condition<'a> {
    pub fn new(low: &'a [f32], mr: Option<&'a [f32]>, region: PatchRegion) -> Result<Self> {
        let n = region.size.len();
        if low.len() != n || mr.is_some_and(|m| m.len() != n) {
            return Err(CsrdError::Dimension(format!(
                "conditioning arrays do not match region size {}",
                region.size
            )));
        }
        Ok(Self { low, mr, region })
    }

    pub fn shape(&self) -> Shape3 {
        self.region.size
    }
}

/// A (possibly learned) denoiser `D(x; σ, cond)` on standardized residuals.
pub trait Denoiser: Sync {
    fn denoise(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> Result<Vec<f64>>;

    /// Multiplier mapping standardized residuals back to data units.
    fn residual_scale(&self) -> f64 {
        1.0
    }
}

/// Vector-Jacobian product closure: maps `∂L/∂D` to `∂L/∂θ`.
pub type Pullback<'a> = Box<dyn FnOnce(&[f64]) -> Vec<f64> + 'a>;

/// A denoiser whose output can be differentiated with respect to its
/// parameters.
pub trait Differentiable: Denoiser {
    fn n_params(&self) -> usize;
    fn denoise_with_pullback(&self, noisy: &[f64], sigma: f64, cond: &Condition) -> Result<(Vec<f64>, Pullback<'_>)>;
}

/// One evaluated term of the score-matching objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sigma: f64,
    /// `λ(σ)·mean[(D − y)²]` over the patch.
    pub per_patch_loss: f64,
    pub weight: f64,
    pub region: PatchRegion,
}

fn weighted_loss(denoised: &[f64], target: &[f64], sigma: f64, cond: &Condition, sched: &NoiseSchedule) -> Result<LossRecord> {
    if let Some(i) = denoised.iter().position(|v| !v.is_finite()) {
        return Err(CsrdError::Numeric(format!(
            "non-finite denoiser output at voxel {i}, sigma {sigma}, region origin {:?} size {}",
            cond.region.origin, cond.region.size
        )));
    }
    let weight = sched.loss_weight(sigma)?;
    let mse = denoised.iter().zip(target).map(|(d, y)| (d - y).powi(2)).sum::<f64>() / target.len() as f64;
    Ok(LossRecord {
        sigma,
        per_patch_loss: weight * mse,
        weight,
        region: cond.region,
    })
}

fn noised(target: &[f64], noise: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if target.len() != noise.len() {
        return Err(CsrdError::Dimension(format!(
            "target has {} values, noise draw {}",
            target.len(),
            noise.len()
        )));
    }
    Ok(target.iter().zip(noise).map(|(y, e)| y + sigma * e).collect())
}

/// Denoising score-matching loss on one patch. `noise_draw` holds standard
/// normal values; the applied perturbation is `σ·noise_draw`.
pub fn dsm_loss<D: Denoiser + ?Sized>(
    model: &D,
    target: &[f64],
    cond: &Condition,
    sigma: f64,
    noise_draw: &[f64],
    sched: &NoiseSchedule,
) -> Result<LossRecord> {
    let noisy = noised(target, noise_draw, sigma)?;
    let denoised = model.denoise(&noisy, sigma, cond)?;
    weighted_loss(&denoised, target, sigma, cond, sched)
}

/// [`dsm_loss`] together with its gradient with respect to the model
/// parameters.
pub fn dsm_loss_grad<D: Differentiable + ?Sized>(
    model: &D,
    target: &[f64],
    cond: &Condition,
    sigma: f64,
    noise_draw: &[f64],
    sched: &NoiseSchedule,
) -> Result<(LossRecord, Vec<f64>)> {
    let noisy = noised(target, noise_draw, sigma)?;
    let (denoised, pullback) = model.denoise_with_pullback(&noisy, sigma, cond)?;
    let record = weighted_loss(&denoised, target, sigma, cond, sched)?;
    let k = 2.0 * record.weight / target.len() as f64;
    let upstream: Vec<f64> = denoised.iter().zip(target).map(|(d, y)| k * (d - y)).collect();
    Ok((record, pullback(&upstream)))
}

/// A co-registered training triple on one grid: standardized residual,
/// normalized low-dose volume and optional MR volume.
#[derive(Debug, Clone)]
pub struct TrainingTriple {
    pub residual: Grid<f64>,
    pub low: Grid<f32>,
    pub mr: Option<Grid<f32>>,
}

impl TrainingTriple {
    pub fn new(residual: Grid<f64>, low: Grid<f32>, mr: Option<Grid<f32>>) -> Result<Self> {
        if residual.shape != low.shape || mr.as_ref().is_some_and(|m| m.shape != low.shape) {
            return Err(CsrdError::Dimension("training triple volumes are not co-registered".into()));
        }
        Ok(Self { residual, low, mr })
    }

    pub fn shape(&self) -> Shape3 {
        self.low.shape
    }

    /// Residual target and conditioning restricted to `region`.
    pub fn patch(&self, region: &PatchRegion) -> Result<PatchData> {
        Ok(PatchData {
            target: extract_patch(&self.residual, region)?.data,
            low: extract_patch(&self.low, region)?.data,
            mr: self.mr.as_ref().map(|m| extract_patch(m, region)).transpose()?.map(|g| g.data),
            region: *region,
        })
    }
}

/// Owned patch restriction of a [`TrainingTriple`].
#[derive(Debug, Clone)]
pub struct PatchData {
    pub target: Vec<f64>,
    pub low: Vec<f32>,
    pub mr: Option<Vec<f32>>,
    pub region: PatchRegion,
}

impl PatchData {
    pub fn condition(&self) -> Condition<'_> {
        Condition {
            low: &self.low,
            mr: self.mr.as_deref(),
            region: self.region,
        }
    }
}

/// Uniformly sampled patch origin over all valid positions.
pub fn sample_region(shape: Shape3, patch: Shape3, rng: &mut impl Rng) -> Result<PatchRegion> {
    let mut origin = [0; 3];
    for a in 0..3 {
        if patch.0[a] > shape.0[a] || patch.0[a] == 0 {
            return Err(CsrdError::Tiling(format!("patch {patch} does not fit volume {shape}")));
        }
        origin[a] = rng.random_range(0..=shape.0[a] - patch.0[a]);
    }
    PatchRegion::new(origin, patch, shape)
}

/// How [`patchwise_loss`] chooses noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaDraw {
    /// Log-normal draws per patch.
    Sampled,
    Fixed(f64),
}

/// Aggregate of [`dsm_loss`] over randomly placed patches.
#[derive(Debug, Clone)]
pub struct PatchwiseLoss {
    pub records: Vec<LossRecord>,
    /// Sum of per-patch losses.
    pub total: f64,
}

/// Samples `n_patches` regions of size `patch` uniformly over valid
/// origins, each with its own noise level and noise draw, and sums the
/// per-patch losses.
pub fn patchwise_loss<D: Denoiser + ?Sized>(
    model: &D,
    triple: &TrainingTriple,
    patch: Shape3,
    n_patches: usize,
    sigma: SigmaDraw,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<PatchwiseLoss> {
    if n_patches == 0 {
        return Err(CsrdError::Config("need at least one patch per step".into()));
    }
    let mut records = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let region = sample_region(triple.shape(), patch, rng)?;
        let s = match sigma {
            SigmaDraw::Sampled => sched.sample_training_sigma(rng),
            SigmaDraw::Fixed(s) => s,
        };
        let noise = standard_normal_vec(patch.len(), rng);
        let data = triple.patch(&region)?;
        records.push(dsm_loss(model, &data.target, &data.condition(), s, &noise, sched)?);
    }
    let total = records.iter().map(|r| r.per_patch_loss).sum();
    Ok(PatchwiseLoss { records, total })
}

pub fn standard_normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default();
        for n in [2, 3, 10, 100] {
            let g = discretize_sigmas(n, &s).unwrap();
            assert_eq!(g.len(), n + 1);
            assert_eq!(g[0], 80.0);
            assert_eq!(g[n - 1], 0.002);
            assert_eq!(g[n], 0.0);
            assert!(g.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(discretize_sigmas(1, &s).is_err());
    }

    #[test]
    fn sigma_of_t_is_identity() {
        assert_eq!(sigma_of_t(0.0).unwrap(), 0.0);
        assert_eq!(sigma_of_t(80.0).unwrap(), 80.0);
        assert!(sigma_of_t(-1.0).is_err());
        // σ̇σ against a finite difference of σ²/2 at t = 2.
        let h = 1e-5;
        let half_sq = |t: f64| 0.5 * sigma_of_t(t).unwrap().powi(2);
        let fd = (half_sq(2.0 + h) - half_sq(2.0 - h)) / (2.0 * h);
        assert!((fd - sigma_dot(2.0) * sigma_of_t(2.0).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn precond_coefficients() {
        let s = NoiseSchedule::default();
        let p = s.precond(0.5).unwrap();
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((p.c_in - 1.0 / (0.5 * 2f64.sqrt())).abs() < 1e-12);
        let tiny = s.precond(0.002).unwrap();
        assert!(tiny.c_skip > 0.9999 && tiny.c_out < 0.0021);
        assert!(s.precond(0.0).is_err());
        for i in 0..100 {
            let sigma = 0.002 * (80.0f64 / 0.002).powf(i as f64 / 99.0);
            let p = s.precond(sigma).unwrap();
            assert!((p.c_in.powi(2) * (sigma * sigma + 0.25) - 1.0).abs() < 1e-12);
            let w = s.loss_weight(sigma).unwrap();
            assert!((w * p.c_out.powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_sigma_moments() {
        let s = NoiseSchedule::default();
        let mut rng = stream(3, &[]);
        let logs: Vec<f64> = (0..100_000).map(|_| s.sample_training_sigma(&mut rng).ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
        assert!((mean - -1.2).abs() < 0.012, "mean {mean}");
        assert!((sd - 1.2).abs() < 0.024, "sd {sd}");
        let a = s.sample_training_sigma(&mut stream(4, &[]));
        let b = s.sample_training_sigma(&mut stream(4, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn score_fixed_point_and_scalar() {
        assert_eq!(score_from_denoiser(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(score_from_denoiser(&[0.0], &[1.0], 1.0).unwrap(), vec![-1.0]);
        assert!(score_from_denoiser(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn region_sampling_stays_inside() {
        let mut rng = stream(9, &[]);
        let shape = Shape3::new(10, 7, 5);
        for _ in 0..500 {
            let r = sample_region(shape, Shape3::new(4, 7, 2), &mut rng).unwrap();
            assert!(r.origin[0] <= 6 && r.origin[1] == 0 && r.origin[2] <= 3);
        }
        assert!(sample_region(shape, Shape3::cube(8), &mut rng).is_err());
    }
}
