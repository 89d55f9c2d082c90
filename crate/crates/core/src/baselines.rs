//! Total-variation denoising baseline.
//!
//! Solves `min_u 0.5 * ||u - f||^2 + weight * TV(u)` with isotropic 3D TV
//! by Chambolle's dual projection, using forward differences with a zero
//! gradient across the far boundary.

use serde::{Deserialize, Serialize};

use crate::metrics::psnr;
use crate::volumes::{Grid, Shape3, Volume3D};
use crate::{CsrdError, Result};

/// Weights searched by [`tv_grid_search`] when no grid is given.
pub const DEFAULT_TV_GRID: [f64; 8] = [0.01, 0.02, 0.03, 0.05, 0.08, 0.12, 0.2, 0.3];

/// Dual step size: 1/(4d) in d = 3 dimensions, the bound under which the
/// projection iteration converges.
const TAU: f64 = 1.0 / 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    pub weight: f64,
    pub n_iters: usize,
    /// Stop once the relative change of the dual field falls below this.
    pub tol: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            weight: 0.05,
            n_iters: 200,
            tol: 1e-5,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(CsrdError::Config(format!("TV weight must be >= 0, got {}", self.weight)));
        }
        if self.n_iters == 0 {
            return Err(CsrdError::Config("TV needs at least one iteration".into()));
        }
        Ok(())
    }
}

fn gradient(u: &[f64], s: Shape3, g: &mut [[f64; 3]]) {
    let (nx, ny, nz) = (s.nx(), s.ny(), s.nz());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = s.index(x, y, z);
                g[i] = [
                    if x + 1 < nx { u[i + 1] - u[i] } else { 0.0 },
                    if y + 1 < ny { u[i + nx] - u[i] } else { 0.0 },
                    if z + 1 < nz { u[i + nx * ny] - u[i] } else { 0.0 },
                ];
            }
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(p: &[[f64; 3]], s: Shape3, out: &mut [f64]) {
    let (nx, ny, nz) = (s.nx(), s.ny(), s.nz());
    let strides = [1, nx, nx * ny];
    let dims = [nx, ny, nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = s.index(x, y, z);
                let c = [x, y, z];
                let mut d = 0.0;
                for a in 0..3 {
                    if c[a] + 1 < dims[a] {
                        d += p[i][a];
                    }
                    if c[a] > 0 {
                        d -= p[i - strides[a]][a];
                    }
                }
                out[i] = d;
            }
        }
    }
}

/// Isotropic total variation of `u`.
pub fn total_variation(u: &[f64], s: Shape3) -> f64 {
    let mut g = vec![[0.0; 3]; u.len()];
    gradient(u, s, &mut g);
    g.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).sum()
}

/// Outcome of a TV solve.
#[derive(Debug, Clone)]
pub struct TvResult {
    pub denoised: Grid<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `0.5 * ||u - f||^2 + weight * TV(u)`.
pub fn tv_objective(u: &[f64], f: &[f64], s: Shape3, weight: f64) -> f64 {
    0.5 * u.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + weight * total_variation(u, s)
}

pub fn tv_denoise_grid(f: &Grid<f64>, cfg: &TvConfig) -> Result<TvResult> {
    solve(f, cfg, |_| {})
}

/// The solver, calling `on_iter` with the primal iterate after every step.
fn solve(f: &Grid<f64>, cfg: &TvConfig, mut on_iter: impl FnMut(&[f64])) -> Result<TvResult> {
    cfg.validate()?;
    let s = f.shape;
    let n = s.len();
    if cfg.weight == 0.0 {
        return Ok(TvResult {
            denoised: f.clone(),
            iterations: 0,
            converged: true,
        });
    }
    let lam = cfg.weight;
    let mut p = vec![[0.0; 3]; n];
    let mut div = vec![0.0; n];
    let mut g = vec![[0.0; 3]; n];
    let mut u = f.data.clone();
    let mut v = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.n_iters {
        iterations = it + 1;
        for i in 0..n {
            v[i] = div[i] - f.data[i] / lam;
        }
        gradient(&v, s, &mut g);
        let (mut delta, mut norm_p) = (0.0, 0.0);
        for (pi, gi) in p.iter_mut().zip(&g) {
            let norm = (gi[0] * gi[0] + gi[1] * gi[1] + gi[2] * gi[2]).sqrt();
            let d = 1.0 + TAU * norm;
            for a in 0..3 {
                let next = (pi[a] + TAU * gi[a]) / d;
                delta += (next - pi[a]).powi(2);
                norm_p += next * next;
                pi[a] = next;
            }
        }
        divergence(&p, s, &mut div);
        for i in 0..n {
            u[i] = f.data[i] - lam * div[i];
        }
        on_iter(&u);
        if delta.sqrt() <= cfg.tol * norm_p.sqrt().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(TvResult {
        denoised: Grid { shape: s, data: u },
        iterations,
        converged,
    })
}

pub fn tv_denoise(low: &Volume3D, cfg: &TvConfig) -> Result<Volume3D> {
    let r = tv_denoise_grid(&low.grid.to_f64(), cfg)?;
    if !r.converged {
        log::debug!("TV on '{}' stopped after {} iterations without reaching tol", low.name, r.iterations);
    }
    Volume3D::new(r.denoised.to_f32(), low.spacing, low.domain, format!("{}-tv", low.name))
}

/// Mean PSNR per weight over `(low, normal)` pairs and the weight with the
/// highest mean.
pub fn tv_grid_search(pairs: &[(Volume3D, Volume3D)], grid: &[f64], base: &TvConfig) -> Result<(f64, Vec<(f64, f64)>)> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(CsrdError::Config("TV grid search needs pairs and weights".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &w in grid {
        let cfg = TvConfig { weight: w, ..base.clone() };
        let mut total = 0.0;
        for (low, nor) in pairs {
            total += psnr(nor, &tv_denoise(low, &cfg)?, None, None)?;
        }
        table.push((w, total / pairs.len() as f64));
    }
    let best = table.iter().copied().fold((f64::NAN, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
    Ok((best.0, table))
}
