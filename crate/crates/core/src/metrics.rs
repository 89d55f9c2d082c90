//! Image-quality metrics: MAE, PSNR, slicewise SSIM, Haralick texture
//! distance and a deep-feature perceptual distance.
//!
//! MAE, PSNR and the Haralick distance are computed in 3D; SSIM and the
//! perceptual distance on axial (xy) slices, averaged over slices.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::volumes::{Grid, Volume3D};
use crate::{CsrdError, Result};

fn check_pair(reference: &Volume3D, test: &Volume3D) -> Result<()> {
    if reference.shape() != test.shape() {
        return Err(CsrdError::Dimension(format!(
            "'{}' is {} but '{}' is {}",
            reference.name,
            reference.shape(),
            test.name,
            test.shape()
        )));
    }
    Ok(())
}

fn check_mask(reference: &Volume3D, mask: Option<&Grid<bool>>) -> Result<()> {
    if let Some(m) = mask {
        if m.shape != reference.shape() {
            return Err(CsrdError::Dimension(format!(
                "mask is {} but volumes are {}",
                m.shape,
                reference.shape()
            )));
        }
        if !m.data.iter().any(|&b| b) {
            return Err(CsrdError::Dimension("mask selects no voxels".into()));
        }
    }
    Ok(())
}

fn masked_pairs<'a>(
    reference: &'a Volume3D,
    test: &'a Volume3D,
    mask: Option<&'a Grid<bool>>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    reference
        .data()
        .iter()
        .zip(test.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data[*i]))
        .map(|(_, (&a, &b))| (f64::from(a), f64::from(b)))
}

/// Mean absolute error over the mask (default: every voxel).
pub fn mae(reference: &Volume3D, test: &Volume3D, mask: Option<&Grid<bool>>) -> Result<f64> {
    check_pair(reference, test)?;
    check_mask(reference, mask)?;
    let (sum, n) = masked_pairs(reference, test, mask).fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b).abs(), n + 1));
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB; `peak` defaults to the reference
/// maximum. Identical inputs give `+∞`.
pub fn psnr(reference: &Volume3D, test: &Volume3D, peak: Option<f64>, mask: Option<&Grid<bool>>) -> Result<f64> {
    check_pair(reference, test)?;
    check_mask(reference, mask)?;
    let peak = peak.unwrap_or_else(|| reference.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v))));
    if !(peak > 0.0) {
        return Err(CsrdError::Domain(format!("PSNR peak must be positive, got {peak}")));
    }
    let (sum, n) = masked_pairs(reference, test, mask).fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b).powi(2), n + 1));
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; defaults to the reference's max − min (1 if flat).
    pub data_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `ny x nx` plane.
fn filter_valid(plane: &[f64], nx: usize, ny: usize, k: &[f64]) -> Vec<f64> {
    let m = k.len();
    let (ox, oy) = (nx - m + 1, ny - m + 1);
    let mut rows = vec![0.0; ny * ox];
    for y in 0..ny {
        for x in 0..ox {
            rows[y * ox + x] = (0..m).map(|i| k[i] * plane[y * nx + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oy * ox];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..m).map(|i| k[i] * rows[(y + i) * ox + x]).sum();
        }
    }
    out
}

/// Mean SSIM over axial slices, each the mean of its Gaussian-windowed
/// local SSIM map over positions where the window fits.
pub fn ssim(reference: &Volume3D, test: &Volume3D, cfg: &SsimConfig) -> Result<f64> {
    check_pair(reference, test)?;
    let s = reference.shape();
    if s.nx() < cfg.window || s.ny() < cfg.window {
        return Err(CsrdError::Dimension(format!(
            "slices of {s} are smaller than the {} voxel SSIM window",
            cfg.window
        )));
    }
    let range = cfg.data_range.unwrap_or_else(|| {
        let (lo, hi) = reference
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v.into()), hi.max(v.into())));
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    });
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let plane = s.nx() * s.ny();
    let mut total = 0.0;
    for z in 0..s.nz() {
        let a: Vec<f64> = reference.data()[z * plane..(z + 1) * plane].iter().map(|&v| v.into()).collect();
        let b: Vec<f64> = test.data()[z * plane..(z + 1) * plane].iter().map(|&v| v.into()).collect();
        let f = |v: &[f64]| filter_valid(v, s.nx(), s.ny(), &k);
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let (ma, mb) = (f(&a), f(&b));
        let (saa, sbb, sab) = (f(&prod(&a, &a)), f(&prod(&b, &b)), f(&prod(&a, &b)));
        let n = ma.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ua, ub) = (ma[i], mb[i]);
            let va = saa[i] - ua * ua;
            let vb = sbb[i] - ub * ub;
            let cov = sab[i] - ua * ub;
            acc += ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / s.nz() as f64)
}

/// The thirteen classical co-occurrence texture features, in order.
pub const HARALICK_FEATURES: [&str; 13] = [
    "angular_second_moment",
    "contrast",
    "correlation",
    "variance",
    "inverse_difference_moment",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "information_correlation_1",
    "information_correlation_2",
];

/// Denominator guard of the relative feature differences.
pub const HARALICK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HaralickConfig {
    pub n_gray_levels: usize,
    pub offsets: Vec<[i32; 3]>,
    pub symmetric: bool,
}

impl Default for HaralickConfig {
    fn default() -> Self {
        Self {
            n_gray_levels: 64,
            offsets: unit_offsets(),
            symmetric: true,
        }
    }
}

/// The 13 unit displacements in 3D that are unique up to sign.
pub fn unit_offsets() -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let o = [dx, dy, dz];
                // Keep the first nonzero component positive.
                if o.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0) {
                    out.push(o);
                }
            }
        }
    }
    out
}

impl HaralickConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gray_levels < 2 {
            return Err(CsrdError::Config("need at least 2 gray levels".into()));
        }
        for (i, o) in self.offsets.iter().enumerate() {
            if *o == [0, 0, 0] {
                return Err(CsrdError::Config("zero co-occurrence offset".into()));
            }
            if self.symmetric && self.offsets[..i].iter().any(|p| p.iter().zip(o).all(|(a, b)| *a == -*b)) {
                return Err(CsrdError::Config(format!("offset {o:?} is antiparallel to an earlier one")));
            }
        }
        Ok(())
    }
}

/// Gray levels of `vol` over `[lo, hi]`, clamped to `[0, levels − 1]`.
pub fn quantize(vol: &Volume3D, lo: f64, hi: f64, levels: usize) -> Vec<usize> {
    let span = hi - lo;
    vol.data()
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                return 0;
            }
            let q = ((f64::from(v) - lo) / span * levels as f64).floor();
            q.clamp(0.0, (levels - 1) as f64) as usize
        })
        .collect()
}

/// Normalized co-occurrence matrix for one displacement.
pub fn glcm(levels_of: &[usize], shape: crate::volumes::Shape3, offset: [i32; 3], levels: usize, symmetric: bool) -> Vec<f64> {
    let mut m = vec![0.0; levels * levels];
    let mut count = 0.0;
    let dims = [shape.nx() as i64, shape.ny() as i64, shape.nz() as i64];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (qx, qy, qz) = (x + offset[0] as i64, y + offset[1] as i64, z + offset[2] as i64);
                if qx < 0 || qy < 0 || qz < 0 || qx >= dims[0] || qy >= dims[1] || qz >= dims[2] {
                    continue;
                }
                let a = levels_of[shape.index(x as usize, y as usize, z as usize)];
                let b = levels_of[shape.index(qx as usize, qy as usize, qz as usize)];
                m[a * levels + b] += 1.0;
                count += 1.0;
                if symmetric {
                    m[b * levels + a] += 1.0;
                    count += 1.0;
                }
            }
        }
    }
    if count > 0.0 {
        for v in &mut m {
            *v /= count;
        }
    }
    m
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// The 13 features of a normalized co-occurrence matrix.
pub fn haralick_features(p: &[f64], levels: usize) -> [f64; 13] {
    let l = levels;
    let at = |i: usize, j: usize| p[i * l + j];
    let px: Vec<f64> = (0..l).map(|i| (0..l).map(|j| at(i, j)).sum()).collect();
    let py: Vec<f64> = (0..l).map(|j| (0..l).map(|i| at(i, j)).sum()).collect();
    let mean = |m: &[f64]| m.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>();
    let (mx, my) = (mean(&px), mean(&py));
    let sd = |m: &[f64], mu: f64| m.iter().enumerate().map(|(i, v)| (i as f64 - mu).powi(2) * v).sum::<f64>().sqrt();
    let (sx, sy) = (sd(&px, mx), sd(&py, my));
    let mut sum_p = vec![0.0; 2 * l - 1];
    let mut diff_p = vec![0.0; l];
    let (mut asm, mut contrast, mut cross, mut variance, mut idm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = at(i, j);
            if v == 0.0 {
                continue;
            }
            let d = i.abs_diff(j);
            asm += v * v;
            contrast += (d * d) as f64 * v;
            cross += (i * j) as f64 * v;
            variance += (i as f64 - mx).powi(2) * v;
            idm += v / (1.0 + (d * d) as f64);
            sum_p[i + j] += v;
            diff_p[d] += v;
        }
    }
    let correlation = if sx * sy > 0.0 { (cross - mx * my) / (sx * sy) } else { 0.0 };
    let sum_avg: f64 = sum_p.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
    let sum_var: f64 = sum_p.iter().enumerate().map(|(k, v)| (k as f64 - sum_avg).powi(2) * v).sum();
    let sum_ent = entropy(sum_p.iter().copied());
    let hxy = entropy(p.iter().copied());
    let diff_mean: f64 = diff_p.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
    let diff_var: f64 = diff_p.iter().enumerate().map(|(k, v)| (k as f64 - diff_mean).powi(2) * v).sum();
    let diff_ent = entropy(diff_p.iter().copied());
    let (hx, hy) = (entropy(px.iter().copied()), entropy(py.iter().copied()));
    let (mut hxy1, mut hxy2) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let q = px[i] * py[j];
            if q > 0.0 {
                hxy1 -= at(i, j) * q.log2();
                hxy2 -= q * q.log2();
            }
        }
    }
    let hmax = hx.max(hy);
    let imc1 = if hmax > 0.0 { (hxy - hxy1) / hmax } else { 0.0 };
    let imc2 = (1.0 - (-2.0 * (hxy2 - hxy)).exp()).max(0.0).sqrt();
    [
        asm, contrast, correlation, variance, idm, sum_avg, sum_var, sum_ent, hxy, diff_var, diff_ent, imc1, imc2,
    ]
}

/// Offset-averaged features with gray levels fixed over `[lo, hi]`.
pub fn texture_features(vol: &Volume3D, lo: f64, hi: f64, cfg: &HaralickConfig) -> Result<[f64; 13]> {
    cfg.validate()?;
    let q = quantize(vol, lo, hi, cfg.n_gray_levels);
    let mut acc = [0.0; 13];
    for &o in &cfg.offsets {
        let m = glcm(&q, vol.shape(), o, cfg.n_gray_levels, cfg.symmetric);
        for (a, f) in acc.iter_mut().zip(haralick_features(&m, cfg.n_gray_levels)) {
            *a += f;
        }
    }
    for a in &mut acc {
        *a /= cfg.offsets.len() as f64;
    }
    Ok(acc)
}

/// Haralick feature distance plus the names of features whose reference
/// value hit the denominator guard.
pub fn haralick_distance_flagged(reference: &Volume3D, test: &Volume3D, cfg: &HaralickConfig) -> Result<(f64, Vec<String>)> {
    check_pair(reference, test)?;
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v.into()), hi.max(v.into())));
    let hr = texture_features(reference, lo, hi, cfg)?;
    let ht = texture_features(test, lo, hi, cfg)?;
    let mut flagged = Vec::new();
    let mut sum = 0.0;
    for (k, (r, t)) in hr.iter().zip(&ht).enumerate() {
        let denom = if r.abs() < HARALICK_EPS {
            flagged.push(HARALICK_FEATURES[k].to_string());
            HARALICK_EPS
        } else {
            r.abs()
        };
        sum += ((t - r) / denom).powi(2);
    }
    Ok((sum.sqrt(), flagged))
}

pub fn haralick_distance(reference: &Volume3D, test: &Volume3D, cfg: &HaralickConfig) -> Result<f64> {
    haralick_distance_flagged(reference, test, cfg).map(|(d, _)| d)
}

/// A 2D slice feature extractor for the perceptual distance.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &str;
    /// Activations of every feature layer for one `ny x nx` slice.
    fn features(&self, slice: &[f64], nx: usize, ny: usize) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone)]
struct Conv2d {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Frozen random 5-layer strided convolution stack (3x3 kernels, stride 2,
/// ReLU) over a slice replicated to 3 channels.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    layers: Vec<Conv2d>,
}

/// Seed of the built-in extractor's weights.
pub const EXTRACTOR_SEED: u64 = 0x5EED_F00D;

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let widths = [3, 8, 16, 32, 32, 32];
        let mut rng = stream(seed, &[]);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = (0..cout * cin * 9)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                let bias = (0..cout).map(|_| rng.random_range(-0.05..0.05)).collect();
                Conv2d { cin, cout, weight, bias }
            })
            .collect();
        Self { layers }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv5"
    }

    fn features(&self, slice: &[f64], nx: usize, ny: usize) -> Vec<Vec<f64>> {
        let mut x: Vec<f64> = (0..3).flat_map(|_| slice.iter().copied()).collect();
        let (mut w, mut h) = (nx, ny);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
            let mut y = vec![0.0; l.cout * ow * oh];
            for o in 0..l.cout {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = l.bias[o];
                        for i in 0..l.cin {
                            for ky in 0..3 {
                                let sy = (2 * yy + ky) as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = (2 * xx + kx) as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += l.weight[((o * l.cin + i) * 3 + ky) * 3 + kx]
                                        * x[(i * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        y[(o * oh + yy) * ow + xx] = acc.max(0.0);
                    }
                }
            }
            out.push(y.clone());
            x = y;
            w = ow;
            h = oh;
        }
        out
    }
}

/// Mean over axial slices and feature layers of the mean squared feature
/// difference.
pub fn perceptual_distance(reference: &Volume3D, test: &Volume3D, extractor: &dyn FeatureExtractor) -> Result<f64> {
    check_pair(reference, test)?;
    let s = reference.shape();
    let plane = s.nx() * s.ny();
    let mut total = 0.0;
    for z in 0..s.nz() {
        let slice = |v: &Volume3D| -> Vec<f64> { v.data()[z * plane..(z + 1) * plane].iter().map(|&x| x.into()).collect() };
        let fa = extractor.features(&slice(reference), s.nx(), s.ny());
        let fb = extractor.features(&slice(test), s.nx(), s.ny());
        let per_layer: f64 = fa
            .iter()
            .zip(&fb)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64)
            .sum::<f64>()
            / fa.len() as f64;
        total += per_layer;
    }
    Ok(total / s.nz() as f64)
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    #[serde(with = "lenient_f64")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub h_dist: f64,
    pub p_dist: f64,
    /// Description of the region MAE and PSNR were restricted to.
    pub mask: Option<String>,
    pub reference_name: String,
    pub test_name: String,
    pub extractor: String,
    /// Warnings such as guarded Haralick denominators.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ssim: SsimConfig,
    pub haralick: HaralickConfig,
    /// PSNR peak; defaults to the reference maximum.
    pub psnr_peak: Option<f64>,
}

/// Runs all five metrics on one pair.
pub fn evaluate_pair(
    reference: &Volume3D,
    test: &Volume3D,
    cfg: &EvalConfig,
    mask: Option<(&Grid<bool>, &str)>,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<EvalReport> {
    check_pair(reference, test)?;
    let builtin = RandomConvExtractor::default();
    let mut flags = Vec::new();
    let extractor = match extractor {
        Some(e) => e,
        None => {
            flags.push("builtin-extractor".to_string());
            &builtin as &dyn FeatureExtractor
        }
    };
    let m = mask.map(|(g, _)| g);
    let (h_dist, guarded) = haralick_distance_flagged(reference, test, &cfg.haralick)?;
    flags.extend(guarded.into_iter().map(|f| format!("haralick-guard:{f}")));
    Ok(EvalReport {
        mae: mae(reference, test, m)?,
        psnr_db: psnr(reference, test, cfg.psnr_peak, m)?,
        ssim: ssim(reference, test, &cfg.ssim)?,
        h_dist,
        p_dist: perceptual_distance(reference, test, extractor)?,
        mask: mask.map(|(_, d)| d.to_string()),
        reference_name: reference.name.clone(),
        test_name: test.name.clone(),
        extractor: extractor.name().to_string(),
        flags,
    })
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case: String,
    pub dose_factor: f64,
    pub method: String,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub h_dist: f64,
    pub p_dist: f64,
}

pub const CSV_COLUMNS: [&str; 8] = ["case", "dose_factor", "method", "mae", "psnr_db", "ssim", "h_dist", "p_dist"];

impl EvalRow {
    pub fn new(case: impl Into<String>, dose_factor: f64, method: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            case: case.into(),
            dose_factor,
            method: method.into(),
            mae: r.mae,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            h_dist: r.h_dist,
            p_dist: r.p_dist,
        }
    }
}

pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CsrdError::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CsrdError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CsrdError::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CsrdError::Config(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| CsrdError::Config(format!("{}: {e}", path.display())))?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(CsrdError::Config(format!("{}: unexpected columns {headers:?}", path.display())));
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<EvalRow>, _>>()
        .map_err(|e| CsrdError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CsrdError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CsrdError::json(path, e))?;
    f.write_all(b"\n").map_err(|e| CsrdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Shape3;

    fn vol(shape: Shape3, f: impl FnMut(usize, usize, usize) -> f32) -> Volume3D {
        Volume3D::normalized(Grid::from_fn(shape, f), "v").unwrap()
    }

    #[test]
    fn scalar_formulas() {
        let s = Shape3::cube(4);
        let a = vol(s, |_, _, _| 0.0);
        let b = vol(s, |_, _, _| 0.2);
        assert!((mae(&a, &b, None).unwrap() - 0.2).abs() < 1e-7);
        assert_eq!(mae(&a, &a, None).unwrap(), 0.0);
        let one = vol(s, |_, _, _| 1.0);
        let off = vol(s, |_, _, _| 0.9);
        // MSE 0.01 at peak 1 -> 20 dB (0.9 is not exact in f32).
        assert!((psnr(&one, &off, None, None).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&one, &one, None, None).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, None, None).is_err());
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let s = Shape3::new(16, 16, 2);
        let a = vol(s, |x, y, z| ((x * 7 + y * 3 + z) % 11) as f32 / 11.0);
        assert!((ssim(&a, &a, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let inv = vol(s, |x, y, z| 1.0 - ((x * 7 + y * 3 + z) % 11) as f32 / 11.0);
        assert!(ssim(&a, &inv, &SsimConfig::default()).unwrap() < 0.0);
        assert!(ssim(&vol(Shape3::cube(8), |_, _, _| 0.0), &vol(Shape3::cube(8), |_, _, _| 0.0), &SsimConfig::default()).is_err());
    }

    #[test]
    fn offsets_are_unique_directions() {
        let o = unit_offsets();
        assert_eq!(o.len(), 13);
        HaralickConfig::default().validate().unwrap();
        let bad = HaralickConfig {
            offsets: vec![[1, 0, 0], [-1, 0, 0]],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn glcm_is_normalized_and_symmetric() {
        let s = Shape3::cube(5);
        let v = vol(s, |x, y, z| ((x + 2 * y + 3 * z) % 4) as f32);
        let q = quantize(&v, 0.0, 4.0, 4);
        let m = glcm(&q, s, [1, 1, 0], 4, true);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i * 4 + j], m[j * 4 + i]);
            }
        }
    }

    #[test]
    fn distances_vanish_on_identical_inputs() {
        let s = Shape3::new(12, 12, 3);
        let a = vol(s, |x, y, z| ((x * 5 + y * 3 + z * 7) % 13) as f32 / 13.0);
        assert_eq!(haralick_distance(&a, &a, &HaralickConfig::default()).unwrap(), 0.0);
        assert_eq!(perceptual_distance(&a, &a, &RandomConvExtractor::default()).unwrap(), 0.0);
    }

    #[test]
    fn report_json_round_trips_infinity() {
        let s = Shape3::new(12, 12, 2);
        let a = vol(s, |x, y, _| (x * y) as f32 / 144.0 + 0.1);
        let r = evaluate_pair(&a, &a, &EvalConfig::default(), None, None).unwrap();
        assert_eq!((r.mae, r.psnr_db, r.ssim, r.h_dist, r.p_dist), (0.0, f64::INFINITY, 1.0, 0.0, 0.0));
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.psnr_db, f64::INFINITY);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![EvalRow {
            case: "c".into(),
            dose_factor: 4.0,
            method: "low".into(),
            mae: 0.1,
            psnr_db: f64::INFINITY,
            ssim: 0.9,
            h_dist: 1.0,
            p_dist: 0.5,
        }];
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("case,dose_factor,method,mae,psnr_db,ssim,h_dist,p_dist"));
        assert_eq!(read_csv(&p).unwrap(), rows);
    }
}
