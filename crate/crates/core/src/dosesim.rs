//! Low-dose simulation by binomial count thinning, plus a synthetic
//! ellipsoid phantom generator producing co-registered PET counts and an
//! anatomical MR-like volume with shared geometry.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{CsrdError, Result};
use crate::rng;
use crate::volumes::{Domain, Grid, Shape3, Volume3D};

/// Dose-reduction factors used for training.
pub const TRAIN_FACTORS: [f64; 3] = [4.0, 6.0, 8.0];
/// Dose-reduction factors used for testing; 10x is never seen in training.
pub const TEST_FACTORS: [f64; 4] = [4.0, 6.0, 8.0, 10.0];
/// Percentile of the normal-dose volume used as the normalization scale.
pub const NORMALIZATION_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThinningSpec {
    pub factor: f64,
    pub seed: u64,
}

impl ThinningSpec {
    pub fn new(factor: f64, seed: u64) -> Result<Self> {
        let spec = Self { factor, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 1.0) || !self.factor.is_finite() {
            return Err(CsrdError::Domain(format!(
                "dose-reduction factor must be > 1, got {}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Probability of keeping each event.
    pub fn keep_probability(&self) -> f64 {
        1.0 / self.factor
    }
}

/// Keeps each detected event independently with probability `1 / factor`.
pub fn poisson_thin(counts: &Volume3D, spec: &ThinningSpec) -> Result<Volume3D> {
    spec.validate()?;
    let mut out = thin_with_probability(counts, spec.keep_probability(), spec.seed)?;
    out.name = format!("{}-thin{}x", counts.name, spec.factor);
    Ok(out)
}

/// Binomial thinning with an arbitrary keep probability in `(0, 1]`.
pub(crate) fn thin_with_probability(counts: &Volume3D, p: f64, seed: u64) -> Result<Volume3D> {
    if counts.domain != Domain::Counts {
        return Err(CsrdError::Domain(format!(
            "thinning needs a counts volume, '{}' is normalized",
            counts.name
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(CsrdError::Domain(format!("keep probability {p} outside (0, 1]")));
    }
    let mut rng = rng::stream(seed, &[]);
    let mut data = Vec::with_capacity(counts.data().len());
    for (i, &v) in counts.data().iter().enumerate() {
        if !(v >= 0.0) || v.fract() != 0.0 {
            return Err(CsrdError::Domain(format!(
                "voxel {i} of '{}' holds non-count value {v}",
                counts.name
            )));
        }
        let n = v as u64;
        let kept = if n == 0 || p == 1.0 {
            n
        } else {
            Binomial::new(n, p)
                .map_err(|e| CsrdError::Domain(e.to_string()))?
                .sample(&mut rng)
        };
        data.push(kept as f32);
    }
    Volume3D::new(
        Grid::from_vec(counts.shape(), data)?,
        counts.spacing,
        Domain::Counts,
        counts.name.clone(),
    )
}

/// Divides counts by `scale`.
pub fn normalize_counts(counts: &Volume3D, scale: f64) -> Result<Volume3D> {
    normalize_scaled(counts, 1.0, scale)
}

/// Brings a thinned volume onto the normal-dose intensity scale: multiplies
/// by the dose-reduction factor, then divides by `scale`.
pub fn normalize_low_dose(thinned: &Volume3D, factor: f64, scale: f64) -> Result<Volume3D> {
    normalize_scaled(thinned, factor, scale)
}

fn normalize_scaled(counts: &Volume3D, gain: f64, scale: f64) -> Result<Volume3D> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(CsrdError::Domain(format!(
            "normalization scale must be > 0, got {scale}"
        )));
    }
    if counts.domain != Domain::Counts {
        return Err(CsrdError::Domain(format!(
            "'{}' is already normalized",
            counts.name
        )));
    }
    let grid = counts.grid.map(|v| (f64::from(v) * gain / scale) as f32);
    Volume3D::new(grid, counts.spacing, Domain::Normalized, counts.name.clone())
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the voxel values.
pub fn percentile(vol: &Volume3D, q: f64) -> f64 {
    let mut values: Vec<f64> = vol.data().iter().map(|&v| f64::from(v)).collect();
    values.sort_by(f64::total_cmp);
    let rank = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Default normalization scale: the 99.5th percentile of the normal-dose
/// counts, falling back to the maximum (or 1) for degenerate volumes.
pub fn default_scale(nor_counts: &Volume3D) -> f64 {
    let p = percentile(nor_counts, NORMALIZATION_PERCENTILE);
    if p > 0.0 {
        p
    } else {
        let max = nor_counts.data().iter().fold(0.0f32, |a, &b| a.max(b));
        if max > 0.0 {
            f64::from(max)
        } else {
            1.0
        }
    }
}

/// An ellipsoid rotated about the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Rotation in the x-y plane, radians.
    pub angle: f64,
    /// Mean counts per voxel inside the ellipsoid.
    pub uptake: f64,
    /// Noise-free MR intensity inside the ellipsoid.
    pub mr_intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, h] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / h).powi(2) <= 1.0
    }

    /// Axis-aligned half extent of the bounding box.
    fn half_extent(&self) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let [a, b, h] = self.semi_axes;
        [
            ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
            ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
            h,
        ]
    }

    fn within(&self, shape: Shape3) -> bool {
        let half = self.half_extent();
        (0..3).all(|axis| {
            self.center[axis] - half[axis] >= 0.0
                && self.center[axis] + half[axis] <= (shape.0[axis] - 1) as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub n_ellipsoids: usize,
    /// `[min, max]` mean counts per voxel drawn for each ellipsoid.
    pub uptake_range: [f64; 2],
    /// Per-ellipsoid MR intensity; drawn at random when empty.
    #[serde(default)]
    pub mr_contrast_map: Vec<f64>,
    pub background_uptake: f64,
    #[serde(default = "default_mr_background")]
    pub mr_background: f64,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub seed: u64,
    /// Explicit geometry; overrides random placement when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipsoids: Option<Vec<Ellipsoid>>,
}

fn default_mr_background() -> f64 {
    0.15
}

fn default_spacing() -> [f64; 3] {
    [1.21875; 3]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: Shape3::cube(48),
            n_ellipsoids: 6,
            uptake_range: [5.0, 50.0],
            mr_contrast_map: Vec::new(),
            background_uptake: 2.0,
            mr_background: default_mr_background(),
            spacing_mm: default_spacing(),
            seed: 0,
            ellipsoids: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.0.iter().any(|&n| n < 5) {
            return Err(CsrdError::Spec(format!(
                "phantom shape {} too small to hold ellipsoids",
                self.shape
            )));
        }
        if self.n_ellipsoids == 0 {
            return Err(CsrdError::Spec("n_ellipsoids must be >= 1".into()));
        }
        let [lo, hi] = self.uptake_range;
        if !(lo >= 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(CsrdError::Spec(format!(
                "invalid uptake range [{lo}, {hi}]"
            )));
        }
        if !(self.background_uptake >= 0.0) || !self.background_uptake.is_finite() {
            return Err(CsrdError::Spec(format!(
                "invalid background uptake {}",
                self.background_uptake
            )));
        }
        if !self.mr_contrast_map.is_empty() && self.mr_contrast_map.len() != self.n_ellipsoids {
            return Err(CsrdError::Spec(format!(
                "mr_contrast_map has {} entries for {} ellipsoids",
                self.mr_contrast_map.len(),
                self.n_ellipsoids
            )));
        }
        if let Some(list) = &self.ellipsoids {
            if list.len() != self.n_ellipsoids {
                return Err(CsrdError::Spec(format!(
                    "{} explicit ellipsoids for n_ellipsoids = {}",
                    list.len(),
                    self.n_ellipsoids
                )));
            }
            for (i, e) in list.iter().enumerate() {
                if e.semi_axes.iter().any(|a| !(*a > 0.0)) || !(e.uptake >= 0.0) {
                    return Err(CsrdError::Spec(format!("ellipsoid {i} is degenerate")));
                }
                if !e.within(self.shape) {
                    return Err(CsrdError::Spec(format!(
                        "ellipsoid {i} centered at {:?} leaves the {} volume",
                        e.center, self.shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// The ellipsoids of this phantom, drawn deterministically from the seed
    /// unless given explicitly.
    pub fn geometry(&self) -> Result<Vec<Ellipsoid>> {
        self.validate()?;
        if let Some(list) = &self.ellipsoids {
            return Ok(list.clone());
        }
        let mut rng = rng::stream(self.seed, &[0]);
        let min_extent = *self.shape.0.iter().min().unwrap_or(&5) as f64;
        let axis_lo = (min_extent / 12.0).max(1.5);
        let axis_hi = (min_extent / 4.0).max(axis_lo + 0.5);
        let mut out = Vec::with_capacity(self.n_ellipsoids);
        for i in 0..self.n_ellipsoids {
            let semi_axes = [
                rng.random_range(axis_lo..axis_hi),
                rng.random_range(axis_lo..axis_hi),
                rng.random_range(axis_lo..axis_hi),
            ];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let mut e = Ellipsoid {
                center: [0.0; 3],
                semi_axes,
                angle,
                uptake: if self.uptake_range[1] > self.uptake_range[0] {
                    rng.random_range(self.uptake_range[0]..self.uptake_range[1])
                } else {
                    self.uptake_range[0]
                },
                mr_intensity: match self.mr_contrast_map.get(i) {
                    Some(&m) => m,
                    None => rng.random_range(0.3..1.0),
                },
            };
            let half = e.half_extent();
            for axis in 0..3 {
                let lo = half[axis];
                let hi = (self.shape.0[axis] - 1) as f64 - half[axis];
                e.center[axis] = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    (self.shape.0[axis] - 1) as f64 / 2.0
                };
            }
            if !e.within(self.shape) {
                return Err(CsrdError::Spec(format!(
                    "ellipsoid {i} does not fit the {} volume",
                    self.shape
                )));
            }
            out.push(e);
        }
        Ok(out)
    }

    /// Voxel label: 0 for background, `i + 1` for ellipsoid `i` (later
    /// ellipsoids overwrite earlier ones).
    pub fn label_map(&self) -> Result<Grid<u16>> {
        let geometry = self.geometry()?;
        Ok(label_map(self.shape, &geometry))
    }
}

fn label_map(shape: Shape3, geometry: &[Ellipsoid]) -> Grid<u16> {
    Grid::from_fn(shape, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        geometry
            .iter()
            .rposition(|e| e.contains(p))
            .map_or(0, |i| i as u16 + 1)
    })
}

/// Draws a phantom pair: Poisson PET counts over the piecewise-constant
/// uptake map, and the noise-free MR contrast of the same geometry plus
/// Gaussian noise with standard deviation 1% of its maximum.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, Volume3D)> {
    let geometry = spec.geometry()?;
    let labels = label_map(spec.shape, &geometry);
    let uptake = |l: u16| {
        if l == 0 {
            spec.background_uptake
        } else {
            geometry[l as usize - 1].uptake
        }
    };
    let contrast = |l: u16| {
        if l == 0 {
            spec.mr_background
        } else {
            geometry[l as usize - 1].mr_intensity
        }
    };

    let mut pet_rng = rng::stream(spec.seed, &[1]);
    let mut pet = Vec::with_capacity(labels.data.len());
    for &l in &labels.data {
        let lambda = uptake(l);
        let draw = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| CsrdError::Spec(e.to_string()))?
                .sample(&mut pet_rng)
        } else {
            0.0
        };
        pet.push(draw as f32);
    }

    let clean: Vec<f64> = labels.data.iter().map(|&l| contrast(l)).collect();
    let max = clean.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let noise_sd = 0.01 * max;
    let mut mr_rng = rng::stream(spec.seed, &[2]);
    let mr: Vec<f32> = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).map_err(|e| CsrdError::Spec(e.to_string()))?;
        clean
            .iter()
            .map(|&c| (c + normal.sample(&mut mr_rng)) as f32)
            .collect()
    } else {
        clean.iter().map(|&c| c as f32).collect()
    };

    let pet = Volume3D::new(
        Grid::from_vec(spec.shape, pet)?,
        spec.spacing_mm,
        Domain::Counts,
        format!("phantom-{}-pet", spec.seed),
    )?;
    let mr = Volume3D::new(
        Grid::from_vec(spec.shape, mr)?,
        spec.spacing_mm,
        Domain::Normalized,
        format!("phantom-{}-mr", spec.seed),
    )?;
    Ok((pet, mr))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(shape: Shape3, value: f32) -> Volume3D {
        Volume3D::new(Grid::filled(shape, value), [1.0; 3], Domain::Counts, "c").unwrap()
    }

    #[test]
    fn keep_all_path_is_identity() {
        let v = Volume3D::new(
            Grid::from_fn(Shape3::cube(4), |x, y, z| (x * y + z) as f32),
            [1.0; 3],
            Domain::Counts,
            "ramp",
        )
        .unwrap();
        let out = thin_with_probability(&v, 1.0, 3).unwrap();
        assert_eq!(out.grid, v.grid);
    }

    #[test]
    fn thinning_moments_single_voxel() {
        // 1000 counts thinned at factor 4: Binomial(1000, 0.25).
        let shape = Shape3::new(1000, 10, 10);
        let v = counts(shape, 1000.0);
        let out = poisson_thin(&v, &ThinningSpec::new(4.0, 11).unwrap()).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
        let var = out
            .data()
            .iter()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((mean - 250.0).abs() < 2.5, "mean {mean}");
        assert!((var - 187.5).abs() < 0.05 * 187.5, "var {var}");
    }

    #[test]
    fn thinning_is_deterministic_and_validates() {
        let v = counts(Shape3::cube(6), 17.0);
        let spec = ThinningSpec::new(6.0, 5).unwrap();
        assert_eq!(poisson_thin(&v, &spec).unwrap(), poisson_thin(&v, &spec).unwrap());
        assert!(ThinningSpec::new(1.0, 0).is_err());
        let frac = counts(Shape3::cube(2), 1.5);
        assert!(matches!(
            poisson_thin(&frac, &spec),
            Err(CsrdError::Domain(_))
        ));
        let norm = Volume3D::normalized(Grid::filled(Shape3::cube(2), 1.0), "n").unwrap();
        assert!(matches!(poisson_thin(&norm, &spec), Err(CsrdError::Domain(_))));
    }

    #[test]
    fn normalization_cases() {
        let v = counts(Shape3::cube(3), 7.0);
        let n = normalize_counts(&v, 7.0).unwrap();
        assert!(n.data().iter().all(|&x| x == 1.0));
        assert_eq!(n.domain, Domain::Normalized);
        let z = normalize_counts(&counts(Shape3::cube(3), 0.0), 2.0).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(matches!(normalize_counts(&v, 0.0), Err(CsrdError::Domain(_))));
    }

    #[test]
    fn thinned_normalized_expectation_matches() {
        // 10^5 voxels of 40 counts; E[factor * thin / scale] = 40 / scale.
        let v = counts(Shape3::new(100, 100, 10), 40.0);
        let factor = 6.0;
        let scale = 40.0;
        let thin = poisson_thin(&v, &ThinningSpec::new(factor, 2).unwrap()).unwrap();
        let low = normalize_low_dose(&thin, factor, scale).unwrap();
        let nor = normalize_counts(&v, scale).unwrap();
        let mean_low = low.data().iter().map(|&x| f64::from(x)).sum::<f64>() / 1e5;
        let mean_nor = nor.data().iter().map(|&x| f64::from(x)).sum::<f64>() / 1e5;
        assert!((mean_low / mean_nor - 1.0).abs() < 0.01);
    }

    #[test]
    fn percentile_interpolates() {
        let v = Volume3D::new(
            Grid::from_vec(Shape3::new(5, 1, 1), vec![4.0, 0.0, 1.0, 3.0, 2.0]).unwrap(),
            [1.0; 3],
            Domain::Counts,
            "p",
        )
        .unwrap();
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 99.5) - 3.98).abs() < 1e-12);
    }

    #[test]
    fn background_only_phantom_mean() {
        let spec = PhantomSpec {
            uptake_range: [2.0, 2.0],
            seed: 4,
            ..PhantomSpec::default()
        };
        let (pet, _) = generate_phantom(&spec).unwrap();
        let mean = pet.data().iter().map(|&x| f64::from(x)).sum::<f64>() / pet.data().len() as f64;
        assert!((mean - 2.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec {
            seed: 21,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 22, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn pet_and_mr_share_geometry() {
        let spec = PhantomSpec {
            shape: Shape3::cube(24),
            n_ellipsoids: 3,
            uptake_range: [30.0, 40.0],
            mr_contrast_map: vec![0.5, 0.7, 0.9],
            background_uptake: 0.0,
            seed: 3,
            ..PhantomSpec::default()
        };
        let labels = spec.label_map().unwrap();
        let geometry = spec.geometry().unwrap();
        let (pet, mr) = generate_phantom(&spec).unwrap();
        for (i, &l) in labels.data.iter().enumerate() {
            let expected_mr = if l == 0 {
                spec.mr_background
            } else {
                geometry[l as usize - 1].mr_intensity
            };
            // MR noise is 1% of the 0.9 maximum; 6 sigma separates the levels.
            assert!((f64::from(mr.data()[i]) - expected_mr).abs() < 0.06);
            if l == 0 {
                assert_eq!(pet.data()[i], 0.0);
            }
        }
        assert!(labels.data.iter().any(|&l| l > 0));
    }

    #[test]
    fn invalid_phantoms_are_rejected() {
        let zero = PhantomSpec {
            n_ellipsoids: 0,
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom(&zero), Err(CsrdError::Spec(_))));
        let outside = PhantomSpec {
            n_ellipsoids: 1,
            ellipsoids: Some(vec![Ellipsoid {
                center: [2.0, 24.0, 24.0],
                semi_axes: [5.0, 5.0, 5.0],
                angle: 0.0,
                uptake: 10.0,
                mr_intensity: 0.5,
            }]),
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom(&outside), Err(CsrdError::Spec(_))));
        let bad_range = PhantomSpec {
            uptake_range: [5.0, 1.0],
            ..PhantomSpec::default()
        };
        assert!(bad_range.validate().is_err());
    }
}
