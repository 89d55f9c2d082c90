//! Volume containers, residual arithmetic, patch tiling and stitching.
//!
//! All grids are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

mod io;
mod tiling;

use serde::{Deserialize, Serialize};

use crate::error::{CsrdError, Result};

pub use io::{read_rv3d, write_rv3d, Rv3dHeader};
pub use tiling::{extract_patch, stitch, tile, Blend, PatchRegion, StitchOutput, TilingPlan};

/// Extent of a 3D grid as `[nx, ny, nz]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape3(pub [usize; 3]);

impl Shape3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self([nx, ny, nz])
    }

    pub const fn cube(n: usize) -> Self {
        Self([n, n, n])
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    /// Inverse of [`Shape3::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.0[0];
        let rest = idx / self.0[0];
        [x, rest % self.0[1], rest / self.0[1]]
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// A dense scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(CsrdError::Dimension(format!("empty grid shape {shape}")));
        }
        if data.len() != shape.len() {
            return Err(CsrdError::Dimension(format!(
                "grid {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz() {
            for y in 0..shape.ny() {
                for x in 0..shape.nx() {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn map<U>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl Grid<f32> {
    pub fn to_f64(&self) -> Grid<f64> {
        self.map(f64::from)
    }
}

impl Grid<f64> {
    pub fn to_f32(&self) -> Grid<f32> {
        self.map(|v| v as f32)
    }
}

/// Intensity domain of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Non-negative detected counts.
    Counts,
    /// Rescaled intensities.
    Normalized,
}

/// A scalar volume with voxel spacing and intensity-domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub grid: Grid<f32>,
    pub spacing: [f64; 3],
    pub domain: Domain,
    pub name: String,
}

impl Volume3D {
    pub fn new(
        grid: Grid<f32>,
        spacing: [f64; 3],
        domain: Domain,
        name: impl Into<String>,
    ) -> Result<Self> {
        let vol = Self {
            grid,
            spacing,
            domain,
            name: name.into(),
        };
        vol.validate()?;
        Ok(vol)
    }

    /// Unit-spacing normalized volume.
    pub fn normalized(grid: Grid<f32>, name: impl Into<String>) -> Result<Self> {
        Self::new(grid, [1.0; 3], Domain::Normalized, name)
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.grid.data
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.grid.shape;
        if shape.0.contains(&0) || self.grid.data.len() != shape.len() {
            return Err(CsrdError::Dimension(format!(
                "volume '{}' has shape {shape} and {} values",
                self.name,
                self.grid.data.len()
            )));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(CsrdError::Dimension(format!(
                "volume '{}' has non-positive spacing {:?}",
                self.name, self.spacing
            )));
        }
        match self.domain {
            Domain::Counts => {
                if let Some(v) = self.grid.data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                    return Err(CsrdError::Domain(format!(
                        "counts volume '{}' holds invalid value {v}",
                        self.name
                    )));
                }
            }
            Domain::Normalized => {
                if self.grid.data.iter().any(|v| !v.is_finite()) {
                    return Err(CsrdError::Domain(format!(
                        "normalized volume '{}' holds a non-finite value",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ensure_same_grid(&self, other: &Volume3D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CsrdError::Dimension(format!(
                "shape mismatch: '{}' is {} but '{}' is {}",
                self.name,
                self.shape(),
                other.name,
                other.shape()
            )));
        }
        if self.spacing != other.spacing {
            return Err(CsrdError::Dimension(format!(
                "spacing mismatch: '{}' {:?} vs '{}' {:?}",
                self.name, self.spacing, other.name, other.spacing
            )));
        }
        Ok(())
    }
}

/// The residual `low - nor` between a low-dose and a normal-dose volume.
///
/// Stored in f64: the difference of two f32 values is exact in f64 whenever
/// their binary exponents differ by at most 29, which makes
/// `low - (low - nor)` reproduce `nor` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVolume {
    pub data: Grid<f64>,
    /// Name of the low-dose volume this residual was computed against.
    pub paired_low: String,
    pub spacing: [f64; 3],
}

impl ResidualVolume {
    pub fn shape(&self) -> Shape3 {
        self.data.shape
    }

    pub fn from_grid(data: Grid<f64>, low: &Volume3D) -> Result<Self> {
        if data.shape != low.shape() {
            return Err(CsrdError::Dimension(format!(
                "residual shape {} does not match low-dose '{}' {}",
                data.shape,
                low.name,
                low.shape()
            )));
        }
        Ok(Self {
            data,
            paired_low: low.name.clone(),
            spacing: low.spacing,
        })
    }
}

/// `r = low - nor`, voxelwise.
pub fn compute_residual(low: &Volume3D, nor: &Volume3D) -> Result<ResidualVolume> {
    low.ensure_same_grid(nor)?;
    for v in [low, nor] {
        if v.domain != Domain::Normalized {
            return Err(CsrdError::Domain(format!(
                "residuals are defined on normalized intensities; '{}' is in counts",
                v.name
            )));
        }
    }
    let data = low
        .data()
        .iter()
        .zip(nor.data())
        .map(|(&l, &n)| f64::from(l) - f64::from(n))
        .collect();
    Ok(ResidualVolume {
        data: Grid {
            shape: low.shape(),
            data,
        },
        paired_low: low.name.clone(),
        spacing: low.spacing,
    })
}

/// Denoised estimate `low - r`.
pub fn apply_residual(low: &Volume3D, r: &ResidualVolume) -> Result<Volume3D> {
    if low.shape() != r.shape() {
        return Err(CsrdError::Dimension(format!(
            "residual shape {} does not match '{}' {}",
            r.shape(),
            low.name,
            low.shape()
        )));
    }
    let data = low
        .data()
        .iter()
        .zip(&r.data.data)
        .map(|(&l, &d)| (f64::from(l) - d) as f32)
        .collect();
    Ok(Volume3D {
        grid: Grid {
            shape: low.shape(),
            data,
        },
        spacing: low.spacing,
        domain: Domain::Normalized,
        name: format!("{}-denoised", low.name),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: Shape3, seed: u64, name: &str) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::from_fn(shape, |_, _, _| rng.random_range(-2.0f32..2.0));
        Volume3D::normalized(grid, name).unwrap()
    }

    #[test]
    fn identical_volumes_give_zero_residual() {
        let v = random_volume(Shape3::cube(5), 1, "a");
        let r = compute_residual(&v, &v).unwrap();
        assert!(r.data.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_shift_residual() {
        let nor = random_volume(Shape3::cube(4), 2, "nor");
        let low = Volume3D::normalized(nor.grid.map(|v| v + 0.5), "low").unwrap();
        let r = compute_residual(&low, &nor).unwrap();
        for (i, &d) in r.data.data.iter().enumerate() {
            let expected = f64::from(low.data()[i]) - f64::from(nor.data()[i]);
            assert_eq!(d, expected);
            assert!((d - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_matches_scalar_loop() {
        let shape = Shape3::cube(8);
        let low = random_volume(shape, 3, "low");
        let nor = random_volume(shape, 4, "nor");
        let r = compute_residual(&low, &nor).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let expected = low.grid.get(x, y, z) as f64 - nor.grid.get(x, y, z) as f64;
                    assert_eq!(r.data.get(x, y, z), expected);
                }
            }
        }
    }

    #[test]
    fn residual_rejects_counts_and_mismatch() {
        let a = random_volume(Shape3::cube(4), 5, "a");
        let b = random_volume(Shape3::new(4, 4, 5), 6, "b");
        assert!(matches!(
            compute_residual(&a, &b),
            Err(CsrdError::Dimension(_))
        ));
        let mut c = a.clone();
        c.spacing = [2.0, 1.0, 1.0];
        assert!(matches!(
            compute_residual(&a, &c),
            Err(CsrdError::Dimension(_))
        ));
        let counts = Volume3D::new(
            Grid::filled(Shape3::cube(4), 3.0),
            [1.0; 3],
            Domain::Counts,
            "counts",
        )
        .unwrap();
        assert!(matches!(
            compute_residual(&counts, &a),
            Err(CsrdError::Domain(_))
        ));
    }

    #[test]
    fn apply_residual_cases() {
        let low = random_volume(Shape3::cube(8), 7, "low");
        let zero = ResidualVolume::from_grid(Grid::filled(low.shape(), 0.0), &low).unwrap();
        assert_eq!(apply_residual(&low, &zero).unwrap().grid, low.grid);

        let as_res = ResidualVolume::from_grid(low.grid.to_f64(), &low).unwrap();
        assert!(apply_residual(&low, &as_res)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let nor = random_volume(Shape3::cube(8), 8, "nor");
        let back = apply_residual(&low, &compute_residual(&low, &nor).unwrap()).unwrap();
        assert_eq!(back.grid, nor.grid);
    }

    #[test]
    fn invariants_enforced() {
        let bad = Volume3D::new(
            Grid::filled(Shape3::cube(2), -1.0),
            [1.0; 3],
            Domain::Counts,
            "neg",
        );
        assert!(matches!(bad, Err(CsrdError::Domain(_))));
        let nan = Volume3D::normalized(Grid::filled(Shape3::cube(2), f32::NAN), "nan");
        assert!(matches!(nan, Err(CsrdError::Domain(_))));
        let spacing = Volume3D::new(
            Grid::filled(Shape3::cube(2), 1.0),
            [1.0, 0.0, 1.0],
            Domain::Normalized,
            "sp",
        );
        assert!(matches!(spacing, Err(CsrdError::Dimension(_))));
        assert!(Grid::from_vec(Shape3::new(0, 1, 1), Vec::<f32>::new()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn residual_round_trip_is_bitwise(
            pairs in proptest::collection::vec((-1.0e3f32..1.0e3, -1.0e3f32..1.0e3), 27)
        ) {
            let shape = Shape3::cube(3);
            let low = Volume3D::normalized(
                Grid::from_vec(shape, pairs.iter().map(|p| p.0).collect()).unwrap(), "low").unwrap();
            let nor = Volume3D::normalized(
                Grid::from_vec(shape, pairs.iter().map(|p| p.1).collect()).unwrap(), "nor").unwrap();
            let back = apply_residual(&low, &compute_residual(&low, &nor).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(nor.data()) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
