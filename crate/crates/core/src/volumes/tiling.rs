use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Domain, Grid, Shape3, Volume3D};
use crate::error::{CsrdError, Result};

/// Floor applied to each per-axis raised-cosine weight.
const COSINE_FLOOR: f64 = 0.05;

/// A sub-volume of a parent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRegion {
    pub origin: [usize; 3],
    pub size: Shape3,
    pub parent: Shape3,
}

impl PatchRegion {
    pub fn new(origin: [usize; 3], size: Shape3, parent: Shape3) -> Result<Self> {
        for axis in 0..3 {
            if size.0[axis] == 0 || origin[axis] + size.0[axis] > parent.0[axis] {
                return Err(CsrdError::Dimension(format!(
                    "region origin {origin:?} size {size} exceeds parent {parent}"
                )));
            }
        }
        Ok(Self {
            origin,
            size,
            parent,
        })
    }

    /// The region spanning the whole parent.
    pub fn whole(parent: Shape3) -> Self {
        Self {
            origin: [0; 3],
            size: parent,
            parent,
        }
    }

    /// Normalized position of parent index `k` along `axis`.
    pub fn coordinate(parent_extent: usize, k: usize) -> f64 {
        if parent_extent > 1 {
            k as f64 / (parent_extent - 1) as f64
        } else {
            0.0
        }
    }

    /// Three channels holding the x, y and z position of each voxel, mapped
    /// to `[0, 1]` over the parent extent.
    pub fn coord_channels(&self) -> [Grid<f32>; 3] {
        std::array::from_fn(|axis| {
            let extent = self.parent.0[axis];
            let origin = self.origin[axis];
            Grid::from_fn(self.size, |x, y, z| {
                let k = [x, y, z][axis] + origin;
                Self::coordinate(extent, k) as f32
            })
        })
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size.0[a])
    }
}

/// How overlapping patches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Blend {
    UniformAverage,
    #[default]
    CosineWindow,
}

/// An ordered covering of a grid by patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub shape: Shape3,
    pub patch: Shape3,
    pub stride: [usize; 3],
    pub regions: Vec<PatchRegion>,
    pub blend: Blend,
}

fn axis_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let count = (extent - patch).div_ceil(stride) + 1;
    (0..count)
        .map(|i| if i + 1 == count { extent - patch } else { i * stride })
        .collect()
}

/// Places patches at multiples of `stride`, clamping the last patch on each
/// axis to the volume edge.
pub fn tile(shape: Shape3, patch: Shape3, stride: [usize; 3]) -> Result<TilingPlan> {
    for axis in 0..3 {
        let (l, p, s) = (shape.0[axis], patch.0[axis], stride[axis]);
        if p == 0 || p > l {
            return Err(CsrdError::Tiling(format!(
                "patch {patch} does not fit volume {shape}"
            )));
        }
        if s == 0 || s > p {
            return Err(CsrdError::Tiling(format!(
                "stride {stride:?} must lie in [1, patch] for patch {patch}"
            )));
        }
    }
    let px = axis_positions(shape.nx(), patch.nx(), stride[0]);
    let py = axis_positions(shape.ny(), patch.ny(), stride[1]);
    let pz = axis_positions(shape.nz(), patch.nz(), stride[2]);
    let mut regions = Vec::with_capacity(px.len() * py.len() * pz.len());
    for &z in &pz {
        for &y in &py {
            for &x in &px {
                regions.push(PatchRegion {
                    origin: [x, y, z],
                    size: patch,
                    parent: shape,
                });
            }
        }
    }
    Ok(TilingPlan {
        shape,
        patch,
        stride,
        regions,
        blend: Blend::default(),
    })
}

impl TilingPlan {
    pub fn with_blend(mut self, blend: Blend) -> Self {
        self.blend = blend;
        self
    }

    /// A single region covering the whole grid.
    pub fn whole(shape: Shape3) -> Self {
        Self {
            shape,
            patch: shape,
            stride: shape.0,
            regions: vec![PatchRegion::whole(shape)],
            blend: Blend::default(),
        }
    }

    fn axis_window(&self, n: usize) -> Vec<f64> {
        match self.blend {
            Blend::UniformAverage => vec![1.0; n],
            Blend::CosineWindow => (0..n)
                .map(|u| {
                    let phase = 2.0 * std::f64::consts::PI * (u as f64 + 0.5) / n as f64;
                    (0.5 * (1.0 - phase.cos())).max(COSINE_FLOOR)
                })
                .collect(),
        }
    }

    /// Unnormalized blend window over a patch of the plan's patch size.
    pub fn window(&self) -> Grid<f64> {
        let wx = self.axis_window(self.patch.nx());
        let wy = self.axis_window(self.patch.ny());
        let wz = self.axis_window(self.patch.nz());
        Grid::from_fn(self.patch, |x, y, z| wx[x] * wy[y] * wz[z])
    }

    /// Per-voxel sum of raw windows over all covering regions.
    pub fn weight_sum(&self) -> Grid<f64> {
        let window = self.window();
        let mut sum = Grid::filled(self.shape, 0.0);
        for region in &self.regions {
            accumulate(&mut sum, region, &window.data, |w, _| w);
        }
        sum
    }

    /// Normalized per-voxel blend weight of region `i` (zero outside it).
    pub fn blend_weights(&self, i: usize) -> Grid<f64> {
        let sum = self.weight_sum();
        let window = self.window();
        let region = &self.regions[i];
        let mut out = Grid::filled(self.shape, 0.0);
        for z in 0..region.size.nz() {
            for y in 0..region.size.ny() {
                for x in 0..region.size.nx() {
                    let g = self.shape.index(
                        x + region.origin[0],
                        y + region.origin[1],
                        z + region.origin[2],
                    );
                    out.data[g] = window.get(x, y, z) / sum.data[g];
                }
            }
        }
        out
    }

    /// Number of regions covering each voxel.
    pub fn coverage(&self) -> Grid<u32> {
        let mut cover = Grid::filled(self.shape, 0u32);
        for r in &self.regions {
            for z in r.origin[2]..r.origin[2] + r.size.nz() {
                for y in r.origin[1]..r.origin[1] + r.size.ny() {
                    let row = self.shape.index(r.origin[0], y, z);
                    for c in &mut cover.data[row..row + r.size.nx()] {
                        *c += 1;
                    }
                }
            }
        }
        cover
    }
}

/// Adds `f(window, value)` of a patch-shaped buffer into `target` at `region`.
fn accumulate(
    target: &mut Grid<f64>,
    region: &PatchRegion,
    window: &[f64],
    f: impl Fn(f64, usize) -> f64,
) {
    let size = region.size;
    for z in 0..size.nz() {
        for y in 0..size.ny() {
            let local = size.index(0, y, z);
            let global = target
                .shape
                .index(region.origin[0], y + region.origin[1], z + region.origin[2]);
            for x in 0..size.nx() {
                target.data[global + x] += f(window[local + x], local + x);
            }
        }
    }
}

/// Copies the sub-grid under `region`.
pub fn extract_patch<T: Copy>(grid: &Grid<T>, region: &PatchRegion) -> Result<Grid<T>> {
    if region.parent != grid.shape {
        return Err(CsrdError::Dimension(format!(
            "region planned for {} applied to grid {}",
            region.parent, grid.shape
        )));
    }
    PatchRegion::new(region.origin, region.size, grid.shape)?;
    let size = region.size;
    let mut data = Vec::with_capacity(size.len());
    for z in 0..size.nz() {
        for y in 0..size.ny() {
            let start = grid
                .shape
                .index(region.origin[0], y + region.origin[1], z + region.origin[2]);
            data.extend_from_slice(&grid.data[start..start + size.nx()]);
        }
    }
    Ok(Grid { shape: size, data })
}

/// Result of blending patches back into a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchOutput {
    pub grid: Grid<f64>,
    /// Blend-weighted RMS disagreement between overlapping patches and the
    /// stitched value, over voxels covered more than once (0 without overlap).
    pub seam_rms: f64,
}

impl StitchOutput {
    pub fn into_volume(self, spacing: [f64; 3], name: impl Into<String>) -> Result<Volume3D> {
        Volume3D::new(self.grid.to_f32(), spacing, Domain::Normalized, name)
    }
}

/// Blend-weighted average of all patches of `plan`.
pub fn stitch<T>(patches: &[(PatchRegion, Grid<T>)], plan: &TilingPlan) -> Result<StitchOutput>
where
    T: Copy + Into<f64>,
{
    let lookup: HashMap<PatchRegion, usize> = plan
        .regions
        .iter()
        .enumerate()
        .map(|(i, r)| (*r, i))
        .collect();
    let mut seen = vec![false; plan.regions.len()];
    for (region, grid) in patches {
        let Some(&i) = lookup.get(region) else {
            return Err(CsrdError::Completeness(format!(
                "patch at {:?} is not part of the tiling plan",
                region.origin
            )));
        };
        if seen[i] {
            return Err(CsrdError::Completeness(format!(
                "duplicate patch at {:?}",
                region.origin
            )));
        }
        if grid.shape != region.size {
            return Err(CsrdError::Dimension(format!(
                "patch at {:?} has shape {} but region size is {}",
                region.origin, grid.shape, region.size
            )));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CsrdError::Completeness(format!(
            "no patch supplied for region at {:?}",
            plan.regions[missing].origin
        )));
    }

    let window = plan.window();
    let weights = plan.weight_sum();
    // Weights are normalized before accumulation so that a voxel covered by
    // a single patch receives exactly `1.0 * value`.
    let mut acc = Grid::filled(plan.shape, 0.0);
    for (region, grid) in patches {
        let size = region.size;
        for z in 0..size.nz() {
            for y in 0..size.ny() {
                let local = size.index(0, y, z);
                let global =
                    plan.shape
                        .index(region.origin[0], y + region.origin[1], z + region.origin[2]);
                for x in 0..size.nx() {
                    let w = window.data[local + x] / weights.data[global + x];
                    acc.data[global + x] += w * grid.data[local + x].into();
                }
            }
        }
    }

    let cover = plan.coverage();
    let mut seam_num = 0.0;
    let mut seam_den = 0.0;
    for (region, grid) in patches {
        let size = region.size;
        for z in 0..size.nz() {
            for y in 0..size.ny() {
                for x in 0..size.nx() {
                    let g = plan.shape.index(
                        x + region.origin[0],
                        y + region.origin[1],
                        z + region.origin[2],
                    );
                    if cover.data[g] > 1 {
                        let l = size.index(x, y, z);
                        let w = window.data[l] / weights.data[g];
                        let d = grid.data[l].into() - acc.data[g];
                        seam_num += w * d * d;
                        seam_den += w;
                    }
                }
            }
        }
    }
    let seam_rms = if seam_den > 0.0 {
        (seam_num / seam_den).sqrt()
    } else {
        0.0
    };
    Ok(StitchOutput {
        grid: acc,
        seam_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape3) -> Grid<f32> {
        Grid::from_fn(shape, |x, y, z| (x + 10 * y + 100 * z) as f32)
    }

    #[test]
    fn whole_volume_patch_is_single_region() {
        let plan = tile(Shape3::cube(64), Shape3::cube(64), [64; 3]).unwrap();
        assert_eq!(plan.regions.len(), 1);
        assert_eq!(plan.regions[0].origin, [0, 0, 0]);
    }

    #[test]
    fn full_scale_volume_tiling_positions() {
        let shape = Shape3::cube(160);
        let plan = tile(shape, Shape3::cube(64), [48; 3]).unwrap();
        assert_eq!(plan.regions.len(), 27);
        let xs: Vec<usize> = plan.regions[..3].iter().map(|r| r.origin[0]).collect();
        assert_eq!(xs, vec![0, 48, 96]);
        // ceil((160 - 64) / 48) + 1 = 3 positions per axis.
        assert_eq!((160usize - 64).div_ceil(48) + 1, 3);
        assert!(plan.coverage().data.iter().all(|&c| c >= 1));
    }

    #[test]
    fn clamped_last_position() {
        let plan = tile(Shape3::new(10, 7, 5), Shape3::new(4, 3, 5), [3, 2, 1]).unwrap();
        let xs: Vec<usize> = axis_positions(10, 4, 3);
        assert_eq!(xs, vec![0, 3, 6]);
        assert_eq!(axis_positions(7, 3, 2), vec![0, 2, 4]);
        assert_eq!(axis_positions(5, 5, 1), vec![0]);
        assert_eq!(plan.regions.len(), 9);
        assert!(plan.coverage().data.iter().all(|&c| c >= 1));
    }

    #[test]
    fn tiling_errors() {
        assert!(matches!(
            tile(Shape3::cube(8), Shape3::cube(9), [1; 3]),
            Err(CsrdError::Tiling(_))
        ));
        assert!(matches!(
            tile(Shape3::cube(8), Shape3::cube(4), [5, 1, 1]),
            Err(CsrdError::Tiling(_))
        ));
        assert!(matches!(
            tile(Shape3::cube(8), Shape3::cube(4), [0, 1, 1]),
            Err(CsrdError::Tiling(_))
        ));
    }

    #[test]
    fn coordinate_channels_are_global() {
        let parent = Shape3::new(5, 4, 1);
        let region = PatchRegion::new([1, 2, 0], Shape3::new(2, 2, 1), parent).unwrap();
        let [cx, cy, cz] = region.coord_channels();
        assert_eq!(cx.get(0, 0, 0), 0.25);
        assert_eq!(cx.get(1, 0, 0), 0.5);
        assert_eq!(cy.get(0, 1, 0), 1.0);
        assert_eq!(cz.get(1, 1, 0), 0.0);
        let whole = PatchRegion::whole(Shape3::new(9, 2, 3)).coord_channels();
        assert_eq!(whole[0].get(0, 0, 0), 0.0);
        assert_eq!(whole[0].get(8, 0, 0), 1.0);
    }

    #[test]
    fn extract_ramp_values() {
        let shape = Shape3::new(4, 5, 6);
        let g = ramp(shape);
        let region = PatchRegion::new([1, 1, 1], Shape3::cube(2), shape).unwrap();
        let p = extract_patch(&g, &region).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expected = ((x + 1) + 10 * (y + 1) + 100 * (z + 1)) as f32;
                    assert_eq!(p.get(x, y, z), expected);
                }
            }
        }
        assert_eq!(extract_patch(&g, &PatchRegion::whole(shape)).unwrap(), g);
        let bad = PatchRegion {
            origin: [3, 0, 0],
            size: Shape3::cube(2),
            parent: shape,
        };
        assert!(matches!(
            extract_patch(&g, &bad),
            Err(CsrdError::Dimension(_))
        ));
    }

    #[test]
    fn stitch_single_and_exact_tiling() {
        let shape = Shape3::new(6, 4, 4);
        let g = ramp(shape);
        let whole = TilingPlan::whole(shape);
        let patches = vec![(whole.regions[0], extract_patch(&g, &whole.regions[0]).unwrap())];
        let out = stitch(&patches, &whole).unwrap();
        assert_eq!(out.grid, g.to_f64());
        assert_eq!(out.seam_rms, 0.0);

        let plan = tile(shape, Shape3::new(3, 2, 2), [3, 2, 2]).unwrap();
        let patches: Vec<_> = plan
            .regions
            .iter()
            .map(|r| (*r, extract_patch(&g, r).unwrap()))
            .collect();
        assert_eq!(stitch(&patches, &plan).unwrap().grid, g.to_f64());

        let zeros: Vec<_> = plan
            .regions
            .iter()
            .map(|r| (*r, Grid::filled(r.size, 0.0f64)))
            .collect();
        assert!(stitch(&zeros, &plan)
            .unwrap()
            .grid
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn stitch_detects_missing_region() {
        let shape = Shape3::cube(8);
        let plan = tile(shape, Shape3::cube(4), [4; 3]).unwrap();
        let g = ramp(shape);
        let mut patches: Vec<_> = plan
            .regions
            .iter()
            .map(|r| (*r, extract_patch(&g, r).unwrap()))
            .collect();
        patches.pop();
        assert!(matches!(
            stitch(&patches, &plan),
            Err(CsrdError::Completeness(_))
        ));
    }

    #[test]
    fn blend_weights_sum_to_one() {
        for blend in [Blend::UniformAverage, Blend::CosineWindow] {
            let plan = tile(Shape3::new(20, 13, 9), Shape3::new(8, 6, 4), [5, 4, 3])
                .unwrap()
                .with_blend(blend);
            let mut total = Grid::filled(plan.shape, 0.0);
            for i in 0..plan.regions.len() {
                for (t, w) in total.data.iter_mut().zip(plan.blend_weights(i).data) {
                    *t += w;
                }
            }
            assert!(total.data.iter().all(|t| (t - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn overlapped_self_reconstruction() {
        let shape = Shape3::new(23, 17, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0));
        let plan = tile(shape, Shape3::new(8, 8, 4), [5, 3, 2]).unwrap();
        let patches: Vec<_> = plan
            .regions
            .iter()
            .map(|r| (*r, extract_patch(&g, r).unwrap()))
            .collect();
        let out = stitch(&patches, &plan).unwrap();
        let err = out
            .grid
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| (a - f64::from(*b)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(out.seam_rms < 1e-6);
    }
}
