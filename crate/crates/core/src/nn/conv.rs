//! Direct 3x3x3 convolution kernels.
//!
//! Inputs are copied into a one-voxel padded layout with strides
//! `sy = nx + 2`, `sz = (nx + 2)(ny + 2)`. In that layout every tap is a
//! constant linear offset, so a convolution becomes 27 shifted
//! multiply-adds over one contiguous index range `j`, where interior voxel
//! `(x, y, z)` sits at `j = z·sz + y·sy + x`. Positions of `j` that fall on
//! padding are computed and discarded.

use super::ops::Padding;
use super::Real;
use crate::volumes::Shape3;

/// Vector block length along `j`.
const LANES: usize = 16;
const TAPS: usize = 27;

/// Padded geometry of one spatial shape.
#[derive(Debug, Clone, Copy)]
pub(super) struct Geometry {
    shape: Shape3,
    sy: usize,
    sz: usize,
    /// Number of `j` positions, rounded up to a whole block.
    len: usize,
    /// Per-channel stride of padded buffers, with slack for the last block.
    stride: usize,
    offsets: [usize; TAPS],
}

impl Geometry {
    pub fn new(shape: Shape3) -> Self {
        let (nx, ny, nz) = (shape.nx(), shape.ny(), shape.nz());
        let sy = nx + 2;
        let sz = sy * (ny + 2);
        let span = (nz - 1) * sz + (ny - 1) * sy + nx;
        let len = span.div_ceil(LANES) * LANES;
        let stride = sz * (nz + 2) + LANES;
        let mut offsets = [0; TAPS];
        for (t, o) in offsets.iter_mut().enumerate() {
            *o = (t / 9) * sz + (t / 3 % 3) * sy + t % 3;
        }
        Self {
            shape,
            sy,
            sz,
            len,
            stride,
            offsets,
        }
    }

    #[inline]
    fn j(&self, x: usize, y: usize, z: usize) -> usize {
        z * self.sz + y * self.sy + x
    }

    /// Copies `channels` grids into the padded layout.
    pub fn pad<T: Real>(&self, data: &[T], channels: usize, padding: Padding) -> Vec<T> {
        let s = self.shape;
        let (nx, ny, nz) = (s.nx() as isize, s.ny() as isize, s.nz() as isize);
        let n = s.len();
        let mut out = vec![T::zero(); channels * self.stride];
        let wrap = |i: isize, n: isize| -> Option<usize> {
            if (0..n).contains(&i) {
                Some(i as usize)
            } else {
                match padding {
                    Padding::Zeros => None,
                    Padding::Periodic => Some(i.rem_euclid(n) as usize),
                }
            }
        };
        for c in 0..channels {
            let src = &data[c * n..(c + 1) * n];
            let dst = &mut out[c * self.stride..(c + 1) * self.stride];
            for pz in 0..nz + 2 {
                let Some(z) = wrap(pz - 1, nz) else { continue };
                for py in 0..ny + 2 {
                    let Some(y) = wrap(py - 1, ny) else { continue };
                    let row = pz as usize * self.sz + py as usize * self.sy;
                    let srow = s.index(0, y, z);
                    dst[row + 1..row + 1 + nx as usize].copy_from_slice(&src[srow..srow + nx as usize]);
                    if let Some(x) = wrap(-1, nx) {
                        dst[row] = src[srow + x];
                    }
                    if let Some(x) = wrap(nx, nx) {
                        dst[row + nx as usize + 1] = src[srow + x];
                    }
                }
            }
        }
        out
    }

    /// Places `channels` grids at their `j` positions, zero elsewhere.
    pub fn to_j<T: Real>(&self, data: &[T], channels: usize) -> Vec<T> {
        let s = self.shape;
        let n = s.len();
        let mut out = vec![T::zero(); channels * self.len];
        for c in 0..channels {
            for z in 0..s.nz() {
                for y in 0..s.ny() {
                    let j = c * self.len + self.j(0, y, z);
                    let src = c * n + s.index(0, y, z);
                    out[j..j + s.nx()].copy_from_slice(&data[src..src + s.nx()]);
                }
            }
        }
        out
    }

    /// Gathers interior voxels from a `j`-space buffer.
    pub fn from_j<T: Real>(&self, buf: &[T], channels: usize) -> Vec<T> {
        let s = self.shape;
        let mut out = Vec::with_capacity(channels * s.len());
        for c in 0..channels {
            for z in 0..s.nz() {
                for y in 0..s.ny() {
                    let j = c * self.len + self.j(0, y, z);
                    out.extend_from_slice(&buf[j..j + s.nx()]);
                }
            }
        }
        out
    }

    /// `out[o][j] = Σ_i Σ_t w[o][i][t] · src[i][j + offset_t]` for all `j`.
    /// `src` is padded (channel stride `self.stride`), `out` is `j`-space.
    pub fn correlate<T: Real>(&self, w: &[T], n_out: usize, n_in: usize, src: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); n_out * self.len];
        let args = CorrArgs {
            geo: self,
            w,
            n_out,
            n_in,
            src,
        };
        match isa() {
            // SAFETY: `isa` only reports features detected at runtime.
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => unsafe { x86::correlate_avx512(&args, &mut out) },
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { x86::correlate_avx2(&args, &mut out) },
            Isa::Base => correlate_blocks::<T, false>(&args, &mut out),
        }
        out
    }

    /// `gw[o][i][t] += Σ_j dy[o][j] · src[i][j + offset_t]` with `dy` in
    /// `j`-space (zero on padding positions).
    pub fn weight_grad<T: Real>(&self, dy: &[T], n_out: usize, n_in: usize, src: &[T], gw: &mut [T]) {
        let args = GradArgs {
            geo: self,
            dy,
            n_out,
            n_in,
            src,
        };
        match isa() {
            // SAFETY: as above.
            #[cfg(target_arch = "x86_64")]
            Isa::Avx512 => unsafe { x86::weight_grad_avx512(&args, gw) },
            #[cfg(target_arch = "x86_64")]
            Isa::Avx2 => unsafe { x86::weight_grad_avx2(&args, gw) },
            Isa::Base => weight_grad_blocks::<T, false>(&args, gw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Base,
}

fn isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
            return Isa::Avx512;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            return Isa::Avx2;
        }
    }
    Isa::Base
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub unsafe fn correlate_avx512<T: Real>(a: &CorrArgs<T>, out: &mut [T]) {
        correlate_blocks::<T, true>(a, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn correlate_avx2<T: Real>(a: &CorrArgs<T>, out: &mut [T]) {
        correlate_blocks::<T, true>(a, out)
    }

    #[target_feature(enable = "avx512f,avx2,fma")]
    pub unsafe fn weight_grad_avx512<T: Real>(a: &GradArgs<T>, gw: &mut [T]) {
        weight_grad_blocks::<T, true>(a, gw)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn weight_grad_avx2<T: Real>(a: &GradArgs<T>, gw: &mut [T]) {
        weight_grad_blocks::<T, true>(a, gw)
    }
}

#[inline(always)]
fn madd<T: Real, const FUSED: bool>(a: T, b: T, c: T) -> T {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

struct CorrArgs<'a, T> {
    geo: &'a Geometry,
    w: &'a [T],
    n_out: usize,
    n_in: usize,
    src: &'a [T],
}

#[inline(always)]
fn correlate_blocks<T: Real, const FUSED: bool>(a: &CorrArgs<T>, out: &mut [T]) {
    let mut o0 = 0;
    while o0 < a.n_out {
        let rem = a.n_out - o0;
        o0 += match rem {
            r if r >= 8 => correlate_group::<T, FUSED, 8>(a, o0, out),
            r if r >= 4 => correlate_group::<T, FUSED, 4>(a, o0, out),
            r if r >= 2 => correlate_group::<T, FUSED, 2>(a, o0, out),
            _ => correlate_group::<T, FUSED, 1>(a, o0, out),
        };
    }
}

#[inline(always)]
fn correlate_group<T: Real, const FUSED: bool, const G: usize>(a: &CorrArgs<T>, o0: usize, out: &mut [T]) -> usize {
    let geo = a.geo;
    let per_out = a.n_in * TAPS;
    for j0 in (0..geo.len).step_by(LANES) {
        let mut acc = [[T::zero(); LANES]; G];
        for i in 0..a.n_in {
            let base = i * geo.stride + j0;
            for (t, &off) in geo.offsets.iter().enumerate() {
                let s: &[T; LANES] = a.src[base + off..base + off + LANES].try_into().unwrap();
                for (g, acc_g) in acc.iter_mut().enumerate() {
                    let w = a.w[(o0 + g) * per_out + i * TAPS + t];
                    for l in 0..LANES {
                        acc_g[l] = madd::<T, FUSED>(w, s[l], acc_g[l]);
                    }
                }
            }
        }
        for (g, acc_g) in acc.iter().enumerate() {
            let o = (o0 + g) * geo.len + j0;
            out[o..o + LANES].copy_from_slice(acc_g);
        }
    }
    G
}

struct GradArgs<'a, T> {
    geo: &'a Geometry,
    dy: &'a [T],
    n_out: usize,
    n_in: usize,
    src: &'a [T],
}

#[inline(always)]
fn fma3<T: Real, const FUSED: bool>(acc: &mut [[T; LANES]; 3], d: &[T; LANES], s: &[[T; LANES]; 3]) {
    for k in 0..3 {
        for l in 0..LANES {
            acc[k][l] = madd::<T, FUSED>(d[l], s[k][l], acc[k][l]);
        }
    }
}

#[inline(always)]
fn weight_grad_blocks<T: Real, const FUSED: bool>(a: &GradArgs<T>, gw: &mut [T]) {
    let mut o0 = 0;
    while o0 < a.n_out {
        let rem = a.n_out - o0;
        o0 += match rem {
            r if r >= 4 => weight_grad_group::<T, FUSED, 4>(a, o0, gw),
            r if r >= 2 => weight_grad_group::<T, FUSED, 2>(a, o0, gw),
            _ => weight_grad_group::<T, FUSED, 1>(a, o0, gw),
        };
    }
}

#[inline(always)]
fn weight_grad_group<T: Real, const FUSED: bool, const G: usize>(a: &GradArgs<T>, o0: usize, gw: &mut [T]) -> usize {
    let geo = a.geo;
    let per_out = a.n_in * TAPS;
    for i in 0..a.n_in {
        // Taps come in runs of three consecutive x offsets.
        for t0 in (0..TAPS).step_by(3) {
            let mut acc = [[[T::zero(); LANES]; 3]; G];
            let base = i * geo.stride + geo.offsets[t0];
            for j0 in (0..geo.len).step_by(LANES) {
                let mut s = [[T::zero(); LANES]; 3];
                for (k, s_k) in s.iter_mut().enumerate() {
                    let at = base + j0 + k;
                    s_k.copy_from_slice(&a.src[at..at + LANES]);
                }
                for (g, acc_g) in acc.iter_mut().enumerate() {
                    let o = (o0 + g) * geo.len + j0;
                    let mut d = [T::zero(); LANES];
                    d.copy_from_slice(&a.dy[o..o + LANES]);
                    fma3::<T, FUSED>(acc_g, &d, &s);
                }
            }
            for (g, acc_g) in acc.iter().enumerate() {
                for (k, acc_k) in acc_g.iter().enumerate() {
                    let s: T = acc_k.iter().copied().sum();
                    gw[(o0 + g) * per_out + i * TAPS + t0 + k] += s;
                }
            }
        }
    }
    G
}
