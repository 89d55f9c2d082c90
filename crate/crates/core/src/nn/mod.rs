//! Minimal dense tensor kernels and reverse-mode differentiation for the
//! 3D convolutional score network.
//!
//! Tensors are single-sample and channel-major: element `(c, x, y, z)` lives
//! at `c * n + shape.index(x, y, z)` where `n` is the voxel count. Network
//! code is written once against [`Ctx`]; [`Infer`] evaluates eagerly and
//! drops intermediates, [`Tape`] records them for a backward pass.

mod conv;
mod ctx;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::volumes::Shape3;

pub use ctx::{Ctx, Infer, Tape, Var};
pub use ops::{ConvLayer, LinearLayer, Padding};

/// Floating-point scalar usable by the network kernels.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view descriptor of an `rows x cols` matrix inside a slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn rows(offset: usize, rs: usize) -> Self {
        Self { offset, rs, cs: 1 }
    }

    /// Transposed view of a row-major matrix with row stride `rs`.
    pub fn t(offset: usize, rs: usize) -> Self {
        Self { offset, rs: 1, cs: rs }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// Bounds-checked `c = a * b + beta * c` where `a` is `m x k` and `b` is
/// `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    am: Mat,
    b: &[T],
    bm: Mat,
    beta: T,
    c: &mut [T],
    cm: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(am.span(m, k) <= a.len(), "gemm: a out of bounds");
    assert!(bm.span(k, n) <= b.len(), "gemm: b out of bounds");
    assert!(cm.span(m, n) <= c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above bound every index reachable from the
    // offsets, strides and extents.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(am.offset),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.offset),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

/// A single-sample activation: `channels` scalar grids of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            data: vec![T::zero(); channels * shape.len()],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * shape.len(), "tensor size mismatch");
        Self {
            channels,
            shape,
            data,
        }
    }

    /// A plain vector, stored as `len` channels of a single voxel.
    pub fn vector(data: Vec<T>) -> Self {
        let channels = data.len();
        Self {
            channels,
            shape: Shape3::cube(1),
            data,
        }
    }

    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.channels == other.channels && self.shape == other.shape
    }
}

/// Named parameter block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Fan-in used for initialization; 0 marks zero-initialized blocks.
    pub fan_in: usize,
    pub scale: f64,
}

/// Allocation table mapping layers onto one flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize, fan_in: usize, scale: f64) -> usize {
        let offset = self.total;
        self.entries.push(ParamEntry {
            name: name.into(),
            offset,
            len,
            fan_in,
            scale,
        });
        self.total += len;
        offset
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        padding: Padding,
        zero_init: bool,
    ) -> ConvLayer {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = self.alloc(
            format!("{name}.weight"),
            cout * fan_in,
            if zero_init { 0 } else { fan_in },
            1.0,
        );
        let bias = self.alloc(format!("{name}.bias"), cout, 0, 0.0);
        ConvLayer {
            weight,
            bias,
            cin,
            cout,
            kernel,
            padding,
        }
    }

    pub fn linear(&mut self, name: &str, nin: usize, nout: usize, scale: f64) -> LinearLayer {
        let weight = self.alloc(format!("{name}.weight"), nin * nout, nin, scale);
        let bias = self.alloc(format!("{name}.bias"), nout, 0, 0.0);
        LinearLayer { weight, bias, nin, nout }
    }

    /// Uniform fan-in scaled initialization, `U(-b, b)` with
    /// `b = scale * sqrt(3 / fan_in)`; blocks with zero fan-in start at 0.
    pub fn init<T: Real>(&self, rng: &mut impl rand::Rng) -> Vec<T> {
        let mut params = vec![T::zero(); self.total];
        for e in &self.entries {
            if e.fan_in == 0 || e.scale == 0.0 {
                continue;
            }
            let bound = e.scale * (3.0 / e.fan_in as f64).sqrt();
            for p in &mut params[e.offset..e.offset + e.len] {
                *p = T::of(rng.random_range(-bound..bound));
            }
        }
        params
    }
}
