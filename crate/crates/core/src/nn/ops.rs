//! Forward and backward kernels.

use serde::{Deserialize, Serialize};

use super::conv::Geometry;
use super::{gemm, Mat, Real, Tensor};
use crate::volumes::Shape3;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Boundary handling of 3x3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zeros,
    Periodic,
}

/// Offsets of a cubic convolution's parameters in the flat parameter vector.
/// Weights are laid out `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvLayer {
    fn taps(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }
}

/// Dense layer `y = W x + b` with `W` laid out `[nout][nin]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: usize,
    pub bias: usize,
    pub nin: usize,
    pub nout: usize,
}

pub fn conv_forward<T: Real>(params: &[T], layer: &ConvLayer, padding: Padding, x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.channels, layer.cin, "conv input channels");
    let n = x.voxels();
    let taps = layer.taps();
    let mut y = match layer.kernel {
        1 => {
            let mut y = Tensor::zeros(layer.cout, x.shape);
            gemm(
                layer.cout,
                layer.cin,
                n,
                params,
                Mat::rows(layer.weight, taps),
                &x.data,
                Mat::rows(0, n),
                T::zero(),
                &mut y.data,
                Mat::rows(0, n),
            );
            y
        }
        3 => {
            let geo = Geometry::new(x.shape);
            let xp = geo.pad(&x.data, layer.cin, padding);
            let w = &params[layer.weight..layer.weight + layer.cout * taps];
            let out = geo.correlate(w, layer.cout, layer.cin, &xp);
            Tensor::from_vec(layer.cout, x.shape, geo.from_j(&out, layer.cout))
        }
        k => panic!("unsupported kernel size {k}"),
    };
    for c in 0..layer.cout {
        let b = params[layer.bias + c];
        for v in y.channel_mut(c) {
            *v += b;
        }
    }
    y
}

/// Accumulates weight and bias gradients into `grads`; returns the input
/// gradient when `need_dx`.
pub fn conv_backward<T: Real>(
    params: &[T],
    layer: &ConvLayer,
    padding: Padding,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let n = x.voxels();
    let taps = layer.taps();
    for c in 0..layer.cout {
        let s: T = dy.channel(c).iter().copied().sum();
        grads[layer.bias + c] += s;
    }
    if layer.kernel == 1 {
        gemm(
            layer.cout,
            n,
            layer.cin,
            &dy.data,
            Mat::rows(0, n),
            &x.data,
            Mat::t(0, n),
            T::one(),
            grads,
            Mat::rows(layer.weight, taps),
        );
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(layer.cin, x.shape);
        gemm(
            layer.cin,
            layer.cout,
            n,
            params,
            Mat::t(layer.weight, taps),
            &dy.data,
            Mat::rows(0, n),
            T::zero(),
            &mut dx.data,
            Mat::rows(0, n),
        );
        return Some(dx);
    }
    assert_eq!(layer.kernel, 3, "unsupported kernel size");
    let geo = Geometry::new(x.shape);
    let xp = geo.pad(&x.data, layer.cin, padding);
    let dyj = geo.to_j(&dy.data, layer.cout);
    let wlen = layer.cout * taps;
    geo.weight_grad(
        &dyj,
        layer.cout,
        layer.cin,
        &xp,
        &mut grads[layer.weight..layer.weight + wlen],
    );
    if !need_dx {
        return None;
    }
    // The input gradient is a correlation of the output gradient with the
    // spatially flipped, channel-transposed kernel.
    let w = &params[layer.weight..layer.weight + wlen];
    let k3 = 27;
    let mut wt = vec![T::zero(); wlen];
    for o in 0..layer.cout {
        for i in 0..layer.cin {
            for t in 0..k3 {
                wt[(i * layer.cout + o) * k3 + t] = w[(o * layer.cin + i) * k3 + k3 - 1 - t];
            }
        }
    }
    let dyp = geo.pad(&dy.data, layer.cout, padding);
    let dx = geo.correlate(&wt, layer.cin, layer.cout, &dyp);
    Some(Tensor::from_vec(layer.cin, x.shape, geo.from_j(&dx, layer.cin)))
}

/// Per-group normalization statistics.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub rstd: Vec<f64>,
}

/// Zero-mean, unit-variance normalization over channel groups (no affine).
pub fn group_norm_forward<T: Real>(x: &Tensor<T>, groups: usize) -> (Tensor<T>, GroupStats) {
    assert!(groups > 0 && x.channels % groups == 0, "group count must divide channels");
    let block = x.channels / groups * x.voxels();
    let mut y = Tensor::zeros(x.channels, x.shape);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let src = &x.data[g * block..(g + 1) * block];
        let mean = src.iter().map(|v| v.f64()).sum::<f64>() / block as f64;
        let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / block as f64;
        let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        let (mt, rt) = (T::of(mean), T::of(r));
        for (o, &v) in y.data[g * block..(g + 1) * block].iter_mut().zip(src) {
            *o = (v - mt) * rt;
        }
        rstd.push(r);
    }
    (y, GroupStats { rstd })
}

pub fn group_norm_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, groups: usize, stats: &GroupStats) -> Tensor<T> {
    let block = y.channels / groups * y.voxels();
    let mut dx = Tensor::zeros(y.channels, y.shape);
    for g in 0..groups {
        let ys = &y.data[g * block..(g + 1) * block];
        let ds = &dy.data[g * block..(g + 1) * block];
        let mean_dy = ds.iter().map(|v| v.f64()).sum::<f64>() / block as f64;
        let mean_dyy = ds.iter().zip(ys).map(|(d, v)| d.f64() * v.f64()).sum::<f64>() / block as f64;
        let (a, b, r) = (T::of(mean_dy), T::of(mean_dyy), T::of(stats.rstd[g]));
        for ((o, &d), &v) in dx.data[g * block..(g + 1) * block].iter_mut().zip(ds).zip(ys) {
            *o = r * (d - a - v * b);
        }
    }
    dx
}

/// `y[c] = x[c] * (1 + scale[c]) + shift[c]` with `ss = [scale; shift]`.
pub fn film_forward<T: Real>(x: &Tensor<T>, ss: &Tensor<T>) -> Tensor<T> {
    assert_eq!(ss.data.len(), 2 * x.channels, "modulation width");
    let mut y = x.clone();
    for c in 0..x.channels {
        let s = T::one() + ss.data[c];
        let t = ss.data[x.channels + c];
        for v in y.channel_mut(c) {
            *v = *v * s + t;
        }
    }
    y
}

pub fn film_backward<T: Real>(x: &Tensor<T>, ss: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut dx = dy.clone();
    let mut dss = vec![T::zero(); ss.data.len()];
    for c in 0..x.channels {
        let s = T::one() + ss.data[c];
        let mut ds = 0.0;
        let mut dt = 0.0;
        for ((d, &g), &v) in dx.channel_mut(c).iter_mut().zip(dy.channel(c)).zip(x.channel(c)) {
            *d = g * s;
            ds += g.f64() * v.f64();
            dt += g.f64();
        }
        dss[c] = T::of(ds);
        dss[x.channels + c] = T::of(dt);
    }
    (dx, Tensor::from_vec(ss.channels, ss.shape, dss))
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v * sigmoid(*v);
    }
    y
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    }
    dx
}

fn halved(shape: Shape3) -> Shape3 {
    assert!(
        shape.0.iter().all(|n| n % 2 == 0),
        "pooling needs even extents, got {shape}"
    );
    Shape3::new(shape.nx() / 2, shape.ny() / 2, shape.nz() / 2)
}

/// 2x2x2 average pooling.
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let out = halved(x.shape);
    let mut y = Tensor::zeros(x.channels, out);
    let eighth = T::of(0.125);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for z in 0..out.nz() {
            for yy in 0..out.ny() {
                for xx in 0..out.nx() {
                    let mut s = T::zero();
                    for (dz, dy, dx) in OCTANTS {
                        s += src[x.shape.index(2 * xx + dx, 2 * yy + dy, 2 * z + dz)];
                    }
                    dst[out.index(xx, yy, z)] = s * eighth;
                }
            }
        }
    }
    y
}

const OCTANTS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn avg_pool_backward<T: Real>(input_shape: Shape3, dy: &Tensor<T>) -> Tensor<T> {
    let out = dy.shape;
    let mut dx = Tensor::zeros(dy.channels, input_shape);
    let eighth = T::of(0.125);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for z in 0..out.nz() {
            for yy in 0..out.ny() {
                for xx in 0..out.nx() {
                    let v = g[out.index(xx, yy, z)] * eighth;
                    for (dz, dy, dx) in OCTANTS {
                        dst[input_shape.index(2 * xx + dx, 2 * yy + dy, 2 * z + dz)] = v;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let out = Shape3::new(2 * s.nx(), 2 * s.ny(), 2 * s.nz());
    let mut y = Tensor::zeros(x.channels, out);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for z in 0..out.nz() {
            for yy in 0..out.ny() {
                let srow = s.index(0, yy / 2, z / 2);
                let drow = out.index(0, yy, z);
                for xx in 0..out.nx() {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let out = dy.shape;
    let s = halved(out);
    let mut dx = Tensor::zeros(dy.channels, s);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for z in 0..out.nz() {
            for yy in 0..out.ny() {
                let srow = s.index(0, yy / 2, z / 2);
                let drow = out.index(0, yy, z);
                for xx in 0..out.nx() {
                    dst[srow + xx / 2] += g[drow + xx];
                }
            }
        }
    }
    dx
}

pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape, b.shape, "concat shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.shape, data)
}

pub fn concat_backward<T: Real>(a_channels: usize, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let split = a_channels * dy.voxels();
    (
        Tensor::from_vec(a_channels, dy.shape, dy.data[..split].to_vec()),
        Tensor::from_vec(dy.channels - a_channels, dy.shape, dy.data[split..].to_vec()),
    )
}

pub fn add_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.same_layout(b), "add layouts");
    let mut y = a.clone();
    for (u, &v) in y.data.iter_mut().zip(&b.data) {
        *u += v;
    }
    y
}

pub fn linear_forward<T: Real>(params: &[T], layer: &LinearLayer, x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.data.len(), layer.nin, "linear input width");
    let mut y = params[layer.bias..layer.bias + layer.nout].to_vec();
    for (o, out) in y.iter_mut().enumerate() {
        let row = &params[layer.weight + o * layer.nin..layer.weight + (o + 1) * layer.nin];
        for (w, &v) in row.iter().zip(&x.data) {
            *out += *w * v;
        }
    }
    Tensor::vector(y)
}

pub fn linear_backward<T: Real>(
    params: &[T],
    layer: &LinearLayer,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut [T],
) -> Tensor<T> {
    let mut dx = vec![T::zero(); layer.nin];
    for o in 0..layer.nout {
        let g = dy.data[o];
        grads[layer.bias + o] += g;
        let base = layer.weight + o * layer.nin;
        for i in 0..layer.nin {
            grads[base + i] += g * x.data[i];
            dx[i] += g * params[base + i];
        }
    }
    Tensor::vector(dx)
}
