//! Dense 4-D tensors and the forward kernels the network is assembled from.
//!
//! Every tensor is laid out row-major as `(n, c, h, w)`. Kernels that reduce
//! (convolution, matrix products) accumulate in ascending index order so that
//! results are bit-reproducible regardless of how work is split across
//! threads: parallelism is only ever over independent output slabs.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(dims: [usize; 4]) -> Self {
        Shape::new(dims[0], dims[1], dims[2], dims[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Samples every element uniformly from `[lo, hi)`.
    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// A 2-D matrix stored as a `(1, 1, rows, cols)` tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(Shape::new(1, 1, rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != Shape::scalar() {
            return Err(Error::invalid(
                "item",
                format!("expected a scalar, got {}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// In-place `self += other` for identical shapes.
    pub fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1, no padding.
    pub const fn pointwise() -> Self {
        ConvGeometry::new(1, 0, 1)
    }

    /// Shape-preserving geometry for an odd `k×k` kernel.
    pub const fn same(k: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation * (k / 2), dilation)
    }

    /// Output extent along one axis, or `None` if it would be empty.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel.checked_sub(1)?) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// An owned convolution: kernel `(out_ch, in_ch, kh, kw)`, optional bias and geometry.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub kernel: Tensor,
    pub bias: Option<Vec<f64>>,
    pub geometry: ConvGeometry,
}

impl ConvSpec {
    pub fn new(kernel: Tensor, bias: Option<Vec<f64>>, geometry: ConvGeometry) -> Self {
        ConvSpec {
            kernel,
            bias,
            geometry,
        }
    }
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_with(x, &spec.kernel, spec.bias.as_deref(), spec.geometry)
}

pub(crate) fn conv_output_shape(
    x: Shape,
    kernel: Shape,
    bias: Option<usize>,
    geom: ConvGeometry,
) -> Result<Shape> {
    if x.c != kernel.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x,
            right: kernel,
        });
    }
    if let Some(len) = bias {
        if len != kernel.n {
            return Err(Error::invalid(
                "conv2d",
                format!("bias length {len} does not match {} output channels", kernel.n),
            ));
        }
    }
    let oh = geom.output_len(x.h, kernel.h);
    let ow = geom.output_len(x.w, kernel.w);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(x.n, kernel.n, oh, ow)),
        _ => Err(Error::invalid(
            "conv2d",
            format!("input {x} with kernel {kernel} and {geom:?} yields an empty output"),
        )),
    }
}

/// Output positions `o` along one axis for which `o*stride - pad + tap` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, tap: usize, geom: ConvGeometry) -> (usize, usize) {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let off = tap as isize - p;
    // o*s + off >= 0  and  o*s + off <= len-1
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_num = len as isize - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let hi = hi.min(out_len as isize - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

/// Cross-correlation with stride, zero padding and dilation.
pub fn conv2d_with(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    let out_shape = conv_output_shape(xs, ks, bias.map(<[f64]>::len), geom)?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = Tensor::zeros(out_shape);
    let plane = oh * ow;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slab, dst)| {
            let (n, co) = (slab / ks.n, slab % ks.n);
            if let Some(b) = bias {
                dst.fill(b[co]);
            }
            for ci in 0..ks.c {
                let src = &x.data[(n * xs.c + ci) * xs.plane()..][..xs.plane()];
                for ky in 0..ks.h {
                    let (y0, y1) = valid_range(xs.h, oh, ky * geom.dilation, geom);
                    for kx in 0..ks.w {
                        let wv = kernel.at(co, ci, ky, kx);
                        let (x0, x1) = valid_range(xs.w, ow, kx * geom.dilation, geom);
                        for oy in y0..y1 {
                            let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                            let row = &src[iy * xs.w..][..xs.w];
                            let drow = &mut dst[oy * ow..][..ow];
                            for ox in x0..x1 {
                                let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                                drow[ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_grad_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: Shape,
    geom: ConvGeometry,
) -> Tensor {
    let gs = grad_out.shape();
    let ks = kernel.shape();
    let mut dx = Tensor::zeros(input_shape);
    let plane = input_shape.plane();
    dx.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(slab, dst)| {
            let (n, ci) = (slab / input_shape.c, slab % input_shape.c);
            for co in 0..ks.n {
                let g = &grad_out.data[(n * gs.c + co) * gs.plane()..][..gs.plane()];
                for ky in 0..ks.h {
                    let (y0, y1) = valid_range(input_shape.h, gs.h, ky * geom.dilation, geom);
                    for kx in 0..ks.w {
                        let wv = kernel.at(co, ci, ky, kx);
                        let (x0, x1) = valid_range(input_shape.w, gs.w, kx * geom.dilation, geom);
                        for oy in y0..y1 {
                            let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                            let grow = &g[oy * gs.w..][..gs.w];
                            let drow = &mut dst[iy * input_shape.w..][..input_shape.w];
                            for ox in x0..x1 {
                                let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                                drow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of a convolution with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: Shape,
    geom: ConvGeometry,
) -> Tensor {
    let gs = grad_out.shape();
    let xs = input.shape();
    let ks = kernel_shape;
    let mut dk = Tensor::zeros(ks);
    let per_out = ks.c * ks.h * ks.w;
    dk.data
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(co, dst)| {
            for n in 0..xs.n {
                let g = &grad_out.data[(n * gs.c + co) * gs.plane()..][..gs.plane()];
                for ci in 0..ks.c {
                    let src = &input.data[(n * xs.c + ci) * xs.plane()..][..xs.plane()];
                    for ky in 0..ks.h {
                        let (y0, y1) = valid_range(xs.h, gs.h, ky * geom.dilation, geom);
                        for kx in 0..ks.w {
                            let (x0, x1) = valid_range(xs.w, gs.w, kx * geom.dilation, geom);
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                                let row = &src[iy * xs.w..][..xs.w];
                                let grow = &g[oy * gs.w..][..gs.w];
                                for ox in x0..x1 {
                                    let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                                    acc += grow[ox] * row[ix];
                                }
                            }
                            dst[(ci * ks.h + ky) * ks.w + kx] += acc;
                        }
                    }
                }
            }
        });
    dk
}

/// Per-output-channel sums of a gradient, i.e. the bias gradient.
pub(crate) fn channel_sums(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let mut out = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            *o += t.data[(n * s.c + c) * s.plane()..][..s.plane()]
                .iter()
                .sum::<f64>();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched matrix product over the trailing two dimensions:
/// `(n, c, r, k) · (n, c, k, m) -> (n, c, r, m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: sa,
            right: sb,
        });
    }
    let (r, k, m) = (sa.h, sa.w, sb.w);
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c, r, m));
    out.data
        .par_chunks_mut((r * m).max(1))
        .enumerate()
        .for_each(|(slab, dst)| {
            let am = &a.data[slab * r * k..][..r * k];
            let bm = &b.data[slab * k * m..][..k * m];
            for i in 0..r {
                let drow = &mut dst[i * m..][..m];
                for kk in 0..k {
                    let av = am[i * k + kk];
                    let brow = &bm[kk * m..][..m];
                    for j in 0..m {
                        drow[j] += av * brow[j];
                    }
                }
            }
        });
    Ok(out)
}

/// Swaps the trailing two dimensions.
pub fn transpose(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.w, s.h));
    for slab in 0..s.n * s.c {
        let src = &x.data[slab * s.plane()..][..s.plane()];
        let dst = &mut out.data[slab * s.plane()..][..s.plane()];
        for i in 0..s.h {
            for j in 0..s.w {
                dst[j * s.h + i] = src[i * s.w + j];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Softmax and pointwise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Height,
    Width,
}

impl Axis {
    /// `(outer, len, inner)` decomposition of a shape around this axis:
    /// element `(o, i, k)` lives at `(o * len + i) * inner + k`.
    pub(crate) fn split(self, s: Shape) -> (usize, usize, usize) {
        match self {
            Axis::Channel => (s.n, s.c, s.h * s.w),
            Axis::Height => (s.n * s.c, s.h, s.w),
            Axis::Width => (s.n * s.c * s.h, s.w, 1),
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &Tensor, axis: Axis) -> Tensor {
    let (outer, len, inner) = axis.split(x.shape());
    let mut out = x.clone();
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * len + i) * inner + k;
            let max = (0..len).map(|i| x.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (x.data[at(i)] - max).exp();
                out.data[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out.data[at(i)] /= total;
            }
        }
    }
    out
}

/// Replaces every entry by `max_along_axis - entry`.
pub fn max_minus(x: &Tensor, axis: Axis) -> Tensor {
    let (outer, len, inner) = axis.split(x.shape());
    let mut out = x.clone();
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * len + i) * inner + k;
            let max = (0..len).map(|i| x.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..len {
                out.data[at(i)] = max - x.data[at(i)];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// How the right operand of an elementwise op is expanded to the left shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    None,
    /// `(n, 1, h, w)` spatial map shared across channels.
    Spatial,
    /// `(n, c, 1, 1)` per-channel vector shared across positions.
    Channel,
}

impl Broadcast {
    pub(crate) fn resolve(a: Shape, b: Shape) -> Result<Broadcast> {
        if a == b {
            Ok(Broadcast::None)
        } else if b == Shape::new(a.n, 1, a.h, a.w) {
            Ok(Broadcast::Spatial)
        } else if b == Shape::new(a.n, a.c, 1, 1) {
            Ok(Broadcast::Channel)
        } else {
            Err(Error::ShapeMismatch {
                op: "binary_ew",
                left: a,
                right: b,
            })
        }
    }

    /// Index into the right operand for flat index `i` of the left shape.
    #[inline]
    pub(crate) fn source(self, a: Shape, i: usize) -> usize {
        match self {
            Broadcast::None => i,
            Broadcast::Spatial => {
                let plane = a.plane();
                (i / (a.c * plane)) * plane + i % plane
            }
            Broadcast::Channel => i / a.plane(),
        }
    }
}

pub fn binary_ew(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let sa = a.shape();
    let bc = Broadcast::resolve(sa, b.shape())?;
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &av)| {
            let bv = b.data[bc.source(sa, i)];
            match op {
                BinaryOp::Add => av + bv,
                BinaryOp::Mul => av * bv,
            }
        })
        .collect();
    Ok(Tensor { shape: sa, data })
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first,
                right: s,
            });
        }
        channels += s.c;
    }
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            let per = p.shape().c * first.plane();
            data.extend_from_slice(&p.data[n * per..][..per]);
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {start}..{} outside {} channels", start + len, s.c),
        ));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        data.extend_from_slice(&x.data[(n * s.c + start) * plane..][..len * plane]);
    }
    Ok(Tensor {
        shape: Shape::new(s.n, len, s.h, s.w),
        data,
    })
}

// ---------------------------------------------------------------------------
// Bilinear resampling
// ---------------------------------------------------------------------------

/// Interpolation taps for one output coordinate: `(lo, hi, weight_of_hi)`.
pub(crate) type Tap = (usize, usize, f64);

/// Half-pixel-centre bilinear taps mapping `src_len` samples onto `dst_len`.
pub(crate) fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let ty = bilinear_taps(s.h, oh);
    let tx = bilinear_taps(s.w, ow);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let (src_plane, dst_plane) = (s.plane(), oh * ow);
    for slab in 0..s.n * s.c {
        let src = &x.data[slab * src_plane..][..src_plane];
        let dst = &mut out.data[slab * dst_plane..][..dst_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Transpose of [`resize_bilinear`]: scatters output gradients back onto the source grid.
pub(crate) fn resize_bilinear_grad(grad_out: &Tensor, input_shape: Shape) -> Tensor {
    let gs = grad_out.shape();
    let ty = bilinear_taps(input_shape.h, gs.h);
    let tx = bilinear_taps(input_shape.w, gs.w);
    let mut dx = Tensor::zeros(input_shape);
    let (src_plane, dst_plane) = (input_shape.plane(), gs.plane());
    let w = input_shape.w;
    for slab in 0..gs.n * gs.c {
        let g = &grad_out.data[slab * dst_plane..][..dst_plane];
        let d = &mut dx.data[slab * src_plane..][..src_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[oy * gs.w + ox];
                d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                d[y1 * w + x0] += gv * fy * (1.0 - fx);
                d[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

/// Bilinear upsampling by an integer factor (align-corners off).
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample_bilinear", "factor must be positive"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    Ok(resize_bilinear(x, s.h * factor, s.w * factor))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    SpatialAvg,
    SpatialMax,
    ChannelAvg,
    ChannelMax,
}

impl PoolMode {
    pub(crate) fn output_shape(self, s: Shape) -> Shape {
        match self {
            PoolMode::SpatialAvg | PoolMode::SpatialMax => Shape::new(s.n, s.c, 1, 1),
            PoolMode::ChannelAvg | PoolMode::ChannelMax => Shape::new(s.n, 1, s.h, s.w),
        }
    }

    /// Flat input indices reduced into output element `o`.
    pub(crate) fn members(self, s: Shape, o: usize) -> impl Iterator<Item = usize> {
        let plane = s.plane();
        let (start, step, count) = match self {
            PoolMode::SpatialAvg | PoolMode::SpatialMax => (o * plane, 1, plane),
            PoolMode::ChannelAvg | PoolMode::ChannelMax => {
                let (n, p) = (o / plane, o % plane);
                (n * s.c * plane + p, plane, s.c)
            }
        };
        (0..count).map(move |k| start + k * step)
    }

    pub(crate) fn is_max(self) -> bool {
        matches!(self, PoolMode::SpatialMax | PoolMode::ChannelMax)
    }
}

/// Pooled values plus, for max modes, the first maximal input index of each output.
pub(crate) fn pool_with_argmax(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if x.is_empty() {
        return Err(Error::invalid("pool", format!("empty input {s}")));
    }
    let out_shape = mode.output_shape(s);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::new();
    for o in 0..out_shape.numel() {
        if mode.is_max() {
            let mut best = usize::MAX;
            for i in mode.members(s, o) {
                if best == usize::MAX || x.data[i] > x.data[best] {
                    best = i;
                }
            }
            out.data[o] = x.data[best];
            argmax.push(best);
        } else {
            let (mut total, mut count) = (0.0, 0usize);
            for i in mode.members(s, o) {
                total += x.data[i];
                count += 1;
            }
            out.data[o] = total / count as f64;
        }
    }
    Ok((out, argmax))
}

pub fn pool(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    pool_with_argmax(x, mode).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-dropout multipliers: `0` with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn dropout(x: &Tensor, p: f64, rng: &mut impl Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng);
    Ok(x.map_indexed(|i, v| v * mask[i]))
}

impl Tensor {
    pub(crate) fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
        }
    }
}
