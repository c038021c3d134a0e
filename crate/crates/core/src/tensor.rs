//! Dense `f64` tensors and the primitive kernels the rest of the crate is
//! built from.
//!
//! Feature maps are NCHW, row-major. Every kernel here is a pure function of
//! its arguments; nothing mutates an input.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err(
                "dims4",
                format!("expected a rank-4 NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Flat offset of `(n, c, h, w)`; the tensor must be rank 4.
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset4(n, c, h, w)]
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.shape.len()];
        for (slot, &dim) in out.iter_mut().zip(&self.shape).rev() {
            *slot = index % dim;
            index /= dim;
        }
        out
    }

    /// Flat offset of a multi-index.
    pub fn ravel(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err(
                "dot",
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub(crate) fn debug_check_finite(t: &Tensor, op: &str) {
    debug_assert!(t.is_finite(), "{op} produced a non-finite value");
    let _ = (t, op);
}

/// Elementwise product of two identically shaped tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// Grouping, stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize, groups: usize) -> Self {
        Self {
            groups,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// A convolution filter bank: weights `(C_out, C_in / groups, k, k)` plus an
/// optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl ConvKernel {
    pub fn new(weight: Tensor, bias: Option<Tensor>, geometry: ConvGeometry) -> Result<Self> {
        let [c_out, _, _, _] = weight.dims4()?;
        if geometry.groups == 0 || geometry.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "groups and stride must be positive, got {geometry:?}"
            )));
        }
        if c_out % geometry.groups != 0 {
            return Err(shape_err(
                "ConvKernel::new",
                format!("C_out={c_out} is not divisible by groups={}", geometry.groups),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(shape_err(
                    "ConvKernel::new",
                    format!("bias shape {:?} does not match C_out={c_out}", b.shape()),
                ));
            }
        }
        Ok(Self {
            weight,
            bias,
            geometry,
        })
    }

    /// Depthwise `k x k` filter bank with "same" zero padding; `weight` is `(C, 1, k, k)`.
    pub fn depthwise(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [c, per_group, kh, kw] = weight.dims4()?;
        if per_group != 1 || kh != kw || kh % 2 == 0 {
            return Err(shape_err(
                "ConvKernel::depthwise",
                format!("expected (C, 1, k, k) with odd k, got {:?}", weight.shape()),
            ));
        }
        Self::new(weight, bias, ConvGeometry::same(kh, c))
    }

    /// `1 x 1` channel-mixing convolution; `weight` is `(C_out, C_in, 1, 1)`.
    pub fn pointwise(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(
            weight,
            bias,
            ConvGeometry {
                groups: 1,
                stride: 1,
                padding: 0,
            },
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.geometry.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Output positions `o` for which `o * stride + tap - pad` lands in `0..input_len`.
#[inline]
fn tap_range(out_len: usize, input_len: usize, stride: usize, pad: usize, tap: usize) -> Range<usize> {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if input_len + pad > tap {
        ((input_len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    in_per_group: usize,
    out_per_group: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input_shape: &[usize], weight: &Tensor, geom: ConvGeometry) -> Result<ConvDims> {
    let [n, c_in, h, w] = match *input_shape {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(shape_err(
                "conv2d",
                format!("input must be NCHW, got {input_shape:?}"),
            ))
        }
    };
    let [c_out, in_per_group, kh, kw] = weight.dims4()?;
    if geom.groups == 0 || c_out % geom.groups != 0 {
        return Err(shape_err(
            "conv2d",
            format!("C_out={c_out} not divisible by groups={}", geom.groups),
        ));
    }
    if in_per_group * geom.groups != c_in {
        return Err(shape_err(
            "conv2d",
            format!(
                "input has C={c_in} but kernel expects {} ({} per group x {} groups)",
                in_per_group * geom.groups,
                in_per_group,
                geom.groups
            ),
        ));
    }
    let (ho, wo) = match (geom.output_len(h, kh), geom.output_len(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} with padding {} does not fit input {h}x{w}",
                    geom.padding
                ),
            ))
        }
    };
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        in_per_group,
        out_per_group: c_out / geom.groups,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Kernel taps that touch at least one in-bounds input, with their output ranges.
fn live_taps(d: &ConvDims, geom: ConvGeometry) -> Vec<(usize, usize, Range<usize>, Range<usize>)> {
    let (s, p) = (geom.stride, geom.padding);
    let mut taps = Vec::new();
    for kh in 0..d.kh {
        let rows = tap_range(d.ho, d.h, s, p, kh);
        if rows.is_empty() {
            continue;
        }
        for kw in 0..d.kw {
            let cols = tap_range(d.wo, d.w, s, p, kw);
            if !cols.is_empty() {
                taps.push((kh, kw, rows.clone(), cols));
            }
        }
    }
    taps
}

/// `c += a · b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Patch matrix of an ungrouped convolution: one row per output position
/// `(n, oh, ow)`, one column per `(ic, kh, kw)` tap; padding reads as zero.
fn im2col(x: &[f64], d: &ConvDims, geom: ConvGeometry) -> Vec<f64> {
    let (s, p) = (geom.stride, geom.padding);
    let k = d.c_in * d.kh * d.kw;
    let mut cols = vec![0.0; d.n * d.ho * d.wo * k];
    for n in 0..d.n {
        for ic in 0..d.c_in {
            let plane = &x[(n * d.c_in + ic) * d.h * d.w..][..d.h * d.w];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let col = (ic * d.kh + kh) * d.kw + kw;
                    for oh in tap_range(d.ho, d.h, s, p, kh) {
                        let ih = oh * s + kh - p;
                        for ow in tap_range(d.wo, d.w, s, p, kw) {
                            let row = (n * d.ho + oh) * d.wo + ow;
                            cols[row * k + col] = plane[ih * d.w + ow * s + kw - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeometry, out: &mut [f64]) {
    let (s, p) = (geom.stride, geom.padding);
    let k = d.c_in * d.kh * d.kw;
    for n in 0..d.n {
        for ic in 0..d.c_in {
            let plane = &mut out[(n * d.c_in + ic) * d.h * d.w..][..d.h * d.w];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let col = (ic * d.kh + kh) * d.kw + kw;
                    for oh in tap_range(d.ho, d.h, s, p, kh) {
                        let ih = oh * s + kh - p;
                        for ow in tap_range(d.wo, d.w, s, p, kw) {
                            let row = (n * d.ho + oh) * d.wo + ow;
                            plane[ih * d.w + ow * s + kw - p] += cols[row * k + col];
                        }
                    }
                }
            }
        }
    }
}

/// Upstream gradient laid out as `(n·oh·ow, c_out)`.
fn channels_last(g: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.n * plane * d.c_out];
    for n in 0..d.n {
        let t = transpose(d.c_out, plane, &g[n * d.c_out * plane..][..d.c_out * plane]);
        out[n * plane * d.c_out..][..plane * d.c_out].copy_from_slice(&t);
    }
    out
}

fn conv_gemm_forward(x: &[f64], weight: &[f64], bias: Option<&Tensor>, d: &ConvDims, geom: ConvGeometry) -> Tensor {
    let k = d.c_in * d.kh * d.kw;
    let rows = d.n * d.ho * d.wo;
    let cols = im2col(x, d, geom);
    let wt = transpose(d.c_out, k, weight);
    let mut out_cl = vec![0.0; rows * d.c_out];
    gemm_acc(rows, k, d.c_out, &cols, &wt, &mut out_cl);
    let plane = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.c_out, d.ho, d.wo]);
    for n in 0..d.n {
        let t = transpose(plane, d.c_out, &out_cl[n * plane * d.c_out..][..plane * d.c_out]);
        out.data[n * d.c_out * plane..][..d.c_out * plane].copy_from_slice(&t);
    }
    if let Some(b) = bias {
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += b.data[(i / plane) % d.c_out];
        }
    }
    out
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    conv2d_raw(input, &kernel.weight, kernel.bias.as_ref(), kernel.geometry)
}

/// [`conv2d`] over loose weight/bias tensors.
pub fn conv2d_raw(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = conv_dims(input.shape(), weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} does not match C_out={}", b.shape(), d.c_out),
            ));
        }
    }
    if geom.groups == 1 {
        let out = conv_gemm_forward(input.data(), weight.data(), bias, &d, geom);
        debug_check_finite(&out, "conv2d");
        return Ok(out);
    }
    let mut out = Tensor::zeros(&[d.n, d.c_out, d.ho, d.wo]);
    let (s, p) = (geom.stride, geom.padding);
    let x = input.data();
    let wt = weight.data();
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let taps = live_taps(&d, geom);
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.out_per_group;
            let o_off = (n * d.c_out + oc) * plane_out;
            let out_plane = &mut out.data[o_off..o_off + plane_out];
            if let Some(b) = bias {
                out_plane.fill(b.data()[oc]);
            }
            for icg in 0..d.in_per_group {
                let ic = g * d.in_per_group + icg;
                let in_plane = &x[(n * d.c_in + ic) * plane_in..][..plane_in];
                let w_k = &wt[(oc * d.in_per_group + icg) * d.kh * d.kw..][..d.kh * d.kw];
                for (kh, kw, rows, cols) in &taps {
                    let (kh, kw) = (*kh, *kw);
                    let wv = w_k[kh * d.kw + kw];
                    for oh in rows.clone() {
                        let ih = oh * s + kh - p;
                        let in_row = &in_plane[ih * d.w..][..d.w];
                        let out_row = &mut out_plane[oh * d.wo..][..d.wo];
                        if s == 1 {
                            let src = &in_row[cols.start + kw - p..][..cols.len()];
                            for (o, &i) in out_row[cols.clone()].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ow in cols.clone() {
                                out_row[ow] += wv * in_row[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
    debug_check_finite(&out, "conv2d");
    Ok(out)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    input_shape: &[usize],
) -> Result<Tensor> {
    let d = conv_dims(input_shape, weight, geom)?;
    if grad_out.shape() != [d.n, d.c_out, d.ho, d.wo] {
        return Err(shape_err(
            "conv2d_backward_input",
            format!(
                "upstream gradient {:?} does not match output {:?}",
                grad_out.shape(),
                [d.n, d.c_out, d.ho, d.wo]
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    if geom.groups == 1 {
        let k = d.c_in * d.kh * d.kw;
        let rows = d.n * d.ho * d.wo;
        let g = channels_last(grad_out.data(), &d);
        let mut dcols = vec![0.0; rows * k];
        gemm_acc(rows, d.c_out, k, &g, weight.data(), &mut dcols);
        col2im(&dcols, &d, geom, &mut grad_in.data);
        return Ok(grad_in);
    }
    let (s, p) = (geom.stride, geom.padding);
    let go = grad_out.data();
    let wt = weight.data();
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let taps = live_taps(&d, geom);
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.out_per_group;
            let g_plane = &go[(n * d.c_out + oc) * plane_out..][..plane_out];
            for icg in 0..d.in_per_group {
                let ic = g * d.in_per_group + icg;
                let i_off = (n * d.c_in + ic) * plane_in;
                let in_plane = &mut grad_in.data[i_off..i_off + plane_in];
                let w_k = &wt[(oc * d.in_per_group + icg) * d.kh * d.kw..][..d.kh * d.kw];
                for (kh, kw, rows, cols) in &taps {
                    let (kh, kw) = (*kh, *kw);
                    let wv = w_k[kh * d.kw + kw];
                    for oh in rows.clone() {
                        let ih = oh * s + kh - p;
                        let g_row = &g_plane[oh * d.wo..][..d.wo];
                        let in_row = &mut in_plane[ih * d.w..][..d.w];
                        if s == 1 {
                            let dst = &mut in_row[cols.start + kw - p..][..cols.len()];
                            for (i, &g) in dst.iter_mut().zip(&g_row[cols.clone()]) {
                                *i += wv * g;
                            }
                        } else {
                            for ow in cols.clone() {
                                in_row[ow * s + kw - p] += wv * g_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    input: &Tensor,
    weight_shape: &[usize],
    geom: ConvGeometry,
) -> Result<Tensor> {
    let mut grad_w = Tensor::zeros(weight_shape);
    let d = conv_dims(input.shape(), &grad_w, geom)?;
    if grad_out.shape() != [d.n, d.c_out, d.ho, d.wo] {
        return Err(shape_err(
            "conv2d_backward_weight",
            format!(
                "upstream gradient {:?} does not match output {:?}",
                grad_out.shape(),
                [d.n, d.c_out, d.ho, d.wo]
            ),
        ));
    }
    if geom.groups == 1 {
        let k = d.c_in * d.kh * d.kw;
        let rows = d.n * d.ho * d.wo;
        let g = transpose(rows, d.c_out, &channels_last(grad_out.data(), &d));
        let cols = im2col(input.data(), &d, geom);
        gemm_acc(d.c_out, rows, k, &g, &cols, &mut grad_w.data);
        return Ok(grad_w);
    }
    let (s, p) = (geom.stride, geom.padding);
    let go = grad_out.data();
    let x = input.data();
    let plane_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let taps = live_taps(&d, geom);
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.out_per_group;
            let g_plane = &go[(n * d.c_out + oc) * plane_out..][..plane_out];
            for icg in 0..d.in_per_group {
                let ic = g * d.in_per_group + icg;
                let in_plane = &x[(n * d.c_in + ic) * plane_in..][..plane_in];
                for (kh, kw, rows, cols) in &taps {
                    let (kh, kw) = (*kh, *kw);
                    let mut acc = 0.0;
                    for oh in rows.clone() {
                        let ih = oh * s + kh - p;
                        let g_row = &g_plane[oh * d.wo..][..d.wo];
                        let in_row = &in_plane[ih * d.w..][..d.w];
                        if s == 1 {
                            let src = &in_row[cols.start + kw - p..][..cols.len()];
                            acc += g_row[cols.clone()]
                                .iter()
                                .zip(src)
                                .map(|(g, i)| g * i)
                                .sum::<f64>();
                        } else {
                            for ow in cols.clone() {
                                acc += g_row[ow] * in_row[ow * s + kw - p];
                            }
                        }
                    }
                    grad_w.data[((oc * d.in_per_group + icg) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
    Ok(grad_w)
}

/// Bias gradient: the upstream gradient summed over batch and space.
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = grad_out.dims4()?;
    let plane = h * w;
    let mut gb = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            gb.data[ch] += grad_out.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .sum::<f64>();
        }
    }
    Ok(gb)
}

/// Views NCHW or `(N, C)` as `(outer, channels, inner)` for channel-wise normalisation.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, c] => Ok((n, c, 1)),
        _ => Err(shape_err(
            "layer_norm",
            format!("expected NCHW or (N, C), got {shape:?}"),
        )),
    }
}

fn check_affine(shape: &[usize], gamma: &Tensor, beta: Option<&Tensor>, c: usize) -> Result<()> {
    let ok = gamma.shape() == [c] && beta.is_none_or(|b| b.shape() == [c]);
    if ok {
        Ok(())
    } else {
        Err(shape_err(
            "layer_norm",
            format!(
                "input {shape:?} has C={c}; gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.map(Tensor::shape)
            ),
        ))
    }
}

/// Normalises across channels at every spatial position, then applies the
/// per-channel affine `gamma * x_hat + beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let (outer, c, inner) = channel_layout(input.shape())?;
    check_affine(input.shape(), gamma, Some(beta), c)?;
    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + i;
            let (mean, inv_std, degenerate) = position_stats(x, c, &idx, eps);
            for ch in 0..c {
                let xhat = if degenerate { 0.0 } else { (x[idx(ch)] - mean) * inv_std };
                out.data[idx(ch)] = gamma.data()[ch] * xhat + beta.data()[ch];
            }
        }
    }
    debug_check_finite(&out, "layer_norm");
    Ok(out)
}

#[inline]
fn position_stats(x: &[f64], c: usize, idx: &impl Fn(usize) -> usize, eps: f64) -> (f64, f64, bool) {
    let mean = (0..c).map(|ch| x[idx(ch)]).sum::<f64>() / c as f64;
    let var = (0..c)
        .map(|ch| {
            let d = x[idx(ch)] - mean;
            d * d
        })
        .sum::<f64>()
        / c as f64;
    (mean, 1.0 / libm::sqrt(var + eps), var == 0.0)
}

/// Gradients of [`layer_norm`]: `(d_input, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (outer, c, inner) = channel_layout(input.shape())?;
    check_affine(input.shape(), gamma, None, c)?;
    if grad_out.shape() != input.shape() {
        return Err(shape_err(
            "layer_norm_backward",
            format!("grad {:?} vs input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let x = input.data();
    let gy = grad_out.data();
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + i;
            let (mean, inv_std, degenerate) = position_stats(x, c, &idx, eps);
            for ch in 0..c {
                xhat[ch] = if degenerate { 0.0 } else { (x[idx(ch)] - mean) * inv_std };
                dxhat[ch] = gy[idx(ch)] * gamma.data()[ch];
                dgamma.data[ch] += gy[idx(ch)] * xhat[ch];
                dbeta.data[ch] += gy[idx(ch)];
            }
            let sum_d: f64 = dxhat.iter().sum();
            let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let cf = c as f64;
            for ch in 0..c {
                dx.data[idx(ch)] = inv_std / cf * (cf * dxhat[ch] - sum_d - xhat[ch] * sum_dx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `0.5 (1 + tanh u)` written as the logistic `1 / (1 + e^{-2u})`: one exp, no cancellation.
#[inline]
fn gelu_gate(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    1.0 / (1.0 + libm::exp(-2.0 * u))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_gate(x)
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let g = gelu_gate(x);
    g + 2.0 * x * g * (1.0 - g) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(input: &Tensor) -> Tensor {
    input.map(gelu_scalar)
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_lastdim(input: &Tensor) -> Tensor {
    let row = *input.shape().last().expect("tensor rank >= 1");
    let mut out = input.clone();
    for chunk in out.data.chunks_mut(row) {
        softmax_in_place(chunk);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new([n, c], data)
}

/// `y = x W^T + b` for `x: (N, F)`, `W: (O, F)`, `b: (O)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f, o) = linear_dims(input, weight, bias)?;
    let mut out = Tensor::zeros(&[n, o]);
    for i in 0..n {
        let row = &input.data()[i * f..][..f];
        for j in 0..o {
            let wrow = &weight.data()[j * f..][..f];
            let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.data[i * o + j] = dot + bias.map_or(0.0, |b| b.data()[j]);
        }
    }
    Ok(out)
}

pub(crate) fn linear_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(usize, usize, usize)> {
    match (input.shape(), weight.shape()) {
        (&[n, f], &[o, f2]) if f == f2 && bias.is_none_or(|b| b.shape() == [o]) => Ok((n, f, o)),
        _ => Err(shape_err(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.map(Tensor::shape)
            ),
        )),
    }
}
