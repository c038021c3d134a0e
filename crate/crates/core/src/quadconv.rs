//! Quadratic convolution: `f_a(x) ⊙ f_b(x) + f_c(x)`.
//!
//! Each of `f_a`, `f_b`, `f_c` is an ordinary convolution with identical
//! geometry, so a pixel's output is a low-rank quadratic neuron over its
//! receptive field. The depthwise form is the spatial mixer of a QuadraBlock;
//! the `1 x 1` form mixes channels and is only used for the pointwise ablation.
//!
//! Forward materialises four states of the output's size (`f_a`, `f_b`, the
//! product and `f_c`). The backward pass needs only `f_a` and `f_b`:
//!
//! ```text
//! dL/dW_a = conv_weight_grad(dL/dy ⊙ f_b(x), x)
//! dL/dW_b = conv_weight_grad(dL/dy ⊙ f_a(x), x)
//! dL/dW_c = conv_weight_grad(dL/dy, x)
//! ```
//!
//! so the product and `f_c` are dropped as soon as the output is formed.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::states::{Retention, StateRecord};
use crate::tensor::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_raw, ConvGeometry,
    ConvKernel, Tensor,
};

/// What happens to the product and `f_c` buffers after forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReleasePolicy {
    #[default]
    Release,
    /// Keep them, but overwrite with NaN; any backward read shows up as NaN.
    Poison,
    RetainAll,
}

/// Forward buffers kept for backward.
#[derive(Debug, Clone, Default)]
pub struct QuadSaved {
    pub f_a: Option<Tensor>,
    pub f_b: Option<Tensor>,
    pub product: Option<Tensor>,
    pub f_c: Option<Tensor>,
}

impl QuadSaved {
    pub fn retained_elements(&self) -> usize {
        [&self.f_a, &self.f_b, &self.product, &self.f_c]
            .iter()
            .filter_map(|t| t.as_ref())
            .filter(|t| t.is_finite())
            .map(|t| t.len())
            .sum()
    }
}

/// State records of one quadratic convolution producing `elements` outputs.
pub fn quad_state_records(elements: usize) -> [StateRecord; 4] {
    [
        StateRecord::new("quad_conv.f_a", elements, Retention::Always),
        StateRecord::new("quad_conv.f_b", elements, Retention::Always),
        StateRecord::new("quad_conv.product", elements, Retention::Never),
        // The output is accumulated into the f_c buffer.
        StateRecord::new("quad_conv.f_c", elements, Retention::IfRead),
    ]
}

fn check_triplet(wa: &Tensor, wb: &Tensor, wc: &Tensor) -> Result<()> {
    if wa.shape() != wb.shape() || wa.shape() != wc.shape() {
        return Err(shape_err(
            "quad_conv",
            format!(
                "f_a/f_b/f_c weights must share a shape: {:?}, {:?}, {:?}",
                wa.shape(),
                wb.shape(),
                wc.shape()
            ),
        ));
    }
    Ok(())
}

/// Fused forward over loose weight tensors.
pub fn quad_forward_raw(
    x: &Tensor,
    wa: &Tensor,
    wb: &Tensor,
    wc: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
    policy: ReleasePolicy,
) -> Result<(Tensor, QuadSaved)> {
    check_triplet(wa, wb, wc)?;
    let f_a = conv2d_raw(x, wa, None, geom)?;
    let f_b = conv2d_raw(x, wb, None, geom)?;
    let mut out = conv2d_raw(x, wc, bias, geom)?;
    let saved = match policy {
        ReleasePolicy::Release | ReleasePolicy::Poison => {
            for ((o, a), b) in out.data_mut().iter_mut().zip(f_a.data()).zip(f_b.data()) {
                *o += a * b;
            }
            let poison = (policy == ReleasePolicy::Poison)
                .then(|| Tensor::full(out.shape(), f64::NAN));
            QuadSaved {
                product: poison.clone(),
                f_c: poison,
                f_a: Some(f_a),
                f_b: Some(f_b),
            }
        }
        ReleasePolicy::RetainAll => {
            let product = crate::tensor::hadamard(&f_a, &f_b)?;
            let f_c = out.clone();
            out.add_assign(&product)?;
            QuadSaved {
                f_a: Some(f_a),
                f_b: Some(f_b),
                product: Some(product),
                f_c: Some(f_c),
            }
        }
    };
    Ok((out, saved))
}

#[derive(Debug, Clone)]
pub struct QuadGrads {
    pub w_a: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub bias: Option<Tensor>,
    pub x: Tensor,
}

/// Backward from the retained `f_a(x)` and `f_b(x)` only.
#[allow(clippy::too_many_arguments)]
pub fn quad_backward_raw(
    x: &Tensor,
    wa: &Tensor,
    wb: &Tensor,
    wc: &Tensor,
    has_bias: bool,
    geom: ConvGeometry,
    saved: &QuadSaved,
    upstream: &Tensor,
) -> Result<QuadGrads> {
    let f_a = saved.f_a.as_ref().ok_or(Error::MissingState("f_a"))?;
    let f_b = saved.f_b.as_ref().ok_or(Error::MissingState("f_b"))?;
    if upstream.shape() != f_a.shape() {
        return Err(shape_err(
            "quad_conv backward",
            format!("upstream {:?} vs output {:?}", upstream.shape(), f_a.shape()),
        ));
    }
    let g_a = upstream.zip_with(f_b, "quad_conv backward", |g, b| g * b)?;
    let g_b = upstream.zip_with(f_a, "quad_conv backward", |g, a| g * a)?;
    let w_a = conv2d_backward_weight(&g_a, x, wa.shape(), geom)?;
    let w_b = conv2d_backward_weight(&g_b, x, wb.shape(), geom)?;
    let w_c = conv2d_backward_weight(upstream, x, wc.shape(), geom)?;
    let bias = if has_bias {
        Some(conv2d_backward_bias(upstream)?)
    } else {
        None
    };
    let mut dx = conv2d_backward_input(&g_a, wa, geom, x.shape())?;
    dx.add_assign(&conv2d_backward_input(&g_b, wb, geom, x.shape())?)?;
    dx.add_assign(&conv2d_backward_input(upstream, wc, geom, x.shape())?)?;
    Ok(QuadGrads {
        w_a,
        w_b,
        w_c,
        bias,
        x: dx,
    })
}

/// A quadratic convolution layer. The bias lives on the linear path `f_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConv {
    pub f_a: ConvKernel,
    pub f_b: ConvKernel,
    pub f_c: ConvKernel,
}

impl QuadraticConv {
    pub fn new(f_a: ConvKernel, f_b: ConvKernel, f_c: ConvKernel) -> Result<Self> {
        check_triplet(&f_a.weight, &f_b.weight, &f_c.weight)?;
        if f_a.geometry != f_b.geometry || f_a.geometry != f_c.geometry {
            return Err(shape_err(
                "QuadraticConv::new",
                format!(
                    "kernels disagree on geometry: {:?} / {:?} / {:?}",
                    f_a.geometry, f_b.geometry, f_c.geometry
                ),
            ));
        }
        if f_a.bias.is_some() || f_b.bias.is_some() {
            return Err(Error::InvalidArgument(
                "only the linear path f_c may carry a bias".into(),
            ));
        }
        Ok(Self { f_a, f_b, f_c })
    }

    /// Depthwise `k x k` layer; weights are `(C, 1, k, k)`.
    pub fn depthwise(w_a: Tensor, w_b: Tensor, w_c: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(
            ConvKernel::depthwise(w_a, None)?,
            ConvKernel::depthwise(w_b, None)?,
            ConvKernel::depthwise(w_c, bias)?,
        )
    }

    /// Channel-mixing `1 x 1` layer; weights are `(C_out, C_in, 1, 1)`.
    pub fn pointwise(w_a: Tensor, w_b: Tensor, w_c: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(
            ConvKernel::pointwise(w_a, None)?,
            ConvKernel::pointwise(w_b, None)?,
            ConvKernel::pointwise(w_c, bias)?,
        )
    }

    /// Random depthwise layer: linear taps at fan-in scale, quadratic taps small.
    pub fn random_depthwise(channels: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let shape = [channels, 1, kernel, kernel];
        let fan = 1.0 / (kernel * kernel) as f64;
        Self::depthwise(
            Tensor::normal(&shape, libm::sqrt(fan), rng),
            Tensor::normal(&shape, libm::sqrt(fan), rng),
            Tensor::normal(&shape, libm::sqrt(fan), rng),
            Some(Tensor::normal(&[channels], 0.1, rng)),
        )
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.f_a.geometry
    }

    pub fn channels_in(&self) -> usize {
        self.f_a.in_channels()
    }

    pub fn channels_out(&self) -> usize {
        self.f_a.out_channels()
    }

    pub fn kernel_size(&self) -> usize {
        self.f_a.kernel_size()
    }

    pub fn is_depthwise(&self) -> bool {
        let g = self.geometry().groups;
        g == self.channels_in() && g == self.channels_out()
    }

    pub fn param_count(&self) -> usize {
        self.f_a.param_count() + self.f_b.param_count() + self.f_c.param_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.channels_in() {
            return Err(shape_err(
                "quad_conv",
                format!("input has C={c}, layer expects C={}", self.channels_in()),
            ));
        }
        Ok(())
    }

    /// Output plus the retained states and state records of this call.
    pub fn forward_tracked(
        &self,
        x: &Tensor,
        policy: ReleasePolicy,
    ) -> Result<(Tensor, QuadSaved, [StateRecord; 4])> {
        self.check_input(x)?;
        let (y, saved) = quad_forward_raw(
            x,
            &self.f_a.weight,
            &self.f_b.weight,
            &self.f_c.weight,
            self.f_c.bias.as_ref(),
            self.geometry(),
            policy,
        )?;
        let records = quad_state_records(y.len());
        Ok((y, saved, records))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_tracked(x, ReleasePolicy::Release)?.0)
    }

    /// Memory-optimised backward; `saved` must hold `f_a(x)` and `f_b(x)`.
    pub fn backward_optimized(
        &self,
        x: &Tensor,
        saved: &QuadSaved,
        upstream: &Tensor,
    ) -> Result<QuadGrads> {
        self.check_input(x)?;
        quad_backward_raw(
            x,
            &self.f_a.weight,
            &self.f_b.weight,
            &self.f_c.weight,
            self.f_c.bias.is_some(),
            self.geometry(),
            saved,
            upstream,
        )
    }

    /// Channel-mixing variant; rejects anything but ungrouped `1 x 1` kernels.
    pub fn quadratic_pointwise(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel_size() != 1 || self.geometry().groups != 1 {
            return Err(Error::InvalidArgument(format!(
                "quadratic pointwise needs 1x1 ungrouped kernels, got k={} groups={}",
                self.kernel_size(),
                self.geometry().groups
            )));
        }
        self.forward(x)
    }

    /// Receptive field of output pixel `(oh, ow)` in output channel `oc`:
    /// `(input channel, tap row, tap col, input row, input col)`, padded taps skipped.
    fn receptive_field(&self, x_shape: [usize; 4], oc: usize, oh: usize, ow: usize) -> Vec<(usize, usize, usize, usize, usize)> {
        let [_, _, h, w] = x_shape;
        let g = self.geometry();
        let k = self.kernel_size();
        let per_group = self.f_a.weight.shape()[1];
        let group = oc / (self.channels_out() / g.groups);
        let mut field = Vec::with_capacity(per_group * k * k);
        for icg in 0..per_group {
            for i in 0..k {
                for j in 0..k {
                    let ih = (oh * g.stride + i) as isize - g.padding as isize;
                    let iw = (ow * g.stride + j) as isize - g.padding as isize;
                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                        field.push((icg, i, j, group * per_group + icg, (ih as usize) * w + iw as usize));
                    }
                }
            }
        }
        field
    }

    /// Per-pixel reference: the explicit double sum over the receptive field,
    /// `Σ_j Σ_k (ω_a,j x_j)(ω_b,k x_k) + Σ_j ω_c,j x_j + b`.
    pub fn oracle_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let dims = x.dims4()?;
        let [n, _, h, w] = dims;
        let g = self.geometry();
        let k = self.kernel_size();
        let ho = g.output_len(h, k).ok_or_else(|| shape_err("oracle_forward", "kernel larger than input".into()))?;
        let wo = g.output_len(w, k).ok_or_else(|| shape_err("oracle_forward", "kernel larger than input".into()))?;
        let c_out = self.channels_out();
        let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
        for b in 0..n {
            for oc in 0..c_out {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let field = self.receptive_field(dims, oc, oh, ow);
                        let xv = |ic: usize, pos: usize| x.data()[(b * dims[1] + ic) * h * w + pos];
                        let mut quad = 0.0;
                        for &(icj, ij, jj, cj, pj) in &field {
                            let a = self.f_a.weight.at4(oc, icj, ij, jj) * xv(cj, pj);
                            for &(ick, ik, jk, ck, pk) in &field {
                                quad += a * self.f_b.weight.at4(oc, ick, ik, jk) * xv(ck, pk);
                            }
                        }
                        let lin: f64 = field
                            .iter()
                            .map(|&(icj, ij, jj, cj, pj)| self.f_c.weight.at4(oc, icj, ij, jj) * xv(cj, pj))
                            .sum();
                        let bias = self.f_c.bias.as_ref().map_or(0.0, |t| t.data()[oc]);
                        let off = out.offset4(b, oc, oh, ow);
                        out.data_mut()[off] = quad + lin + bias;
                    }
                }
            }
        }
        Ok(out)
    }

    /// The input-adaptive weight `q(x)_ij = ω_a,i→j · Σ_k ω_b,i→k x_k` for every tap
    /// `j` of output pixel `(oh, ow)` in channel `c` of sample `n`.
    ///
    /// Returned as a `(C_in / groups, k, k)` tensor aligned with the filter taps;
    /// taps falling into the zero padding are included (their `x_j` is zero).
    pub fn input_adaptive_weight(&self, x: &Tensor, n: usize, c: usize, oh: usize, ow: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let dims = x.dims4()?;
        let g = self.geometry();
        let k = self.kernel_size();
        let ho = g.output_len(dims[2], k).unwrap_or(0);
        let wo = g.output_len(dims[3], k).unwrap_or(0);
        if n >= dims[0] || c >= self.channels_out() || oh >= ho || ow >= wo {
            return Err(Error::OutOfBounds(format!(
                "position (n={n}, c={c}, h={oh}, w={ow}) outside output {:?}",
                [dims[0], self.channels_out(), ho, wo]
            )));
        }
        let field = self.receptive_field(dims, c, oh, ow);
        let [_, cin, h, w] = dims;
        let b_sum: f64 = field
            .iter()
            .map(|&(ic, i, j, cx, pos)| {
                self.f_b.weight.at4(c, ic, i, j) * x.data()[(n * cin + cx) * h * w + pos]
            })
            .sum();
        let per_group = self.f_a.weight.shape()[1];
        let mut q = Tensor::zeros(&[per_group, k, k]);
        for ic in 0..per_group {
            for i in 0..k {
                for j in 0..k {
                    q.data_mut()[(ic * k + i) * k + j] = self.f_a.weight.at4(c, ic, i, j) * b_sum;
                }
            }
        }
        Ok(q)
    }

    /// The receptive-field inputs `x_j` matching [`Self::input_adaptive_weight`]'s layout
    /// (zero where the tap hits padding).
    pub fn receptive_inputs(&self, x: &Tensor, n: usize, c: usize, oh: usize, ow: usize) -> Result<Tensor> {
        let dims = x.dims4()?;
        let k = self.kernel_size();
        let per_group = self.f_a.weight.shape()[1];
        let mut out = Tensor::zeros(&[per_group, k, k]);
        let [_, cin, h, w] = dims;
        for (ic, i, j, cx, pos) in self.receptive_field(dims, c, oh, ow) {
            out.data_mut()[(ic * k + i) * k + j] = x.data()[(n * cin + cx) * h * w + pos];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::rng::seeded;
    use crate::tensor::{conv2d, hadamard};

    fn random_layer(c: usize, k: usize, seed: u64) -> QuadraticConv {
        QuadraticConv::random_depthwise(c, k, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn zero_quadratic_path_is_linear_conv() {
        let mut layer = random_layer(3, 3, 1);
        layer.f_a.weight = Tensor::zeros(layer.f_a.weight.shape());
        let x = Tensor::normal(&[2, 3, 6, 6], 1.0, &mut seeded(2));
        assert_eq!(layer.forward(&x).unwrap(), conv2d(&x, &layer.f_c).unwrap());
    }

    #[test]
    fn delta_kernels_square_the_input() {
        let c = 2;
        let mut delta = Tensor::zeros(&[c, 1, 3, 3]);
        for ch in 0..c {
            let off = delta.offset4(ch, 0, 1, 1);
            delta.data_mut()[off] = 1.0;
        }
        let layer = QuadraticConv::depthwise(delta.clone(), delta, Tensor::zeros(&[c, 1, 3, 3]), None).unwrap();
        let x = Tensor::normal(&[1, c, 5, 4], 1.0, &mut seeded(3));
        assert_eq!(layer.forward(&x).unwrap(), hadamard(&x, &x).unwrap());
    }

    #[test]
    fn tensor_form_matches_per_pixel_oracle_7x7() {
        let layer = random_layer(4, 7, 9);
        let x = Tensor::normal(&[1, 4, 14, 14], 1.0, &mut seeded(10));
        let fast = layer.forward(&x).unwrap();
        let slow = layer.oracle_forward(&x).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn oracle_1x1_is_elementwise() {
        let layer = random_layer(3, 1, 4);
        let x = Tensor::normal(&[1, 3, 3, 3], 1.0, &mut seeded(5));
        let y = layer.oracle_forward(&x).unwrap();
        for i in 0..x.len() {
            let c = (i / 9) % 3;
            let (a, b, l) = (
                layer.f_a.weight.data()[c],
                layer.f_b.weight.data()[c],
                layer.f_c.weight.data()[c],
            );
            let v = x.data()[i];
            let expect = (a * v) * (b * v) + l * v + layer.f_c.bias.as_ref().unwrap().data()[c];
            assert!((y.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_zero_input_gives_bias() {
        let layer = random_layer(2, 3, 6);
        let y = layer.oracle_forward(&Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let bias = layer.f_c.bias.as_ref().unwrap();
        for i in 0..y.len() {
            assert_eq!(y.data()[i], bias.data()[(i / 16) % 2]);
        }
    }

    #[test]
    fn double_sum_factorises() {
        let mut rng = seeded(12);
        for taps in [1, 9, 25, 49] {
            let wa = Tensor::normal(&[taps], 1.0, &mut rng);
            let wb = Tensor::normal(&[taps], 1.0, &mut rng);
            let x = Tensor::normal(&[taps], 1.0, &mut rng);
            let mut double = 0.0;
            for j in 0..taps {
                for k in 0..taps {
                    double += wa.data()[j] * x.data()[j] * wb.data()[k] * x.data()[k];
                }
            }
            let factored = wa.dot(&x).unwrap() * wb.dot(&x).unwrap();
            assert!((double - factored).abs() < 1e-12 * (1.0 + factored.abs()));
        }
    }

    #[test]
    fn adaptive_weight_constant_input_all_ones() {
        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let layer = QuadraticConv::depthwise(ones.clone(), ones.clone(), ones, None).unwrap();
        let xbar = 0.7;
        let x = Tensor::full(&[1, 1, 5, 5], xbar);
        let q = layer.input_adaptive_weight(&x, 0, 0, 2, 2).unwrap();
        for &v in q.data() {
            assert!((v - 9.0 * xbar).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_weight_vanishes_without_w_b() {
        let mut layer = random_layer(2, 5, 13);
        layer.f_b.weight = Tensor::zeros(layer.f_b.weight.shape());
        let x = Tensor::normal(&[1, 2, 6, 6], 1.0, &mut seeded(1));
        let q = layer.input_adaptive_weight(&x, 0, 1, 3, 0).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptive_weight_reproduces_quadratic_part() {
        let layer = random_layer(3, 5, 14);
        let x = Tensor::normal(&[2, 3, 7, 6], 1.0, &mut seeded(15));
        let full = layer.forward(&x).unwrap();
        let lin = conv2d(&x, &layer.f_c).unwrap();
        for &(n, c, h, w) in &[(0, 0, 0, 0), (1, 2, 3, 3), (0, 1, 6, 5), (1, 0, 2, 4)] {
            let q = layer.input_adaptive_weight(&x, n, c, h, w).unwrap();
            let xs = layer.receptive_inputs(&x, n, c, h, w).unwrap();
            let quad = q.dot(&xs).unwrap();
            let expect = full.at4(n, c, h, w) - lin.at4(n, c, h, w);
            assert!((quad - expect).abs() < 1e-12);
        }
        assert!(matches!(
            layer.input_adaptive_weight(&x, 0, 0, 7, 0),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn backward_zero_upstream() {
        let layer = random_layer(2, 3, 20);
        let x = Tensor::normal(&[1, 2, 4, 4], 1.0, &mut seeded(21));
        let (y, saved, _) = layer.forward_tracked(&x, ReleasePolicy::Release).unwrap();
        let g = layer.backward_optimized(&x, &saved, &Tensor::zeros(y.shape())).unwrap();
        for t in [&g.w_a, &g.w_b, &g.w_c, &g.x, g.bias.as_ref().unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_scalar_hand_formula() {
        let (wa, wb, wc, s) = (0.7, -1.3, 0.4, 2.5);
        let t = |v: f64| Tensor::full(&[1, 1, 1, 1], v);
        let layer = QuadraticConv::depthwise(t(wa), t(wb), t(wc), None).unwrap();
        let x = t(s);
        let (_, saved, _) = layer.forward_tracked(&x, ReleasePolicy::Release).unwrap();
        let g = layer.backward_optimized(&x, &saved, &t(1.0)).unwrap();
        assert!((g.w_a.data()[0] - wb * s * s).abs() < 1e-14);
        assert!((g.w_b.data()[0] - wa * s * s).abs() < 1e-14);
        assert!((g.w_c.data()[0] - s).abs() < 1e-14);
        assert!((g.x.data()[0] - (2.0 * wa * wb * s + wc)).abs() < 1e-14);
    }

    #[test]
    fn backward_requires_retained_states() {
        let layer = random_layer(1, 3, 22);
        let x = Tensor::normal(&[1, 1, 4, 4], 1.0, &mut seeded(23));
        let (y, mut saved, _) = layer.forward_tracked(&x, ReleasePolicy::Release).unwrap();
        saved.f_b = None;
        assert_eq!(
            layer.backward_optimized(&x, &saved, &y).unwrap_err(),
            Error::MissingState("f_b")
        );
    }

    #[test]
    fn release_keeps_two_states() {
        let layer = random_layer(3, 3, 24);
        let x = Tensor::normal(&[2, 3, 5, 5], 1.0, &mut seeded(25));
        let (y, saved, records) = layer.forward_tracked(&x, ReleasePolicy::Release).unwrap();
        assert_eq!(records.iter().map(|r| r.elements).sum::<usize>(), 4 * y.len());
        assert_eq!(saved.retained_elements(), 2 * y.len());
        let (_, all, _) = layer.forward_tracked(&x, ReleasePolicy::RetainAll).unwrap();
        assert_eq!(all.retained_elements(), 4 * y.len());
    }

    #[test]
    fn pointwise_parameter_count() {
        let (cin, cout) = (5, 7);
        let mut rng = seeded(26);
        let w = |rng: &mut Rng| Tensor::normal(&[cout, cin, 1, 1], 1.0, rng);
        let layer = QuadraticConv::pointwise(w(&mut rng), w(&mut rng), w(&mut rng), Some(Tensor::zeros(&[cout]))).unwrap();
        assert_eq!(layer.param_count(), 3 * cin * cout + cout);
        let x = Tensor::normal(&[1, cin, 2, 2], 1.0, &mut rng);
        assert!(layer.quadratic_pointwise(&x).is_ok());
        assert!(random_layer(3, 3, 1).quadratic_pointwise(&Tensor::zeros(&[1, 3, 3, 3])).is_err());
    }

    #[test]
    fn single_input_channel_pointwise_is_lowrank_neuron() {
        use crate::quadneuron::LowRankNeuron;
        let mut rng = seeded(27);
        let layer = QuadraticConv::pointwise(
            Tensor::normal(&[2, 1, 1, 1], 1.0, &mut rng),
            Tensor::normal(&[2, 1, 1, 1], 1.0, &mut rng),
            Tensor::normal(&[2, 1, 1, 1], 1.0, &mut rng),
            Some(Tensor::normal(&[2], 1.0, &mut rng)),
        )
        .unwrap();
        let x = Tensor::normal(&[1, 1, 3, 3], 1.0, &mut rng);
        let y = layer.quadratic_pointwise(&x).unwrap();
        for oc in 0..2 {
            let neuron = LowRankNeuron::new(
                vec![layer.f_a.weight.data()[oc]],
                vec![layer.f_b.weight.data()[oc]],
                vec![layer.f_c.weight.data()[oc]],
                layer.f_c.bias.as_ref().unwrap().data()[oc],
            )
            .unwrap();
            for p in 0..9 {
                let v = neuron.forward(&[x.data()[p]]).unwrap();
                assert!((y.data()[oc * 9 + p] - v).abs() < 1e-14);
            }
        }
    }
}
