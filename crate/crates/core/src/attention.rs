//! Non-overlapping windowed softmax attention over NCHW feature maps.
//!
//! Every `M x M` window is a sequence of `M^2` tokens of width `C`. The
//! projections are `C x C` matrices applied per pixel; the output projection
//! is left to the caller (a pointwise convolution in the attention block).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_raw, softmax_in_place, ConvGeometry,
    Tensor,
};

const POINTWISE: ConvGeometry = ConvGeometry {
    groups: 1,
    stride: 1,
    padding: 0,
};

/// Forward values the backward pass needs.
#[derive(Debug, Clone)]
pub struct AttentionSaved {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic attention matrices, one `M^2 x M^2` block per window.
    pub probs: Vec<f64>,
}

fn as_pointwise(w: &Tensor, c: usize) -> Result<Tensor> {
    if w.shape() != [c, c] {
        return Err(shape_err(
            "window_attention",
            format!("projection must be {c}x{c}, got {:?}", w.shape()),
        ));
    }
    w.reshape(&[c, c, 1, 1])
}

pub(crate) fn check_window(shape: &[usize], window: usize) -> Result<()> {
    match *shape {
        [_, _, h, w] if window > 0 && h % window == 0 && w % window == 0 => Ok(()),
        [_, _, h, w] => Err(Error::InvalidArgument(format!(
            "window size {window} must divide the feature map {h}x{w}"
        ))),
        _ => Err(shape_err("window_attention", format!("expected NCHW, got {shape:?}"))),
    }
}

/// Visits every window as `(batch, top, left)`.
fn windows(shape: [usize; 4], m: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let [n, _, h, w] = shape;
    (0..n).flat_map(move |b| {
        (0..h / m).flat_map(move |wy| (0..w / m).map(move |wx| (b, wy * m, wx * m)))
    })
}

/// Copies a window into a token-major `(M^2, C)` buffer.
fn gather(t: &Tensor, b: usize, top: usize, left: usize, m: usize, out: &mut [f64]) {
    let c = t.shape()[1];
    for dy in 0..m {
        for dx in 0..m {
            let tok = dy * m + dx;
            for ch in 0..c {
                out[tok * c + ch] = t.at4(b, ch, top + dy, left + dx);
            }
        }
    }
}

fn scatter_add(t: &mut Tensor, b: usize, top: usize, left: usize, m: usize, src: &[f64]) {
    let c = t.shape()[1];
    for dy in 0..m {
        for dx in 0..m {
            let tok = dy * m + dx;
            for ch in 0..c {
                let off = t.offset4(b, ch, top + dy, left + dx);
                t.data_mut()[off] += src[tok * c + ch];
            }
        }
    }
}

/// `softmax(Q K^T / sqrt(C)) V` inside every window, with `Q = W_Q x` etc.
pub fn window_attention_raw(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    window: usize,
) -> Result<(Tensor, AttentionSaved)> {
    let dims = x.dims4()?;
    check_window(x.shape(), window)?;
    let c = dims[1];
    let q = conv2d_raw(x, &as_pointwise(wq, c)?, None, POINTWISE)?;
    let k = conv2d_raw(x, &as_pointwise(wk, c)?, None, POINTWISE)?;
    let v = conv2d_raw(x, &as_pointwise(wv, c)?, None, POINTWISE)?;
    let tokens = window * window;
    let scale = 1.0 / libm::sqrt(c as f64);
    let mut out = Tensor::zeros(x.shape());
    let mut probs = Vec::with_capacity(dims[0] * dims[2] * dims[3] * tokens);
    let (mut qw, mut kw, mut vw) = (vec![0.0; tokens * c], vec![0.0; tokens * c], vec![0.0; tokens * c]);
    let mut ow = vec![0.0; tokens * c];
    let mut row = vec![0.0; tokens];
    for (b, top, left) in windows(dims, window) {
        gather(&q, b, top, left, window, &mut qw);
        gather(&k, b, top, left, window, &mut kw);
        gather(&v, b, top, left, window, &mut vw);
        ow.fill(0.0);
        for t in 0..tokens {
            for u in 0..tokens {
                row[u] = (0..c).map(|ch| qw[t * c + ch] * kw[u * c + ch]).sum::<f64>() * scale;
            }
            softmax_in_place(&mut row);
            for u in 0..tokens {
                for ch in 0..c {
                    ow[t * c + ch] += row[u] * vw[u * c + ch];
                }
            }
            probs.extend_from_slice(&row);
        }
        scatter_add(&mut out, b, top, left, window, &ow);
    }
    Ok((out, AttentionSaved { q, k, v, probs }))
}

pub struct AttentionGrads {
    pub x: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub fn window_attention_backward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    window: usize,
    saved: &AttentionSaved,
    upstream: &Tensor,
) -> Result<AttentionGrads> {
    let dims = x.dims4()?;
    let c = dims[1];
    if upstream.shape() != x.shape() {
        return Err(shape_err(
            "window_attention_backward",
            format!("upstream {:?} vs input {:?}", upstream.shape(), x.shape()),
        ));
    }
    let tokens = window * window;
    let scale = 1.0 / libm::sqrt(c as f64);
    let (mut dq, mut dk, mut dv) = (
        Tensor::zeros(x.shape()),
        Tensor::zeros(x.shape()),
        Tensor::zeros(x.shape()),
    );
    let buf = || vec![0.0; tokens * c];
    let (mut qw, mut kw, mut vw, mut gw) = (buf(), buf(), buf(), buf());
    let (mut dqw, mut dkw, mut dvw) = (buf(), buf(), buf());
    let mut dp = vec![0.0; tokens];
    for (wi, (b, top, left)) in windows(dims, window).enumerate() {
        gather(&saved.q, b, top, left, window, &mut qw);
        gather(&saved.k, b, top, left, window, &mut kw);
        gather(&saved.v, b, top, left, window, &mut vw);
        gather(upstream, b, top, left, window, &mut gw);
        dqw.fill(0.0);
        dkw.fill(0.0);
        dvw.fill(0.0);
        let p_win = &saved.probs[wi * tokens * tokens..][..tokens * tokens];
        for t in 0..tokens {
            let p = &p_win[t * tokens..][..tokens];
            for u in 0..tokens {
                dp[u] = (0..c).map(|ch| gw[t * c + ch] * vw[u * c + ch]).sum();
                for ch in 0..c {
                    dvw[u * c + ch] += p[u] * gw[t * c + ch];
                }
            }
            let centre: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for u in 0..tokens {
                let ds = p[u] * (dp[u] - centre) * scale;
                for ch in 0..c {
                    dqw[t * c + ch] += ds * kw[u * c + ch];
                    dkw[u * c + ch] += ds * qw[t * c + ch];
                }
            }
        }
        scatter_add(&mut dq, b, top, left, window, &dqw);
        scatter_add(&mut dk, b, top, left, window, &dkw);
        scatter_add(&mut dv, b, top, left, window, &dvw);
    }
    let pw_shape = [c, c, 1, 1];
    let mut dx = conv2d_backward_input(&dq, &as_pointwise(wq, c)?, POINTWISE, x.shape())?;
    dx.add_assign(&conv2d_backward_input(&dk, &as_pointwise(wk, c)?, POINTWISE, x.shape())?)?;
    dx.add_assign(&conv2d_backward_input(&dv, &as_pointwise(wv, c)?, POINTWISE, x.shape())?)?;
    let grad_w = |d: &Tensor| -> Result<Tensor> {
        conv2d_backward_weight(d, x, &pw_shape, POINTWISE)?.reshape(&[c, c])
    };
    Ok(AttentionGrads {
        wq: grad_w(&dq)?,
        wk: grad_w(&dk)?,
        wv: grad_w(&dv)?,
        x: dx,
    })
}
