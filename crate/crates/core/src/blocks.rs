//! Residual blocks: the quadratic block and its comparison baselines.
//!
//! Every block is a spatial mixer followed by a channel mixer, each wrapped
//! in a residual connection:
//!
//! ```text
//! y   = x + spatial(LN(x))
//! out = y + PW2(GELU(PW1(LN(y))))
//! ```
//!
//! Parameters are kept outside the block in a flat list so a network can
//! hand its optimizer one contiguous slice; [`param_shapes`] fixes the order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::check_window;
use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{ConvGeometry, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// One block slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    /// LN + quadratic depthwise conv spatial mixer.
    Quadra {
        kernel: usize,
        expansion: usize,
        /// Replace the first pointwise conv with a quadratic one.
        #[serde(default)]
        quadratic_pointwise: bool,
    },
    /// LN + plain depthwise conv spatial mixer.
    Conv { kernel: usize, expansion: usize },
    /// Channel mixer only.
    Skip { expansion: usize },
    /// LN + windowed attention + pointwise output projection.
    WindowAttention { window: usize, expansion: usize },
    Identity,
}

impl BlockSpec {
    pub fn quadra(kernel: usize, expansion: usize) -> Self {
        BlockSpec::Quadra {
            kernel,
            expansion,
            quadratic_pointwise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} in block {self:?}")));
        match *self {
            BlockSpec::Quadra { kernel, expansion, .. } | BlockSpec::Conv { kernel, expansion } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return bad("kernel must be odd");
                }
                if expansion == 0 {
                    return bad("expansion must be >= 1");
                }
            }
            BlockSpec::Skip { expansion } if expansion == 0 => return bad("expansion must be >= 1"),
            BlockSpec::WindowAttention { window, expansion } => {
                if window == 0 || expansion == 0 {
                    return bad("window and expansion must be >= 1");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, BlockSpec::Identity)
    }

    fn expansion(&self) -> usize {
        match *self {
            BlockSpec::Quadra { expansion, .. }
            | BlockSpec::Conv { expansion, .. }
            | BlockSpec::Skip { expansion }
            | BlockSpec::WindowAttention { expansion, .. } => expansion,
            BlockSpec::Identity => 0,
        }
    }
}

/// Initial value of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)` with `b = 1/sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: &'static str, shape: &[usize], init: Init) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn initialize(&self, rng: &mut Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::FanIn(fan_in) => {
                let b = 1.0 / libm::sqrt(fan_in as f64);
                Tensor::from_fn(&self.shape, |_| rng.random_range(-b..b))
            }
        }
    }
}

fn layer_norm_params(out: &mut Vec<ParamSpec>, c: usize, names: [&'static str; 2]) {
    out.push(ParamSpec::new(names[0], &[c], Init::Ones));
    out.push(ParamSpec::new(names[1], &[c], Init::Zeros));
}

const LN1: [&str; 2] = ["ln1.gamma", "ln1.beta"];
const LN2: [&str; 2] = ["ln2.gamma", "ln2.beta"];

fn channel_mixer_params(out: &mut Vec<ParamSpec>, c: usize, r: usize, quadratic: bool) {
    layer_norm_params(out, c, LN2);
    let hidden = r * c;
    if quadratic {
        out.push(ParamSpec::new("pw1.w_a", &[hidden, c, 1, 1], Init::FanIn(c)));
        out.push(ParamSpec::new("pw1.w_b", &[hidden, c, 1, 1], Init::FanIn(c)));
        out.push(ParamSpec::new("pw1.w_c", &[hidden, c, 1, 1], Init::FanIn(c)));
    } else {
        out.push(ParamSpec::new("pw1.weight", &[hidden, c, 1, 1], Init::FanIn(c)));
    }
    out.push(ParamSpec::new("pw1.bias", &[hidden], Init::Zeros));
    out.push(ParamSpec::new("pw2.weight", &[c, hidden, 1, 1], Init::FanIn(hidden)));
    out.push(ParamSpec::new("pw2.bias", &[c], Init::Zeros));
}

/// Parameter list of a block over `c` channels, in forward order.
pub fn param_shapes(block: &BlockSpec, c: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    match *block {
        BlockSpec::Quadra {
            kernel: k,
            expansion,
            quadratic_pointwise,
        } => {
            layer_norm_params(&mut out, c, LN1);
            for name in ["quad.w_a", "quad.w_b", "quad.w_c"] {
                out.push(ParamSpec::new(name, &[c, 1, k, k], Init::FanIn(k * k)));
            }
            out.push(ParamSpec::new("quad.bias", &[c], Init::Zeros));
            channel_mixer_params(&mut out, c, expansion, quadratic_pointwise);
        }
        BlockSpec::Conv { kernel: k, expansion } => {
            layer_norm_params(&mut out, c, LN1);
            out.push(ParamSpec::new("dw.weight", &[c, 1, k, k], Init::FanIn(k * k)));
            out.push(ParamSpec::new("dw.bias", &[c], Init::Zeros));
            channel_mixer_params(&mut out, c, expansion, false);
        }
        BlockSpec::Skip { expansion } => channel_mixer_params(&mut out, c, expansion, false),
        BlockSpec::WindowAttention { expansion, .. } => {
            layer_norm_params(&mut out, c, LN1);
            for name in ["attn.w_q", "attn.w_k", "attn.w_v"] {
                out.push(ParamSpec::new(name, &[c, c], Init::FanIn(c)));
            }
            out.push(ParamSpec::new("attn.proj.weight", &[c, c, 1, 1], Init::FanIn(c)));
            out.push(ParamSpec::new("attn.proj.bias", &[c], Init::Zeros));
            channel_mixer_params(&mut out, c, expansion, false);
        }
        BlockSpec::Identity => {}
    }
    out
}

pub fn param_count(block: &BlockSpec, c: usize) -> usize {
    param_shapes(block, c).iter().map(ParamSpec::elements).sum()
}

/// Number of parameters in the spatial mixer alone.
pub fn spatial_param_count(block: &BlockSpec, c: usize) -> usize {
    let channel = if block.is_identity() {
        0
    } else {
        let mut v = Vec::new();
        let quadratic = matches!(
            block,
            BlockSpec::Quadra {
                quadratic_pointwise: true,
                ..
            }
        );
        channel_mixer_params(&mut v, c, block.expansion(), quadratic);
        v.iter().map(ParamSpec::elements).sum()
    };
    param_count(block, c) - channel
}

pub(crate) const POINTWISE: ConvGeometry = ConvGeometry {
    groups: 1,
    stride: 1,
    padding: 0,
};

fn channel_mixer(tape: &mut Tape, p: &[NodeId], y: NodeId, quadratic: bool) -> Result<NodeId> {
    let n = tape.layer_norm(y, p[0], p[1], LN_EPS)?;
    let (h, rest) = if quadratic {
        (tape.quad_conv(n, p[2], p[3], p[4], Some(p[5]), POINTWISE)?, &p[6..])
    } else {
        (tape.conv2d(n, p[2], Some(p[3]), POINTWISE)?, &p[4..])
    };
    let a = tape.gelu(h)?;
    let o = tape.conv2d(a, rest[0], Some(rest[1]), POINTWISE)?;
    tape.add(y, o)
}

/// Records the block on `tape`. `params` must follow [`param_shapes`].
pub fn forward_on_tape(tape: &mut Tape, block: &BlockSpec, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let c = match *shape {
        [_, c, _, _] => c,
        _ => return Err(crate::error::shape_err("block", format!("expected NCHW, got {shape:?}"))),
    };
    let expected = param_shapes(block, c);
    if params.len() != expected.len() {
        return Err(Error::InvalidArgument(format!(
            "block {block:?} over {c} channels takes {} parameter tensors, got {}",
            expected.len(),
            params.len()
        )));
    }
    for (spec, &id) in expected.iter().zip(params) {
        if tape.value(id).shape() != spec.shape.as_slice() {
            return Err(crate::error::shape_err(
                "block",
                format!(
                    "{} expects shape {:?} (input has C={c}), got {:?}",
                    spec.name,
                    spec.shape,
                    tape.value(id).shape()
                ),
            ));
        }
    }
    match *block {
        BlockSpec::Quadra {
            kernel,
            quadratic_pointwise,
            ..
        } => {
            let n = tape.layer_norm(x, params[0], params[1], LN_EPS)?;
            let q = tape.quad_conv(n, params[2], params[3], params[4], Some(params[5]), ConvGeometry::same(kernel, c))?;
            let y = tape.add(x, q)?;
            channel_mixer(tape, &params[6..], y, quadratic_pointwise)
        }
        BlockSpec::Conv { kernel, .. } => {
            let n = tape.layer_norm(x, params[0], params[1], LN_EPS)?;
            let d = tape.conv2d(n, params[2], Some(params[3]), ConvGeometry::same(kernel, c))?;
            let y = tape.add(x, d)?;
            channel_mixer(tape, &params[4..], y, false)
        }
        BlockSpec::Skip { .. } => channel_mixer(tape, params, x, false),
        BlockSpec::WindowAttention { window, .. } => {
            check_window(&shape, window)?;
            let n = tape.layer_norm(x, params[0], params[1], LN_EPS)?;
            let a = tape.window_attention(n, params[2], params[3], params[4], window)?;
            let o = tape.conv2d(a, params[5], Some(params[6]), POINTWISE)?;
            let y = tape.add(x, o)?;
            channel_mixer(tape, &params[7..], y, false)
        }
        BlockSpec::Identity => Ok(x),
    }
}

/// A block together with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub channels: usize,
    pub params: Vec<Tensor>,
}

impl Block {
    pub fn new(spec: BlockSpec, channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be >= 1".into()));
        }
        let mut rng = seeded(seed);
        let params = param_shapes(&spec, channels).iter().map(|p| p.initialize(&mut rng)).collect();
        Ok(Self { spec, channels, params })
    }

    /// Zeroes every mixer weight so both residual branches vanish.
    pub fn zero_mixers(&mut self) {
        for (p, spec) in self.params.iter_mut().zip(param_shapes(&self.spec, self.channels)) {
            if !spec.name.starts_with("ln") {
                *p = Tensor::zeros(&spec.shape);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Pushes the parameters and the block onto `tape`.
    pub fn record(&self, tape: &mut Tape, x: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let y = forward_on_tape(tape, &self.spec, &ids, x)?;
        Ok((ids, y))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let (_, y) = self.record(&mut tape, xi)?;
        Ok(tape.value(y).clone())
    }
}

/// Outcome of [`rank_identity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCheck {
    /// `max |Σ_r a_rᵀ b_r − AᵀB|` over all entries.
    pub max_abs_diff: f64,
    pub rank: usize,
}

impl RankCheck {
    pub fn holds(&self, r: usize) -> bool {
        self.max_abs_diff <= 1e-12 && self.rank <= r
    }
}

/// Compares the sum of `R` outer products `a_rᵀ b_r` (vectors of length `n`)
/// with the product of the stacked `R x n` matrices, and reports the rank.
pub fn rank_identity(r: usize, n: usize, seed: u64) -> Result<RankCheck> {
    if r == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!("need R, n >= 1, got R={r}, n={n}")));
    }
    let mut rng = seeded(seed);
    let a: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut outer_sum = vec![0.0; n * n];
    for k in 0..r {
        let (ar, br) = (&a[k * n..(k + 1) * n], &b[k * n..(k + 1) * n]);
        for i in 0..n {
            for j in 0..n {
                outer_sum[i * n + j] += ar[i] * br[j];
            }
        }
    }
    // (AᵀB)_{ij} = Σ_k A_{ki} B_{kj}, evaluated column-by-column of A.
    let mut product = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            product[i * n + j] = (0..r).map(|k| a[k * n + i] * b[k * n + j]).sum();
        }
    }
    let max_abs_diff = outer_sum
        .iter()
        .zip(&product)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(RankCheck {
        max_abs_diff,
        rank: matrix_rank(&product, n, n, 1e-9),
    })
}

/// Singular values of a `rows x cols` row-major matrix (one-sided Jacobi).
pub fn singular_values(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // Columns of `u` are rotated until mutually orthogonal; their norms are the
    // singular values.
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m[i * cols + j]).collect()).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += u[p][i] * u[p][i];
                    beta += u[q][i] * u[q][i];
                    gamma += u[p][i] * u[q][i];
                }
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / libm::sqrt(alpha * beta));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / libm::sqrt(1.0 + t * t);
                let sn = cs * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = cs * x - sn * y;
                    u[q][i] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = u.iter().map(|col| libm::sqrt(col.iter().map(|v| v * v).sum())).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values above `rel_tol · σ_max`.
pub fn matrix_rank(m: &[f64], rows: usize, cols: usize, rel_tol: f64) -> usize {
    let s = singular_values(m, rows, cols);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}
