//! Analytic costs: parameters, multiply-accumulates, intermediate states and a
//! proxy latency.
//!
//! Networks and blocks are traced into a symbolic op graph that mirrors what
//! [`Tape`](crate::autograd::Tape) records, using the same state records and
//! the same retention rule, so the state totals agree with a live tape exactly.
//!
//! MAC conventions: convolution `N·C_out·H_o·W_o·(C_in/g)·k²`; quadratic
//! convolution three of those plus one multiply per output element; layer
//! norm one per element; linear `N·in·out`; attention `3·N·HW·C²` for the
//! projections plus `2·N·HW·M²·C` for scores and weighted values. Additions,
//! biases, GELU and pooling count zero.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::check_window;
use crate::autograd::{attention_state_records, OpKind};
use crate::blocks::{self, BlockSpec, POINTWISE};
use crate::error::{shape_err, Error, Result};
use crate::network::{self, NetworkSpec, DOWN, STAGES, STEM};
use crate::quadconv::quad_state_records;
use crate::states::{Phase, Retention, StateRecord};
use crate::tensor::ConvGeometry;

/// Weights of the proxy latency `α·macs + β·fwd_states + γ·serial_depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 1e4,
        }
    }
}

impl Coefficients {
    pub fn proxy(&self, macs: u64, fwd_states: u64, serial_depth: u64) -> f64 {
        self.alpha * macs as f64 + self.beta * fwd_states as f64 + self.gamma * serial_depth as f64
    }
}

/// Counts for one named layer group (stem, a block, a downsample, the head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub fwd_states: u64,
    pub bwd_retained_states: u64,
    pub serial_depth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub fwd_states: u64,
    pub bwd_retained_states: u64,
    pub serial_depth: u64,
    pub proxy_latency: f64,
    pub coefficients: Coefficients,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>, coefficients: Coefficients) -> Self {
        let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
        let (params, macs, fwd, bwd, depth) = (
            sum(|l| l.params),
            sum(|l| l.macs),
            sum(|l| l.fwd_states),
            sum(|l| l.bwd_retained_states),
            sum(|l| l.serial_depth),
        );
        Self {
            params,
            macs,
            fwd_states: fwd,
            bwd_retained_states: bwd,
            serial_depth: depth,
            proxy_latency: coefficients.proxy(macs, fwd, depth),
            coefficients,
            layers,
        }
    }

    /// States in the requested phase.
    pub fn states(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Forward => self.fwd_states,
            Phase::Backward => self.bwd_retained_states,
        }
    }

    /// Fixed-column text table. `bytes` scales state counts by 8 (f64) for display.
    pub fn to_table(&self, bytes: bool) -> String {
        let unit = if bytes { 8 } else { 1 };
        let st = if bytes { "bytes" } else { "elems" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>16} {:>16} {:>16} {:>6}",
            "layer",
            "params",
            "macs",
            format!("fwd_{st}"),
            format!("bwd_{st}"),
            "depth"
        );
        let mut row = |name: &str, p: u64, m: u64, f: u64, b: u64, d: u64| {
            let _ = writeln!(out, "{name:<28} {p:>12} {m:>16} {:>16} {:>16} {d:>6}", f * unit, b * unit);
        };
        for l in &self.layers {
            row(&l.name, l.params, l.macs, l.fwd_states, l.bwd_retained_states, l.serial_depth);
        }
        row(
            "total",
            self.params,
            self.macs,
            self.fwd_states,
            self.bwd_retained_states,
            self.serial_depth,
        );
        let c = self.coefficients;
        let _ = writeln!(
            out,
            "proxy_latency = {}*macs + {}*fwd_states + {}*serial_depth = {}",
            c.alpha, c.beta, c.gamma, self.proxy_latency
        );
        out
    }
}

/// Self-attention states over an `H x W x C` map: `3HWC + (HW)² + (HW)²C`
/// globally, `(M² + 3)·HWC` with `M x M` windows.
pub fn states_self_attention(h: usize, w: usize, c: usize, window: Option<usize>) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("dimensions must be >= 1, got {h}x{w}x{c}")));
    }
    let (h, w, c) = (h as u64, w as u64, c as u64);
    let hw = h * w;
    match window {
        None => Ok(3 * hw * c + hw * hw + hw * hw * c),
        Some(m) => {
            if m == 0 || h % m as u64 != 0 || w % m as u64 != 0 {
                return Err(Error::InvalidArgument(format!("window {m} does not divide {h}x{w}")));
            }
            let m = m as u64;
            Ok((m * m + 3) * hw * c)
        }
    }
}

/// Quadratic depthwise conv: `4·HWC` materialised, `2·HWC` kept for backward.
pub fn states_quadratic(h: usize, w: usize, c: usize, phase: Phase) -> u64 {
    let e = (h * w * c) as u64;
    match phase {
        Phase::Forward => 4 * e,
        Phase::Backward => 2 * e,
    }
}

/// Serial depth of an order-`r` recursively gated block: each order waits on the previous one.
pub fn recursive_serial_depth(order: usize) -> u64 {
    order as u64
}

/// Mandatorily sequential operator groups contributed by one block.
pub fn block_serial_depth(block: &BlockSpec) -> u64 {
    if block.is_identity() {
        0
    } else {
        1
    }
}

struct SymNode {
    kind: OpKind,
    inputs: Vec<usize>,
    states: Vec<StateRecord>,
    layer: usize,
}

/// Symbolic stand-in for a tape: shapes, states and MACs, no values.
#[derive(Default)]
struct Graph {
    nodes: Vec<SymNode>,
    shapes: Vec<[usize; 4]>,
    layers: Vec<LayerCost>,
}

impl Graph {
    fn begin(&mut self, name: String, params: usize, serial_depth: u64) {
        self.layers.push(LayerCost {
            name,
            params: params as u64,
            macs: 0,
            fwd_states: 0,
            bwd_retained_states: 0,
            serial_depth,
        });
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<usize>, shape: [usize; 4], states: Vec<StateRecord>, macs: u64) -> usize {
        let layer = self.layers.len().saturating_sub(1);
        if let Some(l) = self.layers.last_mut() {
            l.macs += macs;
        }
        self.nodes.push(SymNode { kind, inputs, states, layer });
        self.shapes.push(shape);
        self.nodes.len() - 1
    }

    fn elems(shape: [usize; 4]) -> usize {
        shape.iter().product()
    }

    fn out(&mut self, kind: OpKind, inputs: Vec<usize>, shape: [usize; 4], macs: u64) -> usize {
        let st = vec![StateRecord::new(kind.output_label(), Self::elems(shape), Retention::IfRead)];
        self.push(kind, inputs, shape, st, macs)
    }

    fn input(&mut self, shape: [usize; 4]) -> usize {
        self.push(OpKind::Leaf, Vec::new(), shape, Vec::new(), 0)
    }

    fn conv_shape(&self, x: usize, c_out: usize, k: usize, g: ConvGeometry) -> Result<([usize; 4], u64)> {
        let [n, c, h, w] = self.shapes[x];
        if g.groups == 0 || c % g.groups != 0 || c_out % g.groups != 0 {
            return Err(shape_err("costmodel", format!("groups {} do not divide {c} -> {c_out}", g.groups)));
        }
        let (ho, wo) = match (g.output_len(h, k), g.output_len(w, k)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(shape_err("costmodel", format!("kernel {k} does not fit {h}x{w}"))),
        };
        let shape = [n, c_out, ho, wo];
        let macs = (Self::elems(shape) * (c / g.groups) * k * k) as u64;
        Ok((shape, macs))
    }

    fn conv(&mut self, x: usize, c_out: usize, k: usize, g: ConvGeometry) -> Result<usize> {
        let (shape, macs) = self.conv_shape(x, c_out, k, g)?;
        Ok(self.out(OpKind::Conv2d, vec![x], shape, macs))
    }

    fn quad_conv(&mut self, x: usize, c_out: usize, k: usize, g: ConvGeometry) -> Result<usize> {
        let (shape, macs) = self.conv_shape(x, c_out, k, g)?;
        let e = Self::elems(shape);
        let st = quad_state_records(e).to_vec();
        Ok(self.push(OpKind::QuadConv, vec![x], shape, st, 3 * macs + e as u64))
    }

    fn layer_norm(&mut self, x: usize) -> usize {
        let s = self.shapes[x];
        self.out(OpKind::LayerNorm, vec![x], s, Self::elems(s) as u64)
    }

    fn gelu(&mut self, x: usize) -> usize {
        let s = self.shapes[x];
        self.out(OpKind::Gelu, vec![x], s, 0)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let s = self.shapes[a];
        self.out(OpKind::Add, vec![a, b], s, 0)
    }

    fn gap(&mut self, x: usize) -> usize {
        let [n, c, _, _] = self.shapes[x];
        self.out(OpKind::GlobalAvgPool, vec![x], [n, c, 1, 1], 0)
    }

    fn linear(&mut self, x: usize, out: usize) -> usize {
        let [n, c, _, _] = self.shapes[x];
        self.out(OpKind::Linear, vec![x], [n, out, 1, 1], (n * c * out) as u64)
    }

    fn attention(&mut self, x: usize, window: usize) -> Result<usize> {
        let [n, c, h, w] = self.shapes[x];
        check_window(&[n, c, h, w], window)?;
        let e = n * c * h * w;
        let macs = 3 * e * c + 2 * e * window * window;
        let st = attention_state_records(e, window).to_vec();
        Ok(self.push(OpKind::WindowAttention, vec![x], [n, c, h, w], st, macs as u64))
    }

    fn cross_entropy(&mut self, logits: usize) -> usize {
        self.push(OpKind::SoftmaxCrossEntropy, vec![logits], [1, 1, 1, 1], Vec::new(), 0)
    }

    fn channel_mixer(&mut self, y: usize, expansion: usize, quadratic: bool) -> Result<usize> {
        let c = self.shapes[y][1];
        let n = self.layer_norm(y);
        let h = if quadratic {
            self.quad_conv(n, expansion * c, 1, POINTWISE)?
        } else {
            self.conv(n, expansion * c, 1, POINTWISE)?
        };
        let a = self.gelu(h);
        let o = self.conv(a, c, 1, POINTWISE)?;
        Ok(self.add(y, o))
    }

    /// Mirrors [`blocks::forward_on_tape`].
    fn block(&mut self, block: &BlockSpec, x: usize) -> Result<usize> {
        block.validate()?;
        let c = self.shapes[x][1];
        match *block {
            BlockSpec::Quadra {
                kernel,
                expansion,
                quadratic_pointwise,
            } => {
                let n = self.layer_norm(x);
                let q = self.quad_conv(n, c, kernel, ConvGeometry::same(kernel, c))?;
                let y = self.add(x, q);
                self.channel_mixer(y, expansion, quadratic_pointwise)
            }
            BlockSpec::Conv { kernel, expansion } => {
                let n = self.layer_norm(x);
                let d = self.conv(n, c, kernel, ConvGeometry::same(kernel, c))?;
                let y = self.add(x, d);
                self.channel_mixer(y, expansion, false)
            }
            BlockSpec::Skip { expansion } => self.channel_mixer(x, expansion, false),
            BlockSpec::WindowAttention { window, expansion } => {
                let n = self.layer_norm(x);
                let a = self.attention(n, window)?;
                let o = self.conv(a, c, 1, POINTWISE)?;
                let y = self.add(x, o);
                self.channel_mixer(y, expansion, false)
            }
            BlockSpec::Identity => Ok(x),
        }
    }

    /// Attributes every state to its layer, applying the tape's retention rule.
    fn finish(mut self, coefficients: Coefficients) -> CostReport {
        let mut read = vec![false; self.nodes.len()];
        for node in &self.nodes {
            if node.kind.reads_inputs() {
                for &i in &node.inputs {
                    read[i] = true;
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(layer) = self.layers.get_mut(node.layer) else { continue };
            for s in &node.states {
                layer.fwd_states += s.elements as u64;
                if s.retained(read[i]) {
                    layer.bwd_retained_states += s.elements as u64;
                }
            }
        }
        CostReport::from_layers(self.layers, coefficients)
    }
}

/// Cost of one block applied to an `(N, C, H, W)` input; nothing consumes its output.
pub fn block_report(block: &BlockSpec, input_shape: [usize; 4], coefficients: Coefficients) -> Result<CostReport> {
    let mut g = Graph::default();
    let x = g.input(input_shape);
    g.begin(
        format!("{block:?}"),
        blocks::param_count(block, input_shape[1]),
        block_serial_depth(block),
    );
    g.block(block, x)?;
    Ok(g.finish(coefficients))
}

/// Cost of a training step's forward pass (network plus cross-entropy loss) on `batch` images.
pub fn network_report(spec: &NetworkSpec, batch: usize, coefficients: Coefficients) -> Result<CostReport> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument(String::from("batch must be >= 1")));
    }
    let ch = spec.stage_channels();
    let layout = network::layout(spec);
    let params_with = |prefix: &str| -> usize {
        layout.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.spec.elements()).sum()
    };
    let mut g = Graph::default();
    let x = g.input([batch, spec.in_channels, spec.input_size, spec.input_size]);
    g.begin(String::from("stem"), params_with("stem."), 1);
    let mut h = g.conv(x, ch[0], 4, STEM)?;
    h = g.layer_norm(h);
    for (i, stage) in spec.stages.iter().enumerate() {
        for (j, block) in stage.blocks().iter().enumerate() {
            let name = format!("stage{}.block{}", i + 1, j + 1);
            g.begin(name.clone(), params_with(&format!("{name}.")), block_serial_depth(block));
            h = g.block(block, h)?;
        }
        if i + 1 < STAGES {
            let name = format!("down{}", i + 1);
            g.begin(name.clone(), params_with(&format!("{name}.")), 1);
            let n = g.layer_norm(h);
            h = g.conv(n, ch[i + 1], 2, DOWN)?;
        }
    }
    g.begin(String::from("head"), params_with("head."), 1);
    let pooled = g.gap(h);
    let n = g.layer_norm(pooled);
    let logits = g.linear(n, spec.num_classes);
    g.cross_entropy(logits);
    Ok(g.finish(coefficients))
}

/// Proxy latency of the fixed skeleton: every block slot set to identity.
pub fn skeleton_cost(spec: &NetworkSpec, batch: usize, coefficients: Coefficients) -> Result<f64> {
    let mut bare = spec.clone();
    for stage in &mut bare.stages {
        *stage = network::StageLayout::Slots {
            blocks: vec![BlockSpec::Identity; stage.depth()],
        };
    }
    Ok(network_report(&bare, batch, coefficients)?.proxy_latency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::blocks::Block;
    use crate::network::Network;
    use crate::quadneuron::{complexity, NeuronKind};
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const DEF: Coefficients = Coefficients {
        alpha: 1.0,
        beta: 2.0,
        gamma: 1e4,
    };

    #[test]
    fn attention_formulas() {
        assert_eq!(states_self_attention(7, 7, 64, None).unwrap(), 165_473);
        assert_eq!(states_self_attention(14, 14, 64, Some(7)).unwrap(), 652_288);
        assert_eq!(states_self_attention(1, 1, 1, None).unwrap(), 5);
        assert!(states_self_attention(14, 14, 64, Some(5)).is_err());
        assert!(states_self_attention(0, 1, 1, None).is_err());
    }

    #[test]
    fn quadratic_formulas() {
        assert_eq!(states_quadratic(14, 14, 64, Phase::Forward), 50_176);
        assert_eq!(states_quadratic(14, 14, 64, Phase::Backward), 25_088);
    }

    #[test]
    fn neuron_counters() {
        for n in 1..=1000 {
            assert_eq!(complexity(NeuronKind::LowRank, n), (3 * n + 1, 4 * n));
            assert_eq!(complexity(NeuronKind::FullRank, n), (n * n + n + 1, n * n + 2 * n));
        }
    }

    fn tape_states(block: &BlockSpec, shape: [usize; 4]) -> (u64, u64) {
        let b = Block::new(*block, shape[1], 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::normal(&shape, 1.0, &mut seeded(1)));
        b.record(&mut tape, x).unwrap();
        (
            tape.state_report(Phase::Forward).total() as u64,
            tape.state_report(Phase::Backward).total() as u64,
        )
    }

    fn all_blocks(m: usize) -> [BlockSpec; 6] {
        [
            BlockSpec::Skip { expansion: 4 },
            BlockSpec::Conv { kernel: 7, expansion: 4 },
            BlockSpec::quadra(7, 4),
            BlockSpec::Quadra { kernel: 3, expansion: 2, quadratic_pointwise: true },
            BlockSpec::WindowAttention { window: m, expansion: 4 },
            BlockSpec::Identity,
        ]
    }

    #[test]
    fn block_states_match_live_tape() {
        for shape in [[1, 4, 7, 7], [2, 3, 14, 14], [1, 8, 7, 14]] {
            for b in all_blocks(7) {
                let r = block_report(&b, shape, DEF).unwrap();
                assert_eq!((r.fwd_states, r.bwd_retained_states), tape_states(&b, shape), "{b:?} {shape:?}");
            }
        }
    }

    #[test]
    fn network_states_and_params_match_live_tape() {
        let spec = NetworkSpec {
            in_channels: 1,
            stages: vec![
                network::StageLayout::Slots { blocks: vec![BlockSpec::quadra(3, 2), BlockSpec::Identity] },
                network::StageLayout::Uniform { depth: 1, block: BlockSpec::Conv { kernel: 3, expansion: 2 } },
                network::StageLayout::Uniform { depth: 1, block: BlockSpec::Skip { expansion: 2 } },
                network::StageLayout::Uniform { depth: 1, block: BlockSpec::WindowAttention { window: 1, expansion: 2 } },
            ],
            ..NetworkSpec::uniform(4, [1, 1, 1, 1], BlockSpec::Identity, 5, 32)
        };
        let r = network_report(&spec, 2, DEF).unwrap();
        let net = Network::build(spec, 0).unwrap();
        assert_eq!(r.params, net.param_count() as u64);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::normal(&[2, 1, 32, 32], 1.0, &mut seeded(0)));
        let (_, logits) = net.record(&mut tape, x).unwrap();
        tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert_eq!(r.fwd_states, tape.state_report(Phase::Forward).total() as u64);
        assert_eq!(r.bwd_retained_states, tape.state_report(Phase::Backward).total() as u64);
        // stem + 3 downsamples + head, plus one per non-identity block.
        assert_eq!(r.serial_depth, 5 + 4);
    }

    #[test]
    fn quadratic_layer_matches_formula_and_tape() {
        let (h, w, c) = (14, 14, 8);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::normal(&[1, c, h, w], 1.0, &mut seeded(2)));
        let k = tape.param(Tensor::normal(&[c, 1, 3, 3], 1.0, &mut seeded(3)));
        let q = tape.quad_conv(x, k, k, k, None, ConvGeometry::same(3, c)).unwrap();
        // Inside a block the output feeds the residual add, which does not read it.
        tape.add(q, x).unwrap();
        let fwd = tape.node(q).unwrap().states.iter().map(|s| s.elements as u64).sum::<u64>();
        let kept = tape.retained_states(q).unwrap().iter().map(|s| s.1 as u64).sum::<u64>();
        assert_eq!(fwd, states_quadratic(h, w, c, Phase::Forward));
        assert_eq!(kept, states_quadratic(h, w, c, Phase::Backward));
    }

    #[test]
    fn block_ordering_at_fixed_shape() {
        for (hw, c) in [(7, 64), (14, 64), (28, 32), (56, 16)] {
            let f: Vec<u64> = all_blocks(7)[..3]
                .iter()
                .chain([&BlockSpec::WindowAttention { window: 7, expansion: 4 }])
                .map(|b| block_report(b, [1, c, hw, hw], DEF).unwrap().fwd_states)
                .collect();
            assert!(f.windows(2).all(|p| p[0] < p[1]), "{f:?}");
        }
    }

    #[test]
    fn depthwise_states_linear_in_channels() {
        let r = |c| block_report(&BlockSpec::Conv { kernel: 3, expansion: 1 }, [1, c, 8, 8], DEF).unwrap();
        assert_eq!(2 * r(4).fwd_states, r(8).fwd_states);
        assert_eq!(2 * r(4).bwd_retained_states, r(8).bwd_retained_states);
    }

    #[test]
    fn report_is_sum_of_layers_and_proxy_formula() {
        let spec = NetworkSpec::preset("quadranet25-xxs").unwrap();
        let r = network_report(&spec, 1, DEF).unwrap();
        assert_eq!(r.params, r.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.fwd_states, r.layers.iter().map(|l| l.fwd_states).sum::<u64>());
        assert_eq!(r.params, network::param_count(&spec) as u64);
        let p = r.macs as f64 + 2.0 * r.fwd_states as f64 + 1e4 * r.serial_depth as f64;
        assert_eq!(r.proxy_latency, p);
        assert_eq!(r.layers.len(), 1 + 25 + 3 + 1);
    }

    #[test]
    fn conv_macs_by_hand() {
        // 3x3 depthwise on 1x2x4x4: 2·16·9 MACs, plus LN (32) and the mixer 1x1s (2·32·1·2 each way).
        let r = block_report(&BlockSpec::Conv { kernel: 3, expansion: 1 }, [1, 2, 4, 4], DEF).unwrap();
        assert_eq!(r.macs, 288 + 32 + 32 + 64 + 64);
        let q = block_report(&BlockSpec::quadra(3, 1), [1, 2, 4, 4], DEF).unwrap();
        assert_eq!(q.macs, 3 * 288 + 32 + 32 + 32 + 64 + 64);
    }

    #[test]
    fn preset_volume_and_informational_macs() {
        let r = network_report(&NetworkSpec::preset("quadranet36-t").unwrap(), 1, DEF).unwrap();
        assert!((r.params as f64 / 23.6e6 - 1.0).abs() <= 0.15, "{}", r.params);
        // Reported for reference only; head and resolution conventions differ.
        assert!(r.macs > 1_000_000_000 && r.macs < 10_000_000_000, "{}", r.macs);
    }

    #[test]
    fn skeleton_is_all_identity_cost() {
        let spec = NetworkSpec::uniform(8, [1, 1, 1, 1], BlockSpec::quadra(3, 2), 4, 32);
        let s = skeleton_cost(&spec, 1, DEF).unwrap();
        let full = network_report(&spec, 1, DEF).unwrap().proxy_latency;
        assert!(s < full);
        let bare = NetworkSpec::uniform(8, [1, 1, 1, 1], BlockSpec::Identity, 4, 32);
        assert_eq!(s, network_report(&bare, 1, DEF).unwrap().proxy_latency);
        assert_eq!(network_report(&bare, 1, DEF).unwrap().serial_depth, 5);
        assert_eq!(recursive_serial_depth(3), 3);
    }

    #[test]
    fn table_and_json() {
        let r = block_report(&BlockSpec::quadra(3, 2), [1, 4, 8, 8], DEF).unwrap();
        let t = r.to_table(true);
        assert!(t.contains("total") && t.contains("fwd_bytes"));
        assert!(t.contains(&format!("{}", r.fwd_states * 8)));
        let back: CostReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn proxy_monotone(m in 0u64..1_000_000, s in 0u64..1_000_000, d in 0u64..100, dm in 0u64..1000, ds in 0u64..1000, dd in 0u64..10) {
            let c = Coefficients::default();
            let base = c.proxy(m, s, d);
            prop_assert!(c.proxy(m + dm, s, d) >= base);
            prop_assert!(c.proxy(m, s + ds, d) >= base);
            prop_assert!(c.proxy(m, s, d + dd) >= base);
        }

        #[test]
        fn analytic_block_states_equal_tape(c in 1usize..5, hw in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), r in 1usize..3, which in 0usize..4) {
            let hw = hw * 2;
            let b = [
                BlockSpec::Skip { expansion: r },
                BlockSpec::Conv { kernel: k, expansion: r },
                BlockSpec::quadra(k, r),
                BlockSpec::WindowAttention { window: 2, expansion: r },
            ][which];
            let rep = block_report(&b, [1, c, hw, hw], DEF).unwrap();
            prop_assert_eq!((rep.fwd_states, rep.bwd_retained_states), tape_states(&b, [1, c, hw, hw]));
        }
    }
}
