//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a [`Node`] to the [`Tape`] together with its output value
//! and the intermediate states it materialises. [`Tape::backward`] walks the
//! nodes in reverse id order, so gradient accumulation order is fixed and two
//! runs over the same tape are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{window_attention_backward, window_attention_raw, AttentionSaved};
use crate::error::{shape_err, Error, Result};
use crate::quadconv::{quad_backward_raw, quad_forward_raw, quad_state_records, QuadSaved, ReleasePolicy};
use crate::states::{Phase, Retention, StateRecord, StateReport};
use crate::tensor::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_raw,
    gelu, gelu_derivative, global_avg_pool, hadamard, layer_norm, layer_norm_backward, linear,
    linear_dims, softmax_in_place, ConvGeometry, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Hadamard,
    Scale,
    Sum,
    Conv2d,
    QuadConv,
    LayerNorm,
    Gelu,
    GlobalAvgPool,
    Linear,
    SoftmaxCrossEntropy,
    WindowAttention,
}

impl OpKind {
    /// Whether this op's backward reads the forward values of its inputs.
    pub fn reads_inputs(self) -> bool {
        !matches!(
            self,
            OpKind::Leaf | OpKind::Add | OpKind::Scale | OpKind::Sum | OpKind::GlobalAvgPool
        )
    }

    pub fn output_label(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add.out",
            OpKind::Hadamard => "hadamard.out",
            OpKind::Scale => "scale.out",
            OpKind::Sum => "sum.out",
            OpKind::Conv2d => "conv2d.out",
            OpKind::QuadConv => "quad_conv.f_c",
            OpKind::LayerNorm => "layer_norm.out",
            OpKind::Gelu => "gelu.out",
            OpKind::GlobalAvgPool => "gap.out",
            OpKind::Linear => "linear.out",
            OpKind::SoftmaxCrossEntropy => "cross_entropy.out",
            OpKind::WindowAttention => "attention.attn_v",
        }
    }
}

/// Attention states: Q, K, V and the `M²`-fold weighted-value products.
pub fn attention_state_records(elements: usize, window: usize) -> [StateRecord; 4] {
    [
        StateRecord::new("attention.q", elements, Retention::Always),
        StateRecord::new("attention.k", elements, Retention::Always),
        StateRecord::new("attention.v", elements, Retention::Always),
        StateRecord::new("attention.attn_v", window * window * elements, Retention::Always),
    ]
}

#[derive(Debug, Clone)]
enum OpData {
    Leaf,
    Add,
    Hadamard,
    Scale(f64),
    Sum,
    Conv2d { geom: ConvGeometry, has_bias: bool },
    QuadConv { geom: ConvGeometry, has_bias: bool, saved: QuadSaved },
    LayerNorm { eps: f64 },
    Gelu,
    GlobalAvgPool,
    Linear { has_bias: bool },
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Tensor },
    WindowAttention { window: usize, saved: AttentionSaved },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    /// States this node materialises in the forward pass.
    pub states: Vec<StateRecord>,
    pub requires_grad: bool,
    data: OpData,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    policy: ReleasePolicy,
}

/// Gradients indexed by node id; `None` where no gradient flowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose quadratic-conv nodes handle released states per `policy`.
    pub fn with_policy(policy: ReleasePolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor, states: Vec<StateRecord>, data: OpData) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(inputs.iter().all(|i| i.0 < id.0));
        let requires_grad = match kind {
            OpKind::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        crate::tensor::debug_check_finite(&value, "tape op");
        self.nodes.push(Node {
            id,
            kind,
            inputs,
            shape: value.shape().to_vec(),
            states,
            requires_grad,
            data,
        });
        self.values.push(value);
        id
    }

    fn out_state(kind: OpKind, value: &Tensor) -> Vec<StateRecord> {
        vec![StateRecord::new(kind.output_label(), value.len(), Retention::IfRead)]
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.push(OpKind::Leaf, Vec::new(), value, Vec::new(), OpData::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    /// A constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// An input whose gradient is wanted.
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A trainable parameter.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let states = Self::out_state(OpKind::Add, &v);
        Ok(self.push(OpKind::Add, vec![a, b], v, states, OpData::Add))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = hadamard(self.value(a), self.value(b))?;
        let states = Self::out_state(OpKind::Hadamard, &v);
        Ok(self.push(OpKind::Hadamard, vec![a, b], v, states, OpData::Hadamard))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor);
        let states = Self::out_state(OpKind::Scale, &v);
        Ok(self.push(OpKind::Scale, vec![a], v, states, OpData::Scale(factor)))
    }

    /// Scalar sum of all elements. Scalar losses are not counted as states.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(OpKind::Sum, vec![a], v, Vec::new(), OpData::Sum))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let v = conv2d_raw(self.value(x), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let states = Self::out_state(OpKind::Conv2d, &v);
        Ok(self.push(
            OpKind::Conv2d,
            inputs,
            v,
            states,
            OpData::Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }

    /// Fused `f_a(x) ⊙ f_b(x) + f_c(x)`; keeps only `f_a(x)` and `f_b(x)` for
    /// backward under the default release policy.
    pub fn quad_conv(
        &mut self,
        x: NodeId,
        w_a: NodeId,
        w_b: NodeId,
        w_c: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let (v, saved) = quad_forward_raw(
            self.value(x),
            self.value(w_a),
            self.value(w_b),
            self.value(w_c),
            bias.map(|b| self.value(b)),
            geom,
            self.policy,
        )?;
        let mut inputs = vec![x, w_a, w_b, w_c];
        inputs.extend(bias);
        let states = quad_state_records(v.len()).to_vec();
        Ok(self.push(
            OpKind::QuadConv,
            inputs,
            v,
            states,
            OpData::QuadConv {
                geom,
                has_bias: bias.is_some(),
                saved,
            },
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let v = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let states = Self::out_state(OpKind::LayerNorm, &v);
        Ok(self.push(OpKind::LayerNorm, vec![x, gamma, beta], v, states, OpData::LayerNorm { eps }))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = gelu(self.value(x));
        let states = Self::out_state(OpKind::Gelu, &v);
        Ok(self.push(OpKind::Gelu, vec![x], v, states, OpData::Gelu))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = global_avg_pool(self.value(x))?;
        let states = Self::out_state(OpKind::GlobalAvgPool, &v);
        Ok(self.push(OpKind::GlobalAvgPool, vec![x], v, states, OpData::GlobalAvgPool))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = linear(self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let states = Self::out_state(OpKind::Linear, &v);
        Ok(self.push(
            OpKind::Linear,
            inputs,
            v,
            states,
            OpData::Linear {
                has_bias: bias.is_some(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        let (n, k) = match *l.shape() {
            [n, k] if n == labels.len() => (n, k),
            _ => {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("logits {:?} with {} labels", l.shape(), labels.len()),
                ))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {k} classes")));
        }
        let mut probs = l.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= libm::log(row[y].max(f64::MIN_POSITIVE));
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            OpKind::SoftmaxCrossEntropy,
            vec![logits],
            v,
            Vec::new(),
            OpData::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Windowed softmax attention with `C x C` projections (no output projection).
    pub fn window_attention(&mut self, x: NodeId, wq: NodeId, wk: NodeId, wv: NodeId, window: usize) -> Result<NodeId> {
        let (v, saved) = window_attention_raw(self.value(x), self.value(wq), self.value(wk), self.value(wv), window)?;
        let states = attention_state_records(v.len(), window).to_vec();
        Ok(self.push(
            OpKind::WindowAttention,
            vec![x, wq, wk, wv],
            v,
            states,
            OpData::WindowAttention { window, saved },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                id: loss.0,
                shape: node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(&node.shape));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.kind != OpKind::Leaf && node.requires_grad {
                for (input, grad) in self.local_backward(node, &g)? {
                    assert!(input.0 < id, "tape is not topologically ordered");
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&grad)?,
                        slot => *slot = Some(grad),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let ins = &node.inputs;
        let val = |i: usize| self.value(ins[i]);
        let mut out = Vec::with_capacity(ins.len());
        match &node.data {
            OpData::Leaf => {}
            OpData::Add => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.clone()));
            }
            OpData::Hadamard => {
                out.push((ins[0], hadamard(g, val(1))?));
                out.push((ins[1], hadamard(g, val(0))?));
            }
            OpData::Scale(f) => out.push((ins[0], g.scale(*f))),
            OpData::Sum => out.push((ins[0], Tensor::full(val(0).shape(), g.data()[0]))),
            OpData::Conv2d { geom, has_bias } => {
                if self.wants(ins[0]) {
                    out.push((ins[0], conv2d_backward_input(g, val(1), *geom, val(0).shape())?));
                }
                out.push((ins[1], conv2d_backward_weight(g, val(0), val(1).shape(), *geom)?));
                if *has_bias {
                    out.push((ins[2], conv2d_backward_bias(g)?));
                }
            }
            OpData::QuadConv { geom, has_bias, saved } => {
                let q = quad_backward_raw(val(0), val(1), val(2), val(3), *has_bias, *geom, saved, g)?;
                out.push((ins[0], q.x));
                out.push((ins[1], q.w_a));
                out.push((ins[2], q.w_b));
                out.push((ins[3], q.w_c));
                if let Some(b) = q.bias {
                    out.push((ins[4], b));
                }
            }
            OpData::LayerNorm { eps } => {
                let (dx, dg, db) = layer_norm_backward(val(0), val(1), *eps, g)?;
                out.push((ins[0], dx));
                out.push((ins[1], dg));
                out.push((ins[2], db));
            }
            OpData::Gelu => out.push((ins[0], val(0).zip_with(g, "gelu backward", |x, d| d * gelu_derivative(x))?)),
            OpData::GlobalAvgPool => {
                let [n, c, h, w] = val(0).dims4()?;
                let inv = 1.0 / (h * w) as f64;
                let dx = Tensor::from_fn(&[n, c, h, w], |i| g.data()[i / (h * w)] * inv);
                out.push((ins[0], dx));
            }
            OpData::Linear { has_bias } => {
                let (x, w) = (val(0), val(1));
                let (n, f, o) = linear_dims(x, w, None)?;
                let mut dx = Tensor::zeros(&[n, f]);
                let mut dw = Tensor::zeros(&[o, f]);
                let mut db = Tensor::zeros(&[o]);
                for i in 0..n {
                    for j in 0..o {
                        let gij = g.data()[i * o + j];
                        db.data_mut()[j] += gij;
                        for k in 0..f {
                            dx.data_mut()[i * f + k] += gij * w.data()[j * f + k];
                            dw.data_mut()[j * f + k] += gij * x.data()[i * f + k];
                        }
                    }
                }
                out.push((ins[0], dx));
                out.push((ins[1], dw));
                if *has_bias {
                    out.push((ins[2], db));
                }
            }
            OpData::SoftmaxCrossEntropy { labels, probs } => {
                let n = labels.len();
                let k = probs.shape()[1];
                let scale = g.data()[0] / n as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * k + y] -= 1.0;
                }
                out.push((ins[0], d.scale(scale)));
            }
            OpData::WindowAttention { window, saved } => {
                let a = window_attention_backward(val(0), val(1), val(2), val(3), *window, saved, g)?;
                out.push((ins[0], a.x));
                out.push((ins[1], a.wq));
                out.push((ins[2], a.wk));
                out.push((ins[3], a.wv));
            }
        }
        Ok(out)
    }

    /// Whether some consumer's backward reads the value of `id`.
    fn read_flags(&self) -> Vec<bool> {
        let mut read = vec![false; self.nodes.len()];
        for node in &self.nodes {
            if node.kind.reads_inputs() {
                for i in &node.inputs {
                    read[i.0] = true;
                }
            }
        }
        read
    }

    /// States of node `id` that survive until backward.
    pub fn retained_states(&self, id: NodeId) -> Result<Vec<(&'static str, usize)>> {
        let node = self.node(id)?;
        let read = self.read_flags();
        Ok(node
            .states
            .iter()
            .filter(|s| s.retained(read[id.0]))
            .map(|s| (s.label, s.elements))
            .collect())
    }

    /// Element counts per state label: everything materialised (`Forward`) or
    /// only what is kept for gradient computation (`Backward`).
    pub fn state_report(&self, phase: Phase) -> StateReport {
        let read = self.read_flags();
        let mut report = StateReport::default();
        for node in &self.nodes {
            for s in &node.states {
                if phase == Phase::Forward || s.retained(read[node.id.0]) {
                    report.add(s.label, s.elements);
                }
            }
        }
        report
    }

    /// Buffers the quadratic-conv nodes actually hold for backward.
    pub fn quad_saved(&self, id: NodeId) -> Option<&QuadSaved> {
        match &self.nodes.get(id.0)?.data {
            OpData::QuadConv { saved, .. } => Some(saved),
            _ => None,
        }
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?.norm();
    let scale = a.norm().max(b.norm());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input_with_grad(Tensor::normal(&[2, 3], 1.0, &mut seeded(0)));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let xv = Tensor::normal(&[4, 5], 1.0, &mut seeded(1));
        let x = tape.input_with_grad(xv.clone());
        let sq = tape.hadamard(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input_with_grad(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { id: 0, .. })));
        assert!(matches!(tape.backward(NodeId(9)), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[3]));
        let w = tape.param(Tensor::ones(&[3]));
        let p = tape.hadamard(x, w).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &Tensor::ones(&[3]));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = seeded(2);
        let mut tape = Tape::new();
        let x = tape.input_with_grad(Tensor::normal(&[1, 3, 6, 6], 1.0, &mut rng));
        let w = tape.param(Tensor::normal(&[3, 1, 3, 3], 1.0, &mut rng));
        let y = tape.conv2d(x, w, None, ConvGeometry::same(3, 3)).unwrap();
        let z = tape.gelu(y).unwrap();
        let s = tape.add(z, x).unwrap();
        let l = tape.sum(s).unwrap();
        let a = tape.backward(l).unwrap();
        let b = tape.backward(l).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.get(x).unwrap()), bits(b.get(x).unwrap()));
        assert_eq!(bits(a.get(w).unwrap()), bits(b.get(w).unwrap()));
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Tensor::normal(&[3, 2], 1.0, &mut seeded(3));
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&Tensor::ones(&[3, 2])).unwrap() < 1e-9);
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(0.5 * t.dot(t)?), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-8);
        assert!(finite_difference_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn single_depthwise_conv_states() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 4, 5, 5]));
        let w = tape.param(Tensor::ones(&[4, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, ConvGeometry::same(3, 4)).unwrap();
        assert_eq!(tape.state_report(Phase::Forward).total(), 100);
        let l = tape.sum(y).unwrap();
        let _ = l;
        assert_eq!(tape.state_report(Phase::Backward).total(), 0);
    }
}
