//! Finite-difference verification of every tape op and block.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{finite_difference_grad, relative_error, NodeId, Tape};
use crate::blocks::{forward_on_tape, param_shapes, BlockSpec};
use crate::error::Result;
use crate::quadconv::ReleasePolicy;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{ConvGeometry, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type GraphFn = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Sums `y` against fixed pseudo-random weights so no gradient is trivially uniform.
pub fn probe_loss(tape: &mut Tape, y: NodeId) -> Result<NodeId> {
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::uniform(&shape, -1.0, 1.0, &mut seeded(0x5eed));
    let r = tape.input(r);
    let p = tape.hadamard(y, r)?;
    tape.sum(p)
}

fn loss_value(graph: &GraphFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let l = graph(&mut tape, &ids)?;
    Ok(tape.value(l).data()[0])
}

/// Largest relative error between tape and finite-difference gradients over
/// all inputs of `graph`.
pub fn check_graph(graph: &GraphFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::with_policy(ReleasePolicy::Poison);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let loss = graph(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut probe = inputs.to_vec();
        let numeric = finite_difference_grad(
            |x| {
                probe[i] = x.clone();
                loss_value(graph, &probe)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    graph: Box<GraphFn>,
}

fn case(name: &'static str, shapes: &[&[usize]], graph: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        graph: Box::new(graph),
    }
}

fn block_case(name: &'static str, block: BlockSpec, x: [usize; 4]) -> Case {
    let mut shapes = alloc::vec![x.to_vec()];
    shapes.extend(param_shapes(&block, x[1]).into_iter().map(|p| p.shape));
    Case {
        name,
        shapes,
        graph: Box::new(move |t, ids| {
            let y = forward_on_tape(t, &block, &ids[1..], ids[0])?;
            probe_loss(t, y)
        }),
    }
}

fn cases() -> Vec<Case> {
    let pw = ConvGeometry {
        groups: 1,
        stride: 1,
        padding: 0,
    };
    let stem = ConvGeometry {
        groups: 1,
        stride: 4,
        padding: 0,
    };
    let down = ConvGeometry {
        groups: 1,
        stride: 2,
        padding: 0,
    };
    alloc::vec![
        case("add", &[&[2, 3, 4, 4], &[2, 3, 4, 4]], |t, i| {
            let y = t.add(i[0], i[1])?;
            probe_loss(t, y)
        }),
        case("hadamard", &[&[2, 3, 4, 4], &[2, 3, 4, 4]], |t, i| {
            let y = t.hadamard(i[0], i[1])?;
            probe_loss(t, y)
        }),
        case("scale", &[&[2, 5]], |t, i| {
            let y = t.scale(i[0], -1.5)?;
            probe_loss(t, y)
        }),
        case("sum", &[&[3, 4]], |t, i| t.sum(i[0])),
        case("conv2d_dense", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, i| {
            let y = t.conv2d(i[0], i[1], Some(i[2]), ConvGeometry::same(3, 1))?;
            probe_loss(t, y)
        }),
        case("conv2d_depthwise", &[&[2, 4, 6, 6], &[4, 1, 5, 5], &[4]], |t, i| {
            let y = t.conv2d(i[0], i[1], Some(i[2]), ConvGeometry::same(5, 4))?;
            probe_loss(t, y)
        }),
        case("conv2d_stem", &[&[1, 2, 8, 8], &[3, 2, 4, 4], &[3]], move |t, i| {
            let y = t.conv2d(i[0], i[1], Some(i[2]), stem)?;
            probe_loss(t, y)
        }),
        case("conv2d_downsample", &[&[2, 3, 4, 4], &[6, 3, 2, 2]], move |t, i| {
            let y = t.conv2d(i[0], i[1], None, down)?;
            probe_loss(t, y)
        }),
        case(
            "quad_conv_depthwise",
            &[&[2, 4, 6, 6], &[4, 1, 3, 3], &[4, 1, 3, 3], &[4, 1, 3, 3], &[4]],
            |t, i| {
                let y = t.quad_conv(i[0], i[1], i[2], i[3], Some(i[4]), ConvGeometry::same(3, 4))?;
                probe_loss(t, y)
            },
        ),
        case(
            "quad_conv_depthwise_k7",
            &[&[1, 2, 8, 8], &[2, 1, 7, 7], &[2, 1, 7, 7], &[2, 1, 7, 7]],
            |t, i| {
                let y = t.quad_conv(i[0], i[1], i[2], i[3], None, ConvGeometry::same(7, 2))?;
                probe_loss(t, y)
            },
        ),
        case(
            "quad_conv_pointwise",
            &[&[2, 3, 4, 4], &[5, 3, 1, 1], &[5, 3, 1, 1], &[5, 3, 1, 1], &[5]],
            move |t, i| {
                let y = t.quad_conv(i[0], i[1], i[2], i[3], Some(i[4]), pw)?;
                probe_loss(t, y)
            },
        ),
        case("layer_norm_nchw", &[&[2, 4, 3, 3], &[4], &[4]], |t, i| {
            let y = t.layer_norm(i[0], i[1], i[2], 1e-6)?;
            probe_loss(t, y)
        }),
        case("layer_norm_rows", &[&[3, 5], &[5], &[5]], |t, i| {
            let y = t.layer_norm(i[0], i[1], i[2], 1e-6)?;
            probe_loss(t, y)
        }),
        case("gelu", &[&[2, 3, 4, 4]], |t, i| {
            let y = t.gelu(i[0])?;
            probe_loss(t, y)
        }),
        case("global_avg_pool", &[&[2, 3, 4, 5]], |t, i| {
            let y = t.global_avg_pool(i[0])?;
            probe_loss(t, y)
        }),
        case("linear", &[&[3, 5], &[4, 5], &[4]], |t, i| {
            let y = t.linear(i[0], i[1], Some(i[2]))?;
            probe_loss(t, y)
        }),
        case("softmax_cross_entropy", &[&[4, 3]], |t, i| t.softmax_cross_entropy(i[0], &[0, 2, 1, 2])),
        case("window_attention", &[&[1, 3, 4, 4], &[3, 3], &[3, 3], &[3, 3]], |t, i| {
            let y = t.window_attention(i[0], i[1], i[2], i[3], 2)?;
            probe_loss(t, y)
        }),
        block_case("quadra_block", BlockSpec::quadra(3, 2), [1, 4, 8, 8]),
        block_case(
            "quadra_block_quadratic_pw",
            BlockSpec::Quadra {
                kernel: 3,
                expansion: 2,
                quadratic_pointwise: true,
            },
            [1, 3, 4, 4],
        ),
        block_case("conv_block", BlockSpec::Conv { kernel: 3, expansion: 2 }, [1, 3, 4, 4]),
        block_case("skip_block", BlockSpec::Skip { expansion: 2 }, [1, 3, 4, 4]),
        block_case(
            "attention_block",
            BlockSpec::WindowAttention { window: 2, expansion: 2 },
            [1, 3, 4, 4],
        ),
    ]
}

/// Names of every checked op and block.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case once per seed. Inputs are `N(0, 1)` draws.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (ci, c) in cases().iter().enumerate() {
        for &seed in seeds {
            let mut rng = seeded(derive_seed(seed, ci as u64));
            let inputs: Vec<Tensor> = c.shapes.iter().map(|s| Tensor::normal(s, 1.0, &mut rng)).collect();
            out.push(CheckResult {
                name: String::from(c.name),
                seed,
                max_rel_error: check_graph(&*c.graph, &inputs)?,
            });
        }
    }
    Ok(out)
}

/// Max abs difference between the fused quadratic-conv backward (released
/// states poisoned) and a tape of primitive ops that retains everything.
pub fn optimized_vs_full_retention(shape: [usize; 4], kernel: usize, seed: u64) -> Result<f64> {
    let c = shape[1];
    let mut rng = seeded(seed);
    let w = [c, 1, kernel, kernel];
    let vals = [
        Tensor::normal(&shape, 1.0, &mut rng),
        Tensor::normal(&w, 0.5, &mut rng),
        Tensor::normal(&w, 0.5, &mut rng),
        Tensor::normal(&w, 0.5, &mut rng),
        Tensor::normal(&[c], 0.5, &mut rng),
    ];
    let upstream = Tensor::normal(&shape, 1.0, &mut rng);
    let geom = ConvGeometry::same(kernel, c);
    let run = |fused: bool| -> Result<Vec<Tensor>> {
        let mut tape = Tape::with_policy(if fused { ReleasePolicy::Poison } else { ReleasePolicy::RetainAll });
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.input_with_grad(v.clone())).collect();
        let y = if fused {
            tape.quad_conv(ids[0], ids[1], ids[2], ids[3], Some(ids[4]), geom)?
        } else {
            let a = tape.conv2d(ids[0], ids[1], None, geom)?;
            let b = tape.conv2d(ids[0], ids[2], None, geom)?;
            let lin = tape.conv2d(ids[0], ids[3], Some(ids[4]), geom)?;
            let p = tape.hadamard(a, b)?;
            tape.add(p, lin)?
        };
        let u = tape.input(upstream.clone());
        let weighted = tape.hadamard(y, u)?;
        let loss = tape.sum(weighted)?;
        let grads = tape.backward(loss)?;
        Ok(ids.iter().map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&[1]))).collect())
    };
    let (fused, full) = (run(true)?, run(false)?);
    let mut worst = 0.0f64;
    for (a, b) in fused.iter().zip(&full) {
        worst = worst.max(a.max_abs_diff(b)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        for r in run_suite(&[0, 1]).unwrap() {
            assert!(r.passed(), "{} seed {}: {:e}", r.name, r.seed, r.max_rel_error);
        }
    }

    #[test]
    fn fused_backward_matches_full_retention() {
        for (seed, k) in [(0, 3), (1, 5), (2, 7)] {
            let d = optimized_vs_full_retention([2, 3, 7, 7], k, seed).unwrap();
            assert!(d <= 1e-12, "k={k}: {d:e}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // A 0.1% error in an otherwise correct gradient must exceed the tolerance.
        let graph = |t: &mut Tape, i: &[NodeId]| {
            let y = t.hadamard(i[0], i[0])?;
            t.sum(y)
        };
        let x = Tensor::normal(&[4], 1.0, &mut seeded(1));
        assert!(check_graph(&graph, &[x.clone()]).unwrap() < 1e-9);
        let mut tape = Tape::new();
        let xi = tape.input_with_grad(x.clone());
        let y = tape.hadamard(xi, xi).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        let wrong = g.get(xi).unwrap().scale(1.001);
        let numeric = finite_difference_grad(|v| Ok(v.dot(v)?), &x, STEP).unwrap();
        assert!(relative_error(&wrong, &numeric).unwrap() > TOLERANCE);
    }
}
