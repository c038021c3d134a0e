//! Training-level properties: separable tasks are learned, losses fall, the
//! interaction task defeats a linear probe, and the search fitness prefers
//! quadratic blocks over the empty trunk.

use quadranet_core::autograd::Tape;
use quadranet_core::blocks::BlockSpec;
use quadranet_core::data::{gen_interaction_images, gen_xor, xor_images, LabeledDataset};
use quadranet_core::nas::{default_candidates, SearchSpace, TrainEvaluator};
use quadranet_core::network::{Network, NetworkSpec};
use quadranet_core::rng::seeded;
use quadranet_core::train::{fit, OptimConfig, Optimizer};
use quadranet_core::Tensor;

fn tiny(block: BlockSpec, depths: [usize; 4], classes: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels: 1,
        ..NetworkSpec::uniform(4, depths, block, classes, 32)
    }
}

#[test]
fn tiny_net_fits_xor_images() {
    let pts = gen_xor(8, 1.0, 0).unwrap();
    let data = xor_images(&pts, 32).unwrap();
    let mut net = Network::build(tiny(BlockSpec::quadra(3, 2), [1, 1, 1, 1], 2), 0).unwrap();
    let cfg = OptimConfig {
        epochs: 50,
        batch_size: 8,
        lr: 4e-3,
        ..OptimConfig::default()
    };
    let h = fit(&mut net, &data, &data, &cfg).unwrap();
    let first = h.iter().position(|m| m.train_acc == 1.0);
    assert!(first.is_some(), "train acc never reached 1.0: {:?}", h.last());
}

#[test]
fn loss_falls_over_ten_epochs() {
    let mut falling = 0;
    for seed in 0..10 {
        let (train, val) = gen_interaction_images(300, 32, 4, 100 + seed).unwrap().split_by_stride(5).unwrap();
        let mut net = Network::build(tiny(BlockSpec::quadra(3, 2), [1, 1, 1, 1], 4), seed).unwrap();
        let cfg = OptimConfig {
            epochs: 10,
            seed,
            ..OptimConfig::default()
        };
        let h = fit(&mut net, &train, &val, &cfg).unwrap();
        if h[9].loss < h[0].loss {
            falling += 1;
        }
    }
    assert!(falling >= 8, "loss fell on {falling}/10 seeds");
}

fn flatten(d: &LabeledDataset) -> Tensor {
    let n = d.len();
    d.inputs.reshape(&[n, d.inputs.len() / n]).unwrap()
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| (0..k).all(|j| row[j] <= row[y]))
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn linear_probe_cannot_read_interaction_labels() {
    let (train, val) = gen_interaction_images(2500, 32, 4, 9).unwrap().split_by_stride(5).unwrap();
    let (xt, xv) = (flatten(&train), flatten(&val));
    let d = xt.shape()[1];
    let mut params = vec![Tensor::normal(&[4, d], 0.01, &mut seeded(1)), Tensor::zeros(&[4])];
    let cfg = OptimConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = Optimizer::new(cfg, &params).unwrap();
    for _ in 0..300 {
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let z = tape.linear(x, w, Some(b)).unwrap();
        let loss = tape.softmax_cross_entropy(z, &train.labels).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads = vec![g.take(w).unwrap(), g.take(b).unwrap()];
        opt.step(&mut params, grads).unwrap();
    }
    let logits = quadranet_core::tensor::linear(&xv, &params[0], Some(&params[1])).unwrap();
    let acc = accuracy(&logits, &val.labels);
    assert!(acc <= 0.6, "linear probe reached {acc}");
}

#[test]
fn identity_trunk_scores_below_quadratic_genomes() {
    // Stage 3 runs at 2x2, so every candidate kernel sees both blobs.
    let base = tiny(BlockSpec::Identity, [0, 0, 0, 0], 4);
    let space = SearchSpace::new(base, [0, 0, 1, 0], default_candidates()).unwrap();
    let id = space.identity_genome().unwrap();
    let quads: Vec<Vec<usize>> = space.enumerate().into_iter().filter(|g| *g != id).collect();
    let mut below = 0;
    for seed in 0..10 {
        let (train, val) = gen_interaction_images(1000, 32, 4, 500 + seed).unwrap().split_by_stride(5).unwrap();
        let eval = TrainEvaluator {
            train,
            val,
            config: OptimConfig {
                lr: 4e-3,
                batch_size: 8,
                seed,
                ..OptimConfig::default()
            },
            steps: 500,
        };
        let f_id = eval.fitness(&space, &id).unwrap();
        let worst_quad = quads.iter().map(|g| eval.fitness(&space, g).unwrap()).fold(f64::INFINITY, f64::min);
        if f_id < worst_quad {
            below += 1;
        }
    }
    assert!(below >= 7, "identity below every quadratic genome on {below}/10 seeds");
}
