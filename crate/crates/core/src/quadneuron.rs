//! Vector-level quadratic neurons.
//!
//! A full-rank neuron computes `xᵀ W_q x + W_c·x + b`. The low-rank neuron
//! replaces `W_q` by the outer product `W_aᵀ W_b`, so the quadratic term
//! becomes `(W_a·x)(W_b·x)`: `3n + 1` parameters instead of `n² + n + 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(op: &'static str, n: usize, x: &[f64]) -> Result<()> {
    if x.len() != n {
        return Err(shape_err(op, format!("neuron has n={n}, input has {}", x.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRankNeuron {
    /// Row-major `n x n`.
    pub w_q: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b: f64,
}

impl FullRankNeuron {
    pub fn new(w_q: Vec<f64>, w_c: Vec<f64>, b: f64) -> Result<Self> {
        let n = w_c.len();
        if n == 0 || w_q.len() != n * n {
            return Err(shape_err(
                "FullRankNeuron::new",
                format!("W_q has {} entries, W_c has n={n}; need n*n", w_q.len()),
            ));
        }
        Ok(Self { w_q, w_c, b })
    }

    pub fn inputs(&self) -> usize {
        self.w_c.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let n = self.inputs();
        check_len("forward_full", n, x)?;
        let quad: f64 = (0..n)
            .map(|i| x[i] * dot(&self.w_q[i * n..(i + 1) * n], x))
            .sum();
        Ok(quad + dot(&self.w_c, x) + self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankNeuron {
    pub w_a: Vec<f64>,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b: f64,
}

impl LowRankNeuron {
    pub fn new(w_a: Vec<f64>, w_b: Vec<f64>, w_c: Vec<f64>, b: f64) -> Result<Self> {
        if w_a.is_empty() || w_a.len() != w_b.len() || w_a.len() != w_c.len() {
            return Err(shape_err(
                "LowRankNeuron::new",
                format!(
                    "W_a, W_b, W_c must share a length >= 1, got {}, {}, {}",
                    w_a.len(),
                    w_b.len(),
                    w_c.len()
                ),
            ));
        }
        Ok(Self { w_a, w_b, w_c, b })
    }

    pub fn inputs(&self) -> usize {
        self.w_a.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_len("forward_lowrank", self.inputs(), x)?;
        Ok(dot(&self.w_a, x) * dot(&self.w_b, x) + dot(&self.w_c, x) + self.b)
    }

    /// `∂y/∂x = (W_b·x) W_a + (W_a·x) W_b + W_c`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("input_gradient", self.inputs(), x)?;
        let (ax, bx) = (dot(&self.w_a, x), dot(&self.w_b, x));
        Ok((0..x.len())
            .map(|i| bx * self.w_a[i] + ax * self.w_b[i] + self.w_c[i])
            .collect())
    }

    /// The equivalent full-rank neuron with `W_q = W_aᵀ W_b`.
    pub fn to_full_rank(&self) -> FullRankNeuron {
        let n = self.inputs();
        let mut w_q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w_q[i * n + j] = self.w_a[i] * self.w_b[j];
            }
        }
        FullRankNeuron {
            w_q,
            w_c: self.w_c.clone(),
            b: self.b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    FullRank,
    LowRank,
    /// A low-rank neuron with `W_a = W_b = 0` frozen: an ordinary affine unit.
    Linear,
}

/// Parameter and multiply-accumulate counts of one neuron with `n` inputs.
/// The `+1` parameter is the bias; the bias add is not a MAC.
pub fn complexity(kind: NeuronKind, n: usize) -> (usize, usize) {
    match kind {
        NeuronKind::FullRank => (n * n + n + 1, n * n + 2 * n),
        NeuronKind::LowRank => (3 * n + 1, 4 * n),
        NeuronKind::Linear => (n + 1, n),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedNeuron {
    FullRank(FullRankNeuron),
    LowRank(LowRankNeuron),
}

impl TrainedNeuron {
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        match self {
            Self::FullRank(n) => n.forward(x),
            Self::LowRank(n) => n.forward(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XorConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for XorConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn targets(data: &LabeledDataset) -> Vec<f64> {
    data.labels
        .iter()
        .map(|&l| if l == 1 { 1.0 } else { -1.0 })
        .collect()
}

fn sign_accuracy(neuron: &TrainedNeuron, points: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    let mut correct = 0;
    for (x, &t) in points.iter().zip(targets) {
        let y = neuron.forward(x)?;
        if (y > 0.0) == (t > 0.0) {
            correct += 1;
        }
    }
    Ok(correct as f64 / points.len() as f64)
}

/// Full-batch gradient descent on mean squared error against ±1 targets
/// (label 1 is `+1`). Returns the neuron and its sign-readout accuracy.
pub fn train_xor(
    kind: NeuronKind,
    data: &LabeledDataset,
    config: XorConfig,
) -> Result<(TrainedNeuron, f64)> {
    let points = data.rows()?;
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if data.labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("XOR labels must be 0 or 1".into()));
    }
    let t = targets(data);
    let n = points[0].len();
    let count = points.len() as f64;
    let mut rng = seeded(config.seed);
    let lin_bound = 1.0 / libm::sqrt(n as f64);
    let mut w_c: Vec<f64> = (0..n).map(|_| rng.random_range(-lin_bound..lin_bound)).collect();
    let mut bias = 0.0;
    let neuron = match kind {
        NeuronKind::LowRank | NeuronKind::Linear => {
            let mut init = |frozen: bool| -> Vec<f64> {
                (0..n)
                    .map(|_| if frozen { 0.0 } else { rng.random_range(-0.1..0.1) })
                    .collect()
            };
            let frozen = kind == NeuronKind::Linear;
            let mut w_a = init(frozen);
            let mut w_b = init(frozen);
            for _ in 0..config.steps {
                let (mut ga, mut gb, mut gc, mut g0) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], 0.0);
                for (x, &target) in points.iter().zip(&t) {
                    let (ax, bx) = (dot(&w_a, x), dot(&w_b, x));
                    let r = 2.0 * (ax * bx + dot(&w_c, x) + bias - target) / count;
                    for i in 0..n {
                        ga[i] += r * bx * x[i];
                        gb[i] += r * ax * x[i];
                        gc[i] += r * x[i];
                    }
                    g0 += r;
                }
                for i in 0..n {
                    if !frozen {
                        w_a[i] -= config.lr * ga[i];
                        w_b[i] -= config.lr * gb[i];
                    }
                    w_c[i] -= config.lr * gc[i];
                }
                bias -= config.lr * g0;
            }
            TrainedNeuron::LowRank(LowRankNeuron::new(w_a, w_b, w_c, bias)?)
        }
        NeuronKind::FullRank => {
            let mut w_q: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.1..0.1)).collect();
            for _ in 0..config.steps {
                let (mut gq, mut gc, mut g0) = (vec![0.0; n * n], vec![0.0; n], 0.0);
                for (x, &target) in points.iter().zip(&t) {
                    let quad: f64 = (0..n).map(|i| x[i] * dot(&w_q[i * n..(i + 1) * n], x)).sum();
                    let r = 2.0 * (quad + dot(&w_c, x) + bias - target) / count;
                    for i in 0..n {
                        for j in 0..n {
                            gq[i * n + j] += r * x[i] * x[j];
                        }
                        gc[i] += r * x[i];
                    }
                    g0 += r;
                }
                w_q.iter_mut().zip(&gq).for_each(|(w, g)| *w -= config.lr * g);
                w_c.iter_mut().zip(&gc).for_each(|(w, g)| *w -= config.lr * g);
                bias -= config.lr * g0;
            }
            TrainedNeuron::FullRank(FullRankNeuron::new(w_q, w_c, bias)?)
        }
    };
    let acc = sign_accuracy(&neuron, &points, &t)?;
    Ok((neuron, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_xor;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    /// Explicit double loop over `W_q`.
    fn full_oracle(w_q: &[f64], w_c: &[f64], b: f64, x: &[f64]) -> f64 {
        let n = x.len();
        let mut acc = b;
        for i in 0..n {
            for j in 0..n {
                acc += x[i] * w_q[i * n + j] * x[j];
            }
            acc += w_c[i] * x[i];
        }
        acc
    }

    #[test]
    fn full_rank_examples() {
        let c = FullRankNeuron::new(vec![0.0; 4], vec![0.0; 2], 3.0).unwrap();
        assert_eq!(c.forward(&[7.0, -2.0]).unwrap(), 3.0);
        let id = FullRankNeuron::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 0.0).unwrap();
        assert_eq!(id.forward(&[1.0, 2.0]).unwrap(), 5.0);
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn full_rank_matches_double_loop() {
        let mut rng = seeded(1);
        let n = 5;
        let wq: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let neuron = FullRankNeuron::new(wq.clone(), wc.clone(), 0.3).unwrap();
        assert!((neuron.forward(&x).unwrap() - full_oracle(&wq, &wc, 0.3, &x)).abs() < 1e-12);
    }

    #[test]
    fn low_rank_examples() {
        let p = LowRankNeuron::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0; 2], 0.0).unwrap();
        assert_eq!(p.forward(&[3.0, 4.0]).unwrap(), 12.0);
        let lin = LowRankNeuron::new(vec![0.0; 3], vec![0.5, -1.0, 2.0], vec![1.0, 2.0, 3.0], -1.0).unwrap();
        assert_eq!(lin.forward(&[1.0, 1.0, 1.0]).unwrap(), 5.0);
        assert!(lin.forward(&[1.0]).is_err());
        assert!(LowRankNeuron::new(vec![1.0], vec![1.0, 2.0], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn complexity_closed_forms() {
        assert_eq!(complexity(NeuronKind::LowRank, 9), (28, 36));
        assert_eq!(complexity(NeuronKind::FullRank, 9), (91, 99));
        let (full, _) = complexity(NeuronKind::FullRank, 49);
        let (low, _) = complexity(NeuronKind::LowRank, 49);
        assert!((full as f64 / low as f64 - 16.6).abs() < 0.05);
        assert_eq!(complexity(NeuronKind::LowRank, 2).0, complexity(NeuronKind::FullRank, 2).0);
        for n in 3..200 {
            assert!(complexity(NeuronKind::LowRank, n).0 < complexity(NeuronKind::FullRank, n).0);
        }
    }

    #[test]
    fn xor_single_point() {
        let data = LabeledDataset::new(Tensor::new([1, 2], vec![0.5, -1.0]).unwrap(), vec![0], 2).unwrap();
        let (_, acc) = train_xor(NeuronKind::LowRank, &data, XorConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn xor_quadratic_solves_linear_cannot() {
        let data = gen_xor(10, 2.0, 0).unwrap();
        let (_, q) = train_xor(NeuronKind::LowRank, &data, XorConfig::default()).unwrap();
        let (_, l) = train_xor(NeuronKind::Linear, &data, XorConfig::default()).unwrap();
        assert_eq!(q, 1.0);
        assert!(l <= 0.75);
    }

    #[test]
    fn xor_full_rank_also_solves() {
        let data = gen_xor(10, 2.0, 3).unwrap();
        let cfg = XorConfig { steps: 1000, lr: 0.02, seed: 3 };
        let (_, acc) = train_xor(NeuronKind::FullRank, &data, cfg).unwrap();
        assert_eq!(acc, 1.0);
    }

    proptest! {
        #[test]
        fn low_rank_equals_outer_product_full_rank(
            n in 1usize..24,
            seed in any::<u64>(),
        ) {
            let mut rng = seeded(seed);
            let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() };
            let neuron = LowRankNeuron::new(draw(n), draw(n), draw(n), draw(1)[0]).unwrap();
            let x = draw(n);
            let low = neuron.forward(&x).unwrap();
            let full = neuron.to_full_rank().forward(&x).unwrap();
            prop_assert!((low - full).abs() <= 1e-12 * (1.0 + low.abs()));
        }

        #[test]
        fn zero_w_a_is_affine(n in 1usize..16, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() };
            let (wb, wc, x) = (draw(n), draw(n), draw(n));
            let neuron = LowRankNeuron::new(vec![0.0; n], wb, wc.clone(), 0.25).unwrap();
            prop_assert_eq!(neuron.forward(&x).unwrap(), dot(&wc, &x) + 0.25);
        }
    }
}
