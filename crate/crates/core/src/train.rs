//! Optimizers, gradient clipping and the epoch loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{shape_err, Error, Result};
use crate::network::Network;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adamw,
    Sgd,
}

/// `Value` clamps each element; `Norm` rescales all gradients jointly so the
/// global L2 norm is at most the clip threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    #[default]
    Value,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_value: f64,
    pub clip_mode: ClipMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warmup length in optimizer steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adamw,
            lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip_value: 5.0,
            clip_mode: ClipMode::Value,
            epochs: 30,
            batch_size: 32,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// `lr = 0` is accepted: it freezes the parameters, which is useful as a control run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.grad_clip_value > 0.0) {
            return bad(format!("grad_clip_value must be > 0, got {}", self.grad_clip_value));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad(String::from("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate for 0-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

pub fn clip_gradients(grads: &mut [Tensor], clip: f64, mode: ClipMode) -> Result<()> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clip value must be > 0, got {clip}")));
    }
    match mode {
        ClipMode::Value => {
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v = v.clamp(-clip, clip);
                }
            }
        }
        ClipMode::Norm => {
            let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
            if norm > clip {
                let s = clip / norm;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_pairs(params: &[Tensor], others: &[Tensor], what: &str) -> Result<()> {
    if params.len() != others.len() {
        return Err(shape_err(
            "optimizer",
            format!("{} parameters but {} {what}", params.len(), others.len()),
        ));
    }
    for (i, (p, o)) in params.iter().zip(others).enumerate() {
        if p.shape() != o.shape() {
            return Err(shape_err(
                "optimizer",
                format!("parameter {i} has shape {:?} but its {what} has {:?}", p.shape(), o.shape()),
            ));
        }
    }
    Ok(())
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }
}

/// Decoupled AdamW: `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &OptimConfig, lr: f64) -> Result<()> {
    check_pairs(params, grads, "gradients")?;
    check_pairs(params, &state.m, "moment buffers")?;
    let (b1, b2) = cfg.betas;
    state.t += 1;
    let c1 = 1.0 - libm::pow(b1, state.t as f64);
    let c2 = 1.0 - libm::pow(b2, state.t as f64);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((p, &g), m), v) in iter {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / (libm::sqrt(*v / c2) + cfg.eps);
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Plain SGD with the same decoupled weight decay.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], cfg: &OptimConfig, lr: f64) -> Result<()> {
    check_pairs(params, grads, "gradients")?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * (g + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Clips, then applies the configured update rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    adam: AdamState,
    steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, adam: AdamState::new(params), steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor], mut grads: Vec<Tensor>) -> Result<()> {
        clip_gradients(&mut grads, self.config.grad_clip_value, self.config.clip_mode)?;
        debug_assert!(
            self.config.clip_mode != ClipMode::Value
                || grads.iter().flat_map(|g| g.data()).all(|v| v.abs() <= self.config.grad_clip_value)
        );
        let lr = self.config.lr_at(self.steps);
        match self.config.kind {
            OptimKind::Adamw => adamw_step(params, &grads, &mut self.adam, &self.config, lr)?,
            OptimKind::Sgd => sgd_step(params, &grads, &self.config, lr)?,
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training samples.
    pub loss: f64,
    /// Accuracy on the training batches as they were seen during the epoch.
    pub train_acc: f64,
    pub val_acc: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

pub fn predict(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let logits = net.forward(inputs)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(argmax).collect())
}

/// Accuracy of `net` on `data`, evaluated in batches of `batch_size`.
pub fn evaluate(net: &Network, data: &LabeledDataset, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(String::from("batch_size must be >= 1")));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        correct += count_correct(&net.forward(&x)?, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Sample order for 1-based `epoch`; a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(derive_seed(seed, 0x7368_7566 ^ epoch as u64)));
    idx
}

fn check_compatible(net: &Network, data: &LabeledDataset) -> Result<()> {
    let s = &net.spec;
    let want = [s.in_channels, s.input_size, s.input_size];
    if data.inputs.shape().get(1..) != Some(&want[..]) {
        return Err(shape_err(
            "fit",
            format!("network expects (N, {}, {}, {}) inputs, dataset has {:?}", want[0], want[1], want[2], data.inputs.shape()),
        ));
    }
    if data.num_classes != s.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network has {}",
            data.num_classes, s.num_classes
        )));
    }
    Ok(())
}

/// Runs one pass over `order`, updating `net`; returns `(summed loss, correct)`.
fn run_batches(net: &mut Network, opt: &mut Optimizer, data: &LabeledDataset, order: &[usize]) -> Result<(f64, usize)> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in order.chunks(opt.config.batch_size) {
        let (x, y) = data.batch(chunk)?;
        let (loss, grads, logits) = net.loss_and_grads(&x, &y)?;
        loss_sum += loss * chunk.len() as f64;
        correct += count_correct(&logits, &y);
        opt.step(&mut net.params, grads)?;
    }
    Ok((loss_sum, correct))
}

/// Trains for `config.epochs` epochs and reports one row per epoch.
pub fn fit(net: &mut Network, train: &LabeledDataset, val: &LabeledDataset, config: &OptimConfig) -> Result<Vec<EpochMetrics>> {
    check_compatible(net, train)?;
    check_compatible(net, val)?;
    let mut opt = Optimizer::new(config.clone(), &net.params)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch);
        let (loss_sum, correct) = run_batches(net, &mut opt, train, &order)?;
        history.push(EpochMetrics {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: evaluate(net, val, config.batch_size)?,
        });
    }
    Ok(history)
}

/// Exactly `steps` optimizer steps, cycling through reshuffled epochs.
/// Returns the mean loss of the last epoch touched (NaN for zero steps).
pub fn train_steps(net: &mut Network, train: &LabeledDataset, config: &OptimConfig, steps: usize) -> Result<f64> {
    check_compatible(net, train)?;
    let mut opt = Optimizer::new(config.clone(), &net.params)?;
    let per_epoch = train.len().div_ceil(config.batch_size);
    let mut last = f64::NAN;
    let mut epoch = 1;
    while opt.steps() < steps {
        let order = epoch_order(train.len(), config.seed, epoch);
        let take = (steps - opt.steps()).min(per_epoch) * config.batch_size;
        let order = &order[..take.min(order.len())];
        let (loss_sum, _) = run_batches(net, &mut opt, train, order)?;
        last = loss_sum / order.len() as f64;
        epoch += 1;
    }
    Ok(last)
}

/// Metrics as CSV. Each header line is emitted as a `# ` comment ahead of the
/// column header; values use Rust's shortest round-trip float formatting.
pub fn metrics_csv(header: &[String], history: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    out.push_str("epoch,loss,train_acc,val_acc\n");
    for m in history {
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.loss, m.train_acc, m.val_acc);
    }
    out
}
