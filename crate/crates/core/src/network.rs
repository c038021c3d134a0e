//! Four-stage pyramid networks.
//!
//! ```text
//! stem: conv 4x4/4 (in -> C) + LN
//! stage i (channels C·2^i): blocks, then for i < 3: LN + conv 2x2/2 (doubling)
//! head: global average pool + LN + linear
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::blocks::{self, BlockSpec, Init, ParamSpec, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::quadconv::ReleasePolicy;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{ConvGeometry, Tensor};

pub const STAGES: usize = 4;
/// Base widths of the XXS, XS, T, S and B variants.
pub const WIDTH_GRID: [(&str, usize); 5] = [("xxs", 16), ("xs", 32), ("t", 64), ("s", 96), ("b", 128)];

/// Blocks of one stage: a repeated template or an explicit per-slot list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum StageLayout {
    Uniform { depth: usize, block: BlockSpec },
    Slots { blocks: Vec<BlockSpec> },
}

impl StageLayout {
    pub fn blocks(&self) -> Vec<BlockSpec> {
        match self {
            StageLayout::Uniform { depth, block } => vec![*block; *depth],
            StageLayout::Slots { blocks } => blocks.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            StageLayout::Uniform { depth, .. } => *depth,
            StageLayout::Slots { blocks } => blocks.len(),
        }
    }
}

fn default_in_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub base_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    pub stages: Vec<StageLayout>,
}

impl NetworkSpec {
    pub fn uniform(base_channels: usize, depths: [usize; 4], block: BlockSpec, num_classes: usize, input_size: usize) -> Self {
        Self {
            base_channels,
            in_channels: 3,
            num_classes,
            input_size,
            stages: depths.iter().map(|&depth| StageLayout::Uniform { depth, block }).collect(),
        }
    }

    /// Named presets: `quadranet36-<w>` (depths 3,3,27,3) and `quadranet25-<w>`
    /// (2,3,18,2) for widths `xxs, xs, t, s, b`; a bare family name means `t`.
    /// Kernel 7, expansion 4, 1000 classes, 224 input.
    pub fn preset(name: &str) -> Result<Self> {
        let (family, width) = name.split_once('-').unwrap_or((name, "t"));
        let depths = match family {
            "quadranet36" => [3, 3, 27, 3],
            "quadranet25" => [2, 3, 18, 2],
            _ => return Err(Error::InvalidArgument(format!("unknown preset {name:?}; {}", preset_help()))),
        };
        let c = WIDTH_GRID
            .iter()
            .find(|(w, _)| *w == width)
            .map(|&(_, c)| c)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {name:?}; {}", preset_help())))?;
        Ok(Self::uniform(c, depths, BlockSpec::quadra(7, 4), 1000, 224))
    }

    /// The same spec with every quadratic block's first pointwise conv made quadratic.
    pub fn with_quadratic_pointwise(mut self) -> Self {
        let lift = |b: BlockSpec| match b {
            BlockSpec::Quadra { kernel, expansion, .. } => BlockSpec::Quadra {
                kernel,
                expansion,
                quadratic_pointwise: true,
            },
            other => other,
        };
        for stage in &mut self.stages {
            *stage = match stage {
                StageLayout::Uniform { depth, block } => StageLayout::Uniform {
                    depth: *depth,
                    block: lift(*block),
                },
                StageLayout::Slots { blocks } => StageLayout::Slots {
                    blocks: blocks.iter().copied().map(lift).collect(),
                },
            };
        }
        self
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Feature-map side length inside each stage.
    pub fn stage_sizes(&self) -> [usize; 4] {
        let s = self.input_size;
        [s / 4, s / 8, s / 16, s / 32]
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(StageLayout::depth).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGES {
            return Err(Error::InvalidArgument(format!(
                "a network has exactly {STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "base_channels, in_channels and num_classes must be >= 1".into(),
            ));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not divisible by 32",
                self.input_size
            )));
        }
        let sizes = self.stage_sizes();
        for (i, stage) in self.stages.iter().enumerate() {
            for b in stage.blocks() {
                b.validate()?;
                if let BlockSpec::WindowAttention { window, .. } = b {
                    if sizes[i] % window != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "window {window} does not divide the {0}x{0} maps of stage {1}",
                            sizes[i],
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn preset_help() -> String {
    let widths: Vec<&str> = WIDTH_GRID.iter().map(|(w, _)| *w).collect();
    format!("presets are quadranet36 or quadranet25 with an optional -{{{}}} suffix", widths.join(","))
}

/// One named parameter tensor of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub spec: ParamSpec,
}

fn entry(name: String, shape: &[usize], init: Init) -> ParamEntry {
    ParamEntry {
        name,
        spec: ParamSpec {
            name: "",
            shape: shape.to_vec(),
            init,
        },
    }
}

/// Every parameter tensor of `spec` in forward order.
pub fn layout(spec: &NetworkSpec) -> Vec<ParamEntry> {
    let ch = spec.stage_channels();
    let mut out = Vec::new();
    out.push(entry("stem.weight".into(), &[ch[0], spec.in_channels, 4, 4], Init::FanIn(16 * spec.in_channels)));
    out.push(entry("stem.bias".into(), &[ch[0]], Init::Zeros));
    out.push(entry("stem.ln.gamma".into(), &[ch[0]], Init::Ones));
    out.push(entry("stem.ln.beta".into(), &[ch[0]], Init::Zeros));
    for (i, stage) in spec.stages.iter().enumerate() {
        for (j, b) in stage.blocks().iter().enumerate() {
            for p in blocks::param_shapes(b, ch[i]) {
                let name = format!("stage{}.block{}.{}", i + 1, j + 1, p.name);
                out.push(ParamEntry { name, spec: p });
            }
        }
        if i + 1 < STAGES {
            let d = i + 1;
            out.push(entry(format!("down{d}.ln.gamma"), &[ch[i]], Init::Ones));
            out.push(entry(format!("down{d}.ln.beta"), &[ch[i]], Init::Zeros));
            out.push(entry(format!("down{d}.weight"), &[ch[i + 1], ch[i], 2, 2], Init::FanIn(4 * ch[i])));
            out.push(entry(format!("down{d}.bias"), &[ch[i + 1]], Init::Zeros));
        }
    }
    out.push(entry("head.ln.gamma".into(), &[ch[3]], Init::Ones));
    out.push(entry("head.ln.beta".into(), &[ch[3]], Init::Zeros));
    out.push(entry("head.weight".into(), &[spec.num_classes, ch[3]], Init::FanIn(ch[3])));
    out.push(entry("head.bias".into(), &[spec.num_classes], Init::Zeros));
    out
}

pub fn param_count(spec: &NetworkSpec) -> usize {
    layout(spec).iter().map(|e| e.spec.elements()).sum()
}

pub(crate) const STEM: ConvGeometry = ConvGeometry {
    groups: 1,
    stride: 4,
    padding: 0,
};
pub(crate) const DOWN: ConvGeometry = ConvGeometry {
    groups: 1,
    stride: 2,
    padding: 0,
};

/// Records the network on `tape` given parameter nodes in [`layout`] order.
pub fn forward_on_tape(tape: &mut Tape, spec: &NetworkSpec, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let want = [spec.in_channels, spec.input_size, spec.input_size];
    match *tape.value(x).shape() {
        [_, c, h, w] if [c, h, w] == want => {}
        ref s => {
            return Err(shape_err(
                "network",
                format!("expected (N, {0}, {1}, {1}) input, got {s:?}", spec.in_channels, spec.input_size),
            ))
        }
    }
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::InvalidArgument("too few parameters".into()));
    let ch = spec.stage_channels();
    let (w, b) = (next()?, next()?);
    let mut h = tape.conv2d(x, w, Some(b), STEM)?;
    let (g, be) = (next()?, next()?);
    h = tape.layer_norm(h, g, be, LN_EPS)?;
    for (i, stage) in spec.stages.iter().enumerate() {
        for block in stage.blocks() {
            let ids: Vec<NodeId> = (0..blocks::param_shapes(&block, ch[i]).len())
                .map(|_| next())
                .collect::<Result<_>>()?;
            h = blocks::forward_on_tape(tape, &block, &ids, h)?;
        }
        if i + 1 < STAGES {
            let (g, be, w, b) = (next()?, next()?, next()?, next()?);
            let n = tape.layer_norm(h, g, be, LN_EPS)?;
            h = tape.conv2d(n, w, Some(b), DOWN)?;
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let (g, be, w, b) = (next()?, next()?, next()?, next()?);
    let n = tape.layer_norm(pooled, g, be, LN_EPS)?;
    let logits = tape.linear(n, w, Some(b))?;
    if p.next().is_some() {
        return Err(Error::InvalidArgument("too many parameters".into()));
    }
    Ok(logits)
}

/// A built network: spec plus parameter values in [`layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(derive_seed(seed, 0x6e6574));
        let params = layout(&spec).iter().map(|e| e.spec.initialize(&mut rng)).collect();
        Ok(Self { spec, params })
    }

    /// Wraps existing values after checking them against the layout.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let l = layout(&spec);
        if l.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "spec needs {} parameter tensors, got {}",
                l.len(),
                params.len()
            )));
        }
        for (e, p) in l.iter().zip(&params) {
            if p.shape() != e.spec.shape.as_slice() {
                return Err(shape_err("network", format!("{} expects {:?}, got {:?}", e.name, e.spec.shape, p.shape())));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn layout(&self) -> Vec<ParamEntry> {
        layout(&self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn record(&self, tape: &mut Tape, x: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let logits = forward_on_tape(tape, &self.spec, &ids, x)?;
        Ok((ids, logits))
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let (_, logits) = self.record(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy, gradients in parameter order, and the logits.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::with_policy(ReleasePolicy::Release);
        let x = tape.input(batch.clone());
        let (ids, logits) = self.record(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let mut grads = tape.backward(loss)?;
        let g = ids
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((tape.value(loss).data()[0], g, tape.value(logits).clone()))
    }
}

/// Relative error of the tape gradient against central differences at
/// `count` randomly chosen scalar parameters, `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_spot_check(net: &Network, batch: &Tensor, labels: &[usize], count: usize, seed: u64) -> Result<f64> {
    let (_, grads, _) = net.loss_and_grads(batch, labels)?;
    let mut rng = seeded(seed);
    let total = net.param_count();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let h = crate::gradcheck::STEP;
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let mut t = 0;
        while k >= probe.params[t].len() {
            k -= probe.params[t].len();
            t += 1;
        }
        let orig = probe.params[t].data()[k];
        let mut loss_at = |v: f64| -> Result<f64> {
            probe.params[t].data_mut()[k] = v;
            Ok(probe.loss_and_grads(batch, labels)?.0)
        };
        let numeric = (loss_at(orig + h)? - loss_at(orig - h)?) / (2.0 * h);
        probe.params[t].data_mut()[k] = orig;
        let analytic = grads[t].data()[k];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    Ok(worst)
}

impl core::fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "C={} depths={:?} in={} classes={} input={}",
            self.base_channels,
            self.depths(),
            self.in_channels,
            self.num_classes,
            self.input_size
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(block: BlockSpec) -> NetworkSpec {
        NetworkSpec {
            in_channels: 1,
            ..NetworkSpec::uniform(8, [1, 1, 1, 1], block, 4, 32)
        }
    }

    #[test]
    fn preset_36t_near_reported_volume() {
        let n = param_count(&NetworkSpec::preset("quadranet36-t").unwrap());
        assert!((n as f64 / 23.6e6 - 1.0).abs() <= 0.15, "{n}");
        let ablation = param_count(&NetworkSpec::preset("quadranet36-t").unwrap().with_quadratic_pointwise());
        assert!((ablation as f64 / 44.6e6 - 1.0).abs() <= 0.15, "{ablation}");
    }

    #[test]
    fn presets_and_grid() {
        let p = NetworkSpec::preset("quadranet25").unwrap();
        assert_eq!(p.depths(), vec![2, 3, 18, 2]);
        assert_eq!(p.base_channels, 64);
        let widths: Vec<usize> = ["xxs", "xs", "t", "s", "b"]
            .iter()
            .map(|w| NetworkSpec::preset(&format!("quadranet36-{w}")).unwrap().base_channels)
            .collect();
        assert_eq!(widths, vec![16, 32, 64, 96, 128]);
        assert!(NetworkSpec::preset("resnet50").is_err());
    }

    #[test]
    fn tiny_net_logits_shape() {
        let net = Network::build(tiny(BlockSpec::quadra(3, 2)), 0).unwrap();
        let x = Tensor::normal(&[3, 1, 32, 32], 1.0, &mut seeded(1));
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        assert!(y.is_finite());
    }

    #[test]
    fn bad_input_sizes_rejected() {
        let mut spec = tiny(BlockSpec::quadra(3, 2));
        spec.input_size = 48;
        assert!(Network::build(spec, 0).is_err());
        let net = Network::build(tiny(BlockSpec::quadra(3, 2)), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
        let mut three = tiny(BlockSpec::Identity);
        three.stages.pop();
        assert!(three.validate().is_err());
    }

    #[test]
    fn zero_trunk_gives_head_bias() {
        let mut net = Network::build(tiny(BlockSpec::quadra(3, 2)), 4).unwrap();
        let last = net.params.len() - 1;
        for p in &mut net.params[..last] {
            p.data_mut().fill(0.0);
        }
        net.params[last] = Tensor::new([4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let y = net.forward(&Tensor::normal(&[2, 1, 32, 32], 1.0, &mut seeded(2))).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, net.params[last].data());
        }
    }

    #[test]
    fn counts_independent_of_seed() {
        let spec = tiny(BlockSpec::Conv { kernel: 5, expansion: 2 });
        let (a, b) = (Network::build(spec.clone(), 1).unwrap(), Network::build(spec.clone(), 2).unwrap());
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.param_count(), param_count(&spec));
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn spec_json_round_trip() {
        let mut spec = tiny(BlockSpec::quadra(3, 2));
        spec.stages[2] = StageLayout::Slots {
            blocks: vec![BlockSpec::quadra(7, 4), BlockSpec::Identity, BlockSpec::Skip { expansion: 2 }],
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<NetworkSpec>(&json.replace("input_size", "input_sz")).is_err());
    }

    #[test]
    fn network_gradient_spot_check() {
        let net = Network::build(tiny(BlockSpec::quadra(3, 2)), 7).unwrap();
        let x = Tensor::normal(&[2, 1, 32, 32], 1.0, &mut seeded(8));
        let err = gradient_spot_check(&net, &x, &[1, 3], 5, 9).unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn layout_names_are_unique() {
        let l = layout(&NetworkSpec::preset("quadranet25-xxs").unwrap());
        let mut names: Vec<&str> = l.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), l.len());
        assert_eq!(l[0].name, "stem.weight");
    }
}
