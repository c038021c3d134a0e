//! Synthetic datasets: generalized XOR points and two-blob images whose class
//! depends on the product of the blob amplitudes.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `(N, C, H, W)` images or `(N, F)` feature rows.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = inputs.shape()[0];
        if labels.len() != n {
            return Err(shape_err(
                "LabeledDataset::new",
                format!("{n} inputs but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split: Split::Train,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.inputs.len() / self.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.inputs.data()[i * s..(i + 1) * s]
    }

    /// Every sample as an owned row.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok((0..self.len()).map(|i| self.sample(i).to_vec()).collect())
    }

    /// Stacks the given samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfBounds(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Self {
            inputs,
            labels,
            num_classes: self.num_classes,
            split,
        })
    }

    /// Deterministic split: every `stride`-th sample (indices `stride-1, 2*stride-1, ...`)
    /// goes to validation.
    pub fn split_by_stride(&self, stride: usize) -> Result<(Self, Self)> {
        if stride < 2 || self.len() < stride {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} cannot split {} samples",
                self.len()
            )));
        }
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|i| i % stride == stride - 1);
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Val)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Generalized XOR: `n_per_quadrant` magnitudes `(u, v)` drawn uniformly from
/// `(0, spread]²`, each placed in all four quadrants as `(±u, ±v)`; label 1
/// iff `x₁x₂ > 0`. Rows are `(N, 2)`, quadrant-major.
///
/// The mirroring makes every affine readout satisfy `f(p) + f(-p) = 2b`, so
/// no line classifies more than three points of a mirrored quadruple.
pub fn gen_xor(n_per_quadrant: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if n_per_quadrant == 0 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and spread > 0, got n={n_per_quadrant}, spread={spread}"
        )));
    }
    let mut rng = seeded(seed);
    let magnitude = |rng: &mut crate::rng::Rng| loop {
        let v: f64 = rng.random_range(0.0..spread);
        if v > 0.0 {
            break v;
        }
    };
    let base: Vec<(f64, f64)> = (0..n_per_quadrant)
        .map(|_| (magnitude(&mut rng), magnitude(&mut rng)))
        .collect();
    let mut data = Vec::with_capacity(8 * n_per_quadrant);
    let mut labels = Vec::with_capacity(4 * n_per_quadrant);
    for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        for &(u, v) in &base {
            let (x, y) = (sx * u, sy * v);
            data.push(x);
            data.push(y);
            labels.push(usize::from(x * y > 0.0));
        }
    }
    LabeledDataset::new(Tensor::new([4 * n_per_quadrant, 2], data)?, labels, 2)
}

/// Parameters of the two-blob interaction images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionParams {
    pub noise: f64,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
}

impl Default for InteractionParams {
    fn default() -> Self {
        Self {
            noise: 0.05,
            min_amplitude: 0.5,
            max_amplitude: 1.0,
        }
    }
}

/// Single-channel `size x size` images, each holding two Gaussian blobs with
/// independently signed amplitudes `a₁`, `a₂`.
///
/// Label derivation:
/// * bit 0 = `a₁·a₂ > 0` (the amplitude product is positive);
/// * bit 1 (four classes only) = the blobs are stacked vertically rather than
///   side by side.
///
/// Every class has a zero-mean image (amplitude signs are symmetric), so the
/// label cannot be read off any linear function of the pixels.
pub fn gen_interaction_images(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    gen_interaction_images_with(n, size, num_classes, seed, InteractionParams::default())
}

pub fn gen_interaction_images_with(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    params: InteractionParams,
) -> Result<LabeledDataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size must be >= 8, got {size}")));
    }
    if n == 0 || !(num_classes == 2 || num_classes == 4) {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and 2 or 4 classes, got n={n}, classes={num_classes}"
        )));
    }
    let mut rng = seeded(seed);
    let sigma = size as f64 / 16.0;
    let margin = libm::ceil(2.0 * sigma) as usize;
    let (min_sep, max_sep) = (size / 4, size / 2);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let vertical = num_classes == 4 && rng.random_bool(0.5);
        let amp = |rng: &mut crate::rng::Rng| {
            let m = rng.random_range(params.min_amplitude..=params.max_amplitude);
            if rng.random_bool(0.5) { m } else { -m }
        };
        let (a1, a2) = (amp(&mut rng), amp(&mut rng));
        let sep = rng.random_range(min_sep..=max_sep);
        let along = rng.random_range(margin..=size - 1 - margin - sep);
        let across = rng.random_range(margin..=size - 1 - margin);
        let (c1, c2) = if vertical {
            ((along, across), (along + sep, across))
        } else {
            ((across, along), (across, along + sep))
        };
        for r in 0..size {
            for c in 0..size {
                let g = |(cr, cc): (usize, usize)| {
                    let dr = r as f64 - cr as f64;
                    let dc = c as f64 - cc as f64;
                    libm::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma))
                };
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(a1 * g(c1) + a2 * g(c2) + params.noise * z);
            }
        }
        let bit0 = usize::from(a1 * a2 > 0.0);
        labels.push(if num_classes == 4 { 2 * usize::from(vertical) + bit0 } else { bit0 });
    }
    LabeledDataset::new(Tensor::new([n, 1, size, size], data)?, labels, num_classes)
}

/// Renders 2-D points as single-channel `size x size` images: the left half
/// filled with `x₁`, the right half with `x₂`. Labels are kept.
pub fn xor_images(points: &LabeledDataset, size: usize) -> Result<LabeledDataset> {
    let s = points.inputs.shape();
    if s.len() != 2 || s[1] != 2 {
        return Err(shape_err("xor_images", format!("expected (N, 2) points, got {s:?}")));
    }
    if size < 2 {
        return Err(Error::InvalidArgument(format!("image size must be >= 2, got {size}")));
    }
    let mut data = Vec::with_capacity(points.len() * size * size);
    for p in points.inputs.data().chunks(2) {
        for _ in 0..size {
            data.extend((0..size).map(|c| if c < size / 2 { p[0] } else { p[1] }));
        }
    }
    LabeledDataset::new(
        Tensor::new([points.len(), 1, size, size], data)?,
        points.labels.clone(),
        points.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_labels_follow_sign_product() {
        let d = gen_xor(10, 2.0, 7).unwrap();
        assert_eq!(d.len(), 40);
        for i in 0..d.len() {
            let p = d.sample(i);
            assert!(p[0] != 0.0 && p[1] != 0.0);
            assert!(p[0].abs() <= 2.0 && p[1].abs() <= 2.0);
            assert_eq!(d.labels[i], usize::from(p[0] * p[1] > 0.0));
        }
        assert_eq!(d.class_counts(), alloc::vec![20, 20]);
        for i in 0..10 {
            let p = d.sample(i);
            assert_eq!(d.sample(i + 20), &[-p[0], -p[1]]);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(gen_xor(5, 1.0, 3).unwrap(), gen_xor(5, 1.0, 3).unwrap());
        assert_ne!(gen_xor(5, 1.0, 3).unwrap(), gen_xor(5, 1.0, 4).unwrap());
        let a = gen_interaction_images(6, 16, 4, 9).unwrap();
        let b = gen_interaction_images(6, 16, 4, 9).unwrap();
        let bits = |d: &LabeledDataset| d.inputs.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn generator_validation() {
        assert!(gen_xor(0, 1.0, 0).is_err());
        assert!(gen_xor(1, 0.0, 0).is_err());
        assert!(gen_interaction_images(4, 7, 4, 0).is_err());
        assert!(gen_interaction_images(4, 16, 3, 0).is_err());
    }

    #[test]
    fn interaction_classes_balanced() {
        let d = gen_interaction_images(10_000, 8, 4, 1).unwrap();
        for count in d.class_counts() {
            assert!((count as f64 - 2500.0).abs() <= 0.05 * 2500.0, "{count}");
        }
        let two = gen_interaction_images(10_000, 8, 2, 2).unwrap();
        for count in two.class_counts() {
            assert!((count as f64 - 5000.0).abs() <= 0.05 * 5000.0);
        }
    }

    #[test]
    fn xor_images_layout() {
        let pts = gen_xor(2, 1.0, 5).unwrap();
        let img = xor_images(&pts, 4).unwrap();
        assert_eq!(img.inputs.shape(), &[8, 1, 4, 4]);
        assert_eq!(img.labels, pts.labels);
        let (x1, x2) = (pts.sample(3)[0], pts.sample(3)[1]);
        assert_eq!(&img.sample(3)[4..8], &[x1, x1, x2, x2]);
        assert!(xor_images(&img, 4).is_err());
    }

    #[test]
    fn stride_split() {
        let d = gen_xor(5, 1.0, 0).unwrap();
        let (train, val) = d.split_by_stride(5).unwrap();
        assert_eq!((train.len(), val.len()), (16, 4));
        assert_eq!(val.sample(0), d.sample(4));
        assert_eq!(val.split, Split::Val);
        assert!(d.split_by_stride(1).is_err());
    }
}
