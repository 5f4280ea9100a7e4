//! Labeled 8-bit image datasets, a synthetic generator and mixup batches.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{contract_err, dim_err, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

/// Images stored as raw 8-bit levels; every pixel value seen by a model is
/// an exact multiple of 1/255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 {
            return Err(dim_err!("image shape {:?} is empty", image_shape));
        }
        if pixels.len() != per * labels.len() {
            return Err(dim_err!(
                "{} pixels do not form {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(contract_err!(
                "label {} >= num_classes {}",
                bad,
                num_classes
            ));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image_levels(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `[C,H,W]` tensor in `[0,1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self
            .image_levels(i)
            .iter()
            .map(|&p| level_to_unit(p))
            .collect();
        Tensor::new(self.image_shape.to_vec(), data).expect("shape checked on construction")
    }

    /// Images at `indices` stacked to `[B,C,H,W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(contract_err!(
                    "index {} out of range for {} samples",
                    i,
                    self.len()
                ));
            }
            data.extend(self.image_levels(i).iter().map(|&p| level_to_unit(p)));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(contract_err!(
                    "index {} out of range for {} samples",
                    i,
                    self.len()
                ));
            }
            pixels.extend_from_slice(self.image_levels(i));
        }
        Self::new(
            self.image_shape,
            pixels,
            self.batch_labels(indices),
            self.num_classes,
        )
    }

    /// Splits off the trailing `fraction` of samples as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> (Self, Self) {
        let held = libm::round(self.len() as f64 * fraction) as usize;
        let cut = self.len() - held.min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (
            self.subset(&head).expect("in range"),
            self.subset(&tail).expect("in range"),
        )
    }
}

pub fn level_to_unit(level: u8) -> f64 {
    f64::from(level) / 255.0
}

pub fn unit_to_level(x: f64) -> u8 {
    libm::round(x.clamp(0.0, 1.0) * 255.0) as u8
}

/// Rows of one-hot vectors for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (row, &l) in labels.iter().enumerate() {
        data[row * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized by construction")
}

/// Deterministic class-conditioned blob images on a single channel.
///
/// Each class owns a template made of two Gaussian blobs at seeded
/// positions; samples add per-pixel Gaussian noise and are quantized to
/// 8-bit levels. Labels cycle through the classes so every class is
/// equally represented.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, side: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(contract_err!(
            "synthetic data needs at least 2 classes, got {}",
            classes
        ));
    }
    if side == 0 {
        return Err(dim_err!("image side must be positive"));
    }
    let templates = class_templates(seed, classes, side);
    let mut rng = rng_from(stream(seed, "synth-noise"));
    let per = side * side;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let shift: f64 = SYNTH_SHIFT * rng.sample::<f64, _>(StandardNormal);
        for &t in &templates[label] {
            let noise: f64 = rng.sample(StandardNormal);
            pixels.push(unit_to_level(t + shift + SYNTH_NOISE * noise));
        }
        labels.push(label);
    }
    Dataset::new([1, side, side], pixels, labels, classes)
}

const SYNTH_NOISE: f64 = 0.18;
const SYNTH_SHIFT: f64 = 0.05;

/// Noise-free per-class mean patterns used by [`synth_dataset`].
pub fn class_templates(seed: u64, classes: usize, side: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from(stream(seed, "synth-templates"));
    let sigma = side as f64 / 5.0;
    (0..classes)
        .map(|_| {
            let centers: Vec<(f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.0..side as f64),
                        rng.random_range(0.0..side as f64),
                    )
                })
                .collect();
            let raw: Vec<f64> = (0..side * side)
                .map(|p| {
                    let (y, x) = ((p / side) as f64 + 0.5, (p % side) as f64 + 0.5);
                    centers
                        .iter()
                        .map(|&(cy, cx)| {
                            let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                            libm::exp(-d2 / (2.0 * sigma * sigma))
                        })
                        .sum()
                })
                .collect();
            let peak = raw.iter().copied().fold(f64::MIN, f64::max);
            raw.iter().map(|v| 0.15 + 0.7 * v / peak).collect()
        })
        .collect()
}

/// Interpolated inputs and soft labels for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch {
    pub inputs: Tensor,
    pub soft_labels: Tensor,
    pub lambdas: Vec<f64>,
}

/// Mixes pair `(indices_i[p], indices_j[p])` with its own `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_batch(
    ds: &Dataset,
    indices_i: &[usize],
    indices_j: &[usize],
    alpha: f64,
    seed: u64,
) -> Result<MixupBatch> {
    if !(alpha > 0.0) {
        return Err(contract_err!("mixup alpha must be positive, got {}", alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| contract_err!("beta({alpha}): {e}"))?;
    let mut rng = rng_from(seed);
    let lambdas: Vec<f64> = (0..indices_i.len())
        .map(|_| beta.sample(&mut rng))
        .collect();
    mixup_with_lambdas(ds, indices_i, indices_j, &lambdas)
}

/// Mixup with caller-provided interpolation weights.
pub fn mixup_with_lambdas(
    ds: &Dataset,
    indices_i: &[usize],
    indices_j: &[usize],
    lambdas: &[f64],
) -> Result<MixupBatch> {
    if indices_i.len() != indices_j.len() || indices_i.len() != lambdas.len() {
        return Err(contract_err!(
            "mixup needs equal pair counts: {} / {} / {}",
            indices_i.len(),
            indices_j.len(),
            lambdas.len()
        ));
    }
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(contract_err!("mixup lambda {} outside [0,1]", l));
    }
    let xi = ds.batch(indices_i)?;
    let xj = ds.batch(indices_j)?;
    let per = ds.image_len();
    let classes = ds.num_classes();
    let mut inputs = Vec::with_capacity(xi.len());
    let mut soft = vec![0.0; indices_i.len() * classes];
    for (p, &lam) in lambdas.iter().enumerate() {
        let a = &xi.data()[p * per..(p + 1) * per];
        let b = &xj.data()[p * per..(p + 1) * per];
        inputs.extend(a.iter().zip(b).map(|(&u, &v)| lam * u + (1.0 - lam) * v));
        soft[p * classes + ds.labels()[indices_i[p]]] += lam;
        soft[p * classes + ds.labels()[indices_j[p]]] += 1.0 - lam;
    }
    Ok(MixupBatch {
        inputs: Tensor::new(xi.shape().to_vec(), inputs)?,
        soft_labels: Tensor::new(vec![indices_i.len(), classes], soft)?,
        lambdas: lambdas.to_vec(),
    })
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    idx
}
