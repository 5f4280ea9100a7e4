//! Desk-scale classifiers built from named layers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Param, Tape, Var};
use crate::data::Dataset;
use crate::error::{contract_err, dim_err, Result};
use crate::rng::{rng_from, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `y = x W + b` with weight `[in, out]`.
    Dense,
    /// Valid stride-1 convolution with weight `[F, C, kh, kw]`.
    Conv,
    Relu,
    /// 2x2 average pool, stride 2.
    Pool,
    Flatten,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv)
    }

    pub fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv => 1,
            LayerKind::Relu => 2,
            LayerKind::Pool => 3,
            LayerKind::Flatten => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv,
            2 => LayerKind::Relu,
            3 => LayerKind::Pool,
            4 => LayerKind::Flatten,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Option<Param>,
    pub bias: Option<Param>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            weight: None,
            bias: None,
        }
    }

    pub fn with_params(
        name: impl Into<String>,
        kind: LayerKind,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            weight: Some(Param::new(weight)),
            bias: Some(Param::new(bias)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_ref().map_or(0, |p| p.tensor.len())
            + self.bias.as_ref().map_or(0, |p| p.tensor.len())
    }

    /// Weights followed by biases, the layer's flat parameter vector.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if let Some(w) = &self.weight {
            out.extend_from_slice(w.tensor.data());
        }
        if let Some(b) = &self.bias {
            out.extend_from_slice(b.tensor.data());
        }
        out
    }

    /// Inverse of [`Layer::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(dim_err!(
                "layer {} has {} parameters, got {}",
                self.name,
                self.param_count(),
                values.len()
            ));
        }
        let split = self.weight.as_ref().map_or(0, |p| p.tensor.len());
        if let Some(w) = &mut self.weight {
            w.tensor.data_mut().copy_from_slice(&values[..split]);
        }
        if let Some(b) = &mut self.bias {
            b.tensor.data_mut().copy_from_slice(&values[split..]);
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            p.trainable = trainable;
        }
    }
}

/// Ordered graph of named layers ending in class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    num_classes: usize,
}

/// Logits and the pre-softmax features. In these architectures the two
/// coincide: the final dense output feeds softmax directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

/// Tape handles for a model's parameters.
///
/// `leaves` receive gradients; `effective` are what the forward pass
/// consumes. They differ when a constant perturbation is attached.
#[derive(Debug, Clone)]
pub struct BoundParams {
    leaves: Vec<Option<(Var, Var)>>,
    effective: Vec<Option<(Var, Var)>>,
}

impl Model {
    pub fn from_layers(layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(contract_err!("duplicate layer name {}", l.name));
            }
            if l.kind.has_params() != (l.weight.is_some() && l.bias.is_some()) {
                return Err(contract_err!(
                    "layer {} parameter set does not match its kind",
                    l.name
                ));
            }
        }
        Ok(Self {
            layers,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Names of layers that carry parameters, in forward order.
    pub fn param_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.has_params())
            .map(|l| l.name.clone())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Freezes exactly the named layers and unfreezes the rest.
    pub fn set_frozen(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if self.layer(n).is_none() {
                return Err(contract_err!("unknown layer {}", n));
            }
        }
        for l in &mut self.layers {
            let frozen = names.contains(&l.name);
            l.set_trainable(!frozen);
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for l in &self.layers {
            for v in l.flat_params() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let leaves: Vec<Option<(Var, Var)>> = self
            .layers
            .iter()
            .map(|l| match (&l.weight, &l.bias) {
                (Some(w), Some(b)) => {
                    Some((tape.leaf(w.tensor.clone()), tape.leaf(b.tensor.clone())))
                }
                _ => None,
            })
            .collect();
        BoundParams {
            effective: leaves.clone(),
            leaves,
        }
    }

    /// Rebinds `base` with a constant additive offset per layer, given as a
    /// flat weights-then-biases vector. Gradients still flow to the leaves.
    pub fn bind_offset(
        &self,
        tape: &mut Tape,
        base: &BoundParams,
        offsets: &[Option<Vec<f64>>],
    ) -> Result<BoundParams> {
        if offsets.len() != self.layers.len() {
            return Err(dim_err!(
                "{} offsets for {} layers",
                offsets.len(),
                self.layers.len()
            ));
        }
        let mut effective = base.effective.clone();
        for ((layer, slot), off) in self.layers.iter().zip(effective.iter_mut()).zip(offsets) {
            let (Some((w, b)), Some(off)) = (*slot, off) else {
                continue;
            };
            if off.len() != layer.param_count() {
                return Err(dim_err!(
                    "offset length {} for layer {}",
                    off.len(),
                    layer.name
                ));
            }
            let wlen = tape.value(w).len();
            let dw = tape.constant(Tensor::new(
                tape.value(w).shape().to_vec(),
                off[..wlen].to_vec(),
            )?);
            let db = tape.constant(Tensor::new(
                tape.value(b).shape().to_vec(),
                off[wlen..].to_vec(),
            )?);
            *slot = Some((tape.add(w, dw)?, tape.add(b, db)?));
        }
        Ok(BoundParams {
            leaves: base.leaves.clone(),
            effective,
        })
    }

    pub fn forward_bound(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, params) in self.layers.iter().zip(&bound.effective) {
            h = match layer.kind {
                LayerKind::Dense => {
                    let (w, b) = params.expect("dense layer is bound");
                    let y = tape.matmul(h, w)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Conv => {
                    let (w, b) = params.expect("conv layer is bound");
                    let y = tape.conv2d(h, w, 1)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Relu => tape.relu(h),
                LayerKind::Pool => tape.avg_pool2(h)?,
                LayerKind::Flatten => tape.flatten(h)?,
            };
        }
        let out = tape.value(h);
        if out.rank() != 2 || out.shape()[1] != self.num_classes {
            return Err(dim_err!(
                "model output {:?} is not [batch, {}]",
                out.shape(),
                self.num_classes
            ));
        }
        Ok(h)
    }

    /// Copies leaf adjoints into each parameter's gradient buffer.
    pub fn store_grads(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for (layer, leaves) in self.layers.iter_mut().zip(&bound.leaves) {
            let Some((w, b)) = *leaves else { continue };
            if let Some(p) = &mut layer.weight {
                let len = p.tensor.len();
                p.tensor.set_grad(grads.get_or_zeros(w, len))?;
            }
            if let Some(p) = &mut layer.bias {
                let len = p.tensor.len();
                p.tensor.set_grad(grads.get_or_zeros(b, len))?;
            }
        }
        Ok(())
    }

    /// Per-layer gradient vectors (weights then biases) for parameter layers.
    pub fn layer_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        self.layers
            .iter()
            .zip(&bound.leaves)
            .filter_map(|(layer, leaves)| {
                let (w, b) = (*leaves)?;
                let wl = layer.weight.as_ref().map_or(0, |p| p.tensor.len());
                let bl = layer.bias.as_ref().map_or(0, |p| p.tensor.len());
                let mut g = grads.get_or_zeros(w, wl);
                g.extend(grads.get_or_zeros(b, bl));
                Some((layer.name.clone(), g))
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_bound(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_with_features(&self, x: &Tensor) -> Result<FeatureOutput> {
        let logits = self.forward(x)?;
        Ok(FeatureOutput {
            features: logits.clone(),
            logits,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Fraction of `ds` classified correctly, evaluated in chunks.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let x = ds.batch(chunk)?;
            let pred = self.predict(&x)?;
            correct += pred
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == ds.labels()[i])
                .count();
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Accuracy on an explicit input batch.
    pub fn accuracy_on(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

pub(crate) const EVAL_CHUNK: usize = 256;

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let classes = t.shape()[1];
    t.data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn he_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape, data).expect("sized by construction")
}

/// Flatten, then `dense-relu` per hidden width, then a final dense layer.
/// Layers are named `flatten`, `fc1`, `relu1`, `fc2`, ... Weights use He
/// initialization; all biases start at zero.
pub fn build_mlp(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Model> {
    if hidden.is_empty() {
        return Err(contract_err!("mlp needs at least one hidden layer"));
    }
    if input_dim == 0 || classes == 0 || hidden.contains(&0) {
        return Err(dim_err!("mlp widths must be positive"));
    }
    let mut rng = rng_from(stream(seed, "init-mlp"));
    let mut layers = vec![Layer::new("flatten", LayerKind::Flatten)];
    let mut fan_in = input_dim;
    for (i, &width) in hidden.iter().enumerate() {
        layers.push(Layer::with_params(
            alloc::format!("fc{}", i + 1),
            LayerKind::Dense,
            he_tensor(vec![fan_in, width], fan_in, &mut rng),
            Tensor::zeros(vec![width]),
        ));
        layers.push(Layer::new(alloc::format!("relu{}", i + 1), LayerKind::Relu));
        fan_in = width;
    }
    layers.push(Layer::with_params(
        alloc::format!("fc{}", hidden.len() + 1),
        LayerKind::Dense,
        he_tensor(vec![fan_in, classes], fan_in, &mut rng),
        Tensor::zeros(vec![classes]),
    ));
    Model::from_layers(layers, classes)
}

pub const CNN_CONV1_FILTERS: usize = 8;
pub const CNN_CONV2_FILTERS: usize = 16;

/// `conv3x3(8)-relu-pool-conv3x3(16)-relu-pool-flatten-dense(classes)`.
pub fn build_cnn(channels: usize, side: usize, classes: usize, seed: u64) -> Result<Model> {
    if side < 8 {
        return Err(dim_err!(
            "cnn input side {} is too small for two pooling stages (need >= 8)",
            side
        ));
    }
    if channels == 0 || classes == 0 {
        return Err(dim_err!("cnn channels and classes must be positive"));
    }
    let after_pool1 = (side - 2).div_ceil(2);
    let after_pool2 = (after_pool1 - 2).div_ceil(2);
    let fc_in = CNN_CONV2_FILTERS * after_pool2 * after_pool2;
    let mut rng = rng_from(stream(seed, "init-cnn"));
    let layers = vec![
        Layer::with_params(
            "conv1",
            LayerKind::Conv,
            he_tensor(
                vec![CNN_CONV1_FILTERS, channels, 3, 3],
                channels * 9,
                &mut rng,
            ),
            Tensor::zeros(vec![CNN_CONV1_FILTERS]),
        ),
        Layer::new("relu1", LayerKind::Relu),
        Layer::new("pool1", LayerKind::Pool),
        Layer::with_params(
            "conv2",
            LayerKind::Conv,
            he_tensor(
                vec![CNN_CONV2_FILTERS, CNN_CONV1_FILTERS, 3, 3],
                CNN_CONV1_FILTERS * 9,
                &mut rng,
            ),
            Tensor::zeros(vec![CNN_CONV2_FILTERS]),
        ),
        Layer::new("relu2", LayerKind::Relu),
        Layer::new("pool2", LayerKind::Pool),
        Layer::new("flatten", LayerKind::Flatten),
        Layer::with_params(
            "fc1",
            LayerKind::Dense,
            he_tensor(vec![fc_in, classes], fc_in, &mut rng),
            Tensor::zeros(vec![classes]),
        ),
    ];
    Model::from_layers(layers, classes)
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Flatten => "flatten",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_is_seed_deterministic() {
        let a = build_mlp(16, &[8, 4], 3, 5).unwrap();
        let b = build_mlp(16, &[8, 4], 3, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.fingerprint(),
            build_mlp(16, &[8, 4], 3, 6).unwrap().fingerprint()
        );
    }

    #[test]
    fn mlp_param_count() {
        let m = build_mlp(64, &[32, 16], 4, 1).unwrap();
        let widths = [64, 32, 16, 4];
        let expected: usize = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        assert_eq!(m.param_count(), expected);
        assert!(build_mlp(64, &[], 4, 1).is_err());
    }

    #[test]
    fn mlp_zero_input_gives_final_bias() {
        let mut m = build_mlp(6, &[5], 3, 2).unwrap();
        m.layer_mut("fc2")
            .unwrap()
            .bias
            .as_mut()
            .unwrap()
            .tensor
            .data_mut()
            .copy_from_slice(&[0.25, -1.5, 3.0]);
        let out = m.forward(&Tensor::zeros(vec![2, 1, 2, 3])).unwrap();
        assert_eq!(out.data(), &[0.25, -1.5, 3.0, 0.25, -1.5, 3.0]);
    }

    #[test]
    fn cnn_shapes() {
        let m = build_cnn(1, 8, 5, 3).unwrap();
        let out = m.forward(&Tensor::filled(vec![1, 1, 8, 8], 0.3)).unwrap();
        assert_eq!(out.shape(), &[1, 5]);
        let out2 = m.forward(&Tensor::filled(vec![2, 1, 8, 8], 0.3)).unwrap();
        assert_eq!(out2.shape(), &[2, 5]);
        assert_eq!(&out2.data()[..5], out.data());
        assert_eq!(&out2.data()[5..], out.data());
        assert_eq!(m.param_layer_names(), ["conv1", "conv2", "fc1"]);
        assert!(matches!(
            build_cnn(1, 7, 5, 3),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn cnn_input_shape_mismatch() {
        let m = build_cnn(1, 8, 5, 3).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(vec![1, 2, 8, 8])),
            Err(crate::Error::Dimension(_))
        ));
        assert!(matches!(
            m.forward(&Tensor::zeros(vec![1, 1, 14, 14])),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn features_equal_logits() {
        let x = Tensor::filled(vec![3, 1, 8, 8], 0.5);
        for m in [
            build_cnn(1, 8, 4, 1).unwrap(),
            build_mlp(64, &[7], 4, 1).unwrap(),
        ] {
            let f = m.forward_with_features(&x).unwrap();
            assert_eq!(f.features, f.logits);
            let diff: f64 = f
                .features
                .data()
                .iter()
                .zip(f.features.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn frozen_flags() {
        let mut m = build_mlp(4, &[3], 2, 1).unwrap();
        m.set_frozen(&["fc1".into()]).unwrap();
        assert!(!m.layer("fc1").unwrap().weight.as_ref().unwrap().trainable);
        assert!(m.layer("fc2").unwrap().weight.as_ref().unwrap().trainable);
        assert!(m.set_frozen(&["nope".into()]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let layers = vec![
            Layer::new("a", LayerKind::Relu),
            Layer::new("a", LayerKind::Flatten),
        ];
        assert!(Model::from_layers(layers, 2).is_err());
    }
}
