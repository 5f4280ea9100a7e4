//! Unsigned affine weight quantization with triple-redundant MSBs.
//!
//! Codes are `q = round_half_up((x - x_min) / s)` with
//! `s = (x_max - x_min) / (2^b - 1)`, so every stored code is a non-negative
//! `b`-bit integer and no sign bit exists. Optionally the top `n_msb` bits of
//! each code are stored twice more; dequantization majority-votes them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, Error, Result};
use crate::fault::flip_bits;
use crate::model::{Layer, LayerKind, Model};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Fixed-width unsigned integers packed little-endian into bytes: element
/// `i` occupies stream bits `[i*width, (i+1)*width)`, least significant bit
/// first, and stream bit `p` is bit `p % 8` of byte `p / 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    width: u32,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedBits {
    pub fn pack(values: &[u32], width: u32) -> Result<Self> {
        if width == 0 || width > 32 {
            return Err(contract_err!("packing width {} outside [1,32]", width));
        }
        let mut out = Self {
            width,
            len: values.len(),
            bytes: vec![0; byte_len(values.len(), width)],
        };
        for (i, &v) in values.iter().enumerate() {
            if width < 32 && v >> width != 0 {
                return Err(contract_err!("value {} does not fit in {} bits", v, width));
            }
            out.put(i, v);
        }
        Ok(out)
    }

    /// Wraps raw bytes, checking the length against the declared geometry.
    pub fn from_bytes(width: u32, len: usize, bytes: Vec<u8>) -> Result<Self> {
        if width == 0 || width > 32 {
            return Err(Error::Format(alloc::format!(
                "packing width {width} outside [1,32]"
            )));
        }
        let expected = byte_len(len, width);
        if bytes.len() != expected {
            return Err(Error::Format(alloc::format!(
                "{} elements of {} bits need {} bytes, found {}",
                len,
                width,
                expected,
                bytes.len()
            )));
        }
        Ok(Self { width, len, bytes })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn validate(&self) -> Result<()> {
        if self.bytes.len() != byte_len(self.len, self.width) {
            return Err(Error::Format(alloc::format!(
                "packed stream holds {} bytes for {} x {} bits",
                self.bytes.len(),
                self.len,
                self.width
            )));
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> u32 {
        let mut v = 0u32;
        let base = i * self.width as usize;
        for j in 0..self.width as usize {
            let p = base + j;
            v |= u32::from((self.bytes[p / 8] >> (p % 8)) & 1) << j;
        }
        v
    }

    fn put(&mut self, i: usize, v: u32) {
        let base = i * self.width as usize;
        for j in 0..self.width as usize {
            let p = base + j;
            let bit = ((v >> j) & 1) as u8;
            self.bytes[p / 8] = (self.bytes[p / 8] & !(1 << (p % 8))) | (bit << (p % 8));
        }
    }

    pub fn unpack(&self) -> Vec<u32> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

fn byte_len(len: usize, width: u32) -> usize {
    (len * width as usize).div_ceil(8)
}

/// Majority of three bits.
pub fn tmr_vote(b1: u8, b2: u8, b3: u8) -> u8 {
    u8::from(b1 + b2 + b3 >= 2)
}

/// Bitwise majority of three words.
pub fn tmr_vote_word(a: u32, b: u32, c: u32) -> u32 {
    (a & b) | (a & c) | (b & c)
}

/// Bias length for a parameter layer with the given weight shape.
pub fn bias_len(kind: LayerKind, weight_shape: &[usize]) -> usize {
    match kind {
        LayerKind::Dense => weight_shape.get(1).copied().unwrap_or(0),
        LayerKind::Conv => weight_shape.first().copied().unwrap_or(0),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub kind: LayerKind,
    /// Shape of the weight tensor; biases follow the weights in `codes`.
    pub weight_shape: Vec<usize>,
    pub bits: u32,
    /// Zero marks a degenerate (constant) layer: every value is `x_min`.
    pub scale: f64,
    pub x_min: f64,
    /// `x_min + (2^b - 1) * scale`, the value of the all-ones code.
    pub x_max: f64,
    pub codes: PackedBits,
    pub n_msb: u32,
    /// Two extra replicas of the top `n_msb` bits of every code.
    pub tmr: Option<[PackedBits; 2]>,
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(contract_err!(
            "bit width {} outside [{}, {}]",
            bits,
            MIN_BITS,
            MAX_BITS
        ))
    }
}

fn levels(bits: u32) -> f64 {
    f64::from((1u32 << bits) - 1)
}

/// Affine codes, scale and range for `values`.
pub fn quantize_values(values: &[f64], bits: u32) -> Result<(Vec<u32>, f64, f64)> {
    check_bits(bits)?;
    let (lo, hi) = values
        .iter()
        .fold(None, |acc: Option<(f64, f64)>, &v| {
            Some(acc.map_or((v, v), |(l, h)| (l.min(v), h.max(v))))
        })
        .ok_or_else(|| contract_err!("cannot quantize an empty tensor"))?;
    if !(hi > lo) {
        return Err(Error::DegenerateLayer { value: lo });
    }
    let max_code = (1u32 << bits) - 1;
    let scale = (hi - lo) / levels(bits);
    let codes = values
        .iter()
        .map(|&x| {
            let t = (x - lo) / scale;
            (libm::floor(t + 0.5) as u32).min(max_code)
        })
        .collect();
    Ok((codes, scale, lo))
}

pub fn dequantize_value(code: u32, scale: f64, x_min: f64) -> f64 {
    f64::from(code) * scale + x_min
}

/// Quantizes a bare tensor as an anonymous dense layer.
pub fn quantize_layer(weights: &Tensor, bits: u32) -> Result<QuantizedLayer> {
    let (codes, scale, x_min) = quantize_values(weights.data(), bits)?;
    Ok(QuantizedLayer {
        name: String::new(),
        kind: LayerKind::Dense,
        weight_shape: weights.shape().to_vec(),
        bits,
        scale,
        x_min,
        x_max: x_min + levels(bits) * scale,
        codes: PackedBits::pack(&codes, bits)?,
        n_msb: 0,
        tmr: None,
    })
}

impl QuantizedLayer {
    /// Quantizes all parameters of `layer` (weights then biases) under one
    /// range. Constant layers become the `scale = 0` sentinel.
    pub fn from_layer(layer: &Layer, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let weight = layer
            .weight
            .as_ref()
            .ok_or_else(|| contract_err!("layer {} has no parameters", layer.name))?;
        let values = layer.flat_params();
        let (codes, scale, x_min) = match quantize_values(&values, bits) {
            Ok(q) => q,
            Err(Error::DegenerateLayer { value }) => (vec![0; values.len()], 0.0, value),
            Err(e) => return Err(e),
        };
        Ok(Self {
            name: layer.name.clone(),
            kind: layer.kind,
            weight_shape: weight.tensor.shape().to_vec(),
            bits,
            scale,
            x_min,
            x_max: x_min + levels(bits) * scale,
            codes: PackedBits::pack(&codes, bits)?,
            n_msb: 0,
            tmr: None,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        self.codes.validate()?;
        if self.codes.width() != self.bits {
            return Err(Error::Format(alloc::format!(
                "code stream width {} differs from bit width {}",
                self.codes.width(),
                self.bits
            )));
        }
        let expected = self.weight_len() + bias_len(self.kind, &self.weight_shape);
        if self.codes.len() != expected {
            return Err(Error::Format(alloc::format!(
                "layer {} stores {} codes, shape needs {}",
                self.name,
                self.codes.len(),
                expected
            )));
        }
        match (&self.tmr, self.n_msb) {
            (None, 0) => Ok(()),
            (Some(copies), n) if n > 0 && n <= self.bits => {
                for c in copies {
                    c.validate()?;
                    if c.width() != n || c.len() != self.codes.len() {
                        return Err(Error::Format(alloc::format!(
                            "replica stream geometry {}x{} does not match {} codes of {} bits",
                            c.len(),
                            c.width(),
                            self.codes.len(),
                            n
                        )));
                    }
                }
                Ok(())
            }
            _ => Err(Error::Format(alloc::format!(
                "replica streams inconsistent with n_msb={}",
                self.n_msb
            ))),
        }
    }

    /// Codes after majority-voting the protected bits.
    pub fn voted_codes(&self) -> Result<Vec<u32>> {
        self.validate()?;
        let mut codes = self.codes.unpack();
        if let Some([r1, r2]) = &self.tmr {
            let shift = self.bits - self.n_msb;
            let low_mask = (1u32 << shift) - 1;
            for (i, c) in codes.iter_mut().enumerate() {
                let top = tmr_vote_word(*c >> shift, r1.get(i), r2.get(i));
                *c = (top << shift) | (*c & low_mask);
            }
        }
        Ok(codes)
    }

    pub fn dequantize(&self) -> Result<Vec<f64>> {
        let codes = self.voted_codes()?;
        Ok(codes
            .into_iter()
            .map(|q| dequantize_value(q, self.scale, self.x_min))
            .collect())
    }

    /// Adds two replicas of the top `n_msb` bits; `0` removes protection.
    pub fn protect_msbs(&self, n_msb: u32) -> Result<Self> {
        if n_msb > self.bits {
            return Err(contract_err!(
                "n_msb {} exceeds bit width {}",
                n_msb,
                self.bits
            ));
        }
        let mut out = self.clone();
        out.n_msb = n_msb;
        out.tmr = if n_msb == 0 {
            None
        } else {
            let shift = self.bits - n_msb;
            let tops: Vec<u32> = self.codes.unpack().iter().map(|c| c >> shift).collect();
            let copy = PackedBits::pack(&tops, n_msb)?;
            Some([copy.clone(), copy])
        };
        Ok(out)
    }

    /// Bytes used by codes plus replicas.
    pub fn storage_bytes(&self) -> usize {
        self.codes.bytes().len()
            + self
                .tmr
                .as_ref()
                .map_or(0, |t| t[0].bytes().len() + t[1].bytes().len())
    }

    /// Stored bits subject to faults: codes and both replicas.
    pub fn stored_bits(&self) -> usize {
        self.codes.len() * (self.bits + 2 * self.n_msb) as usize
    }

    /// Flips every stored bit, replicas included, with probability `ber`.
    /// Returns the faulted layer and the number of flips.
    pub fn with_faults(&self, ber: f64, seed: u64) -> Result<(Self, u64)> {
        let mut out = self.clone();
        let (codes, mut flips) =
            flip_bits(&self.codes.unpack(), self.bits, ber, derive_seed(seed, 0));
        out.codes = PackedBits::pack(&codes, self.bits)?;
        if let Some(copies) = &self.tmr {
            let mut faulted = copies.clone();
            for (r, (dst, src)) in faulted.iter_mut().zip(copies).enumerate() {
                let (vals, f) = flip_bits(
                    &src.unpack(),
                    self.n_msb,
                    ber,
                    derive_seed(seed, r as u64 + 1),
                );
                flips += f;
                *dst = PackedBits::pack(&vals, self.n_msb)?;
            }
            out.tmr = Some(faulted);
        }
        Ok((out, flips))
    }
}

/// A layer of a [`QuantizedModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum QuantEntry {
    Plain { name: String, kind: LayerKind },
    Quantized(QuantizedLayer),
}

impl QuantEntry {
    pub fn name(&self) -> &str {
        match self {
            QuantEntry::Plain { name, .. } => name,
            QuantEntry::Quantized(q) => &q.name,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            QuantEntry::Plain { kind, .. } => *kind,
            QuantEntry::Quantized(q) => q.kind,
        }
    }
}

/// A model whose parameter layers are stored as quantized codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub entries: Vec<QuantEntry>,
    pub num_classes: usize,
}

impl QuantizedModel {
    /// Uniform bit width across all parameter layers.
    pub fn quantize(model: &Model, bits: u32) -> Result<Self> {
        let entries = model
            .layers()
            .iter()
            .map(|l| {
                Ok(if l.kind.has_params() {
                    QuantEntry::Quantized(QuantizedLayer::from_layer(l, bits)?)
                } else {
                    QuantEntry::Plain {
                        name: l.name.clone(),
                        kind: l.kind,
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            num_classes: model.num_classes(),
        })
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = &QuantizedLayer> {
        self.entries.iter().filter_map(|e| match e {
            QuantEntry::Quantized(q) => Some(q),
            QuantEntry::Plain { .. } => None,
        })
    }

    pub fn bits(&self) -> Option<u32> {
        self.quantized_layers().next().map(|q| q.bits)
    }

    pub fn n_msb(&self) -> Option<u32> {
        self.quantized_layers().next().map(|q| q.n_msb)
    }

    pub fn protect_msbs(&self, n_msb: u32) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Ok(match e {
                    QuantEntry::Quantized(q) => QuantEntry::Quantized(q.protect_msbs(n_msb)?),
                    other => other.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            num_classes: self.num_classes,
        })
    }

    /// Float model with every parameter replaced by its voted, dequantized value.
    pub fn dequantize(&self) -> Result<Model> {
        let layers = self
            .entries
            .iter()
            .map(|e| match e {
                QuantEntry::Plain { name, kind } => Ok(Layer::new(name.clone(), *kind)),
                QuantEntry::Quantized(q) => {
                    let values = q.dequantize()?;
                    let wlen = q.weight_len();
                    let blen = bias_len(q.kind, &q.weight_shape);
                    let w = Tensor::new(q.weight_shape.clone(), values[..wlen].to_vec())?;
                    let b = Tensor::new(vec![blen], values[wlen..].to_vec())?;
                    Ok(Layer::with_params(q.name.clone(), q.kind, w, b))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_layers(layers, self.num_classes)
    }

    /// Faulted copy; quantized layer `i` draws from child stream `i` of `seed`.
    pub fn with_faults(&self, ber: f64, seed: u64) -> Result<(Self, u64)> {
        let mut flips = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            entries.push(match e {
                QuantEntry::Quantized(q) => {
                    let (fq, f) = q.with_faults(ber, derive_seed(seed, i as u64))?;
                    flips += f;
                    QuantEntry::Quantized(fq)
                }
                other => other.clone(),
            });
        }
        Ok((
            Self {
                entries,
                num_classes: self.num_classes,
            },
            flips,
        ))
    }

    pub fn storage_bytes(&self) -> usize {
        self.quantized_layers()
            .map(QuantizedLayer::storage_bytes)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;

    #[test]
    fn integer_aligned_codes() {
        let w = Tensor::new(vec![4], vec![0., 5., 10., 15.]).unwrap();
        let q = quantize_layer(&w, 4).unwrap();
        assert_eq!((q.x_min, q.x_max, q.scale), (0.0, 15.0, 1.0));
        assert_eq!(q.codes.unpack(), [0, 5, 10, 15]);
    }

    #[test]
    fn two_bit_endpoints_exact() {
        let w = Tensor::new(vec![2], vec![-1., 1.]).unwrap();
        let q = quantize_layer(&w, 2).unwrap();
        assert_eq!(q.scale, 2.0 / 3.0);
        assert_eq!(q.codes.unpack(), [0, 3]);
        assert_eq!(q.dequantize().unwrap(), [-1.0, 1.0]);
    }

    #[test]
    fn endpoint_codes_map_to_range() {
        let w = Tensor::new(vec![3], vec![-0.37, 0.1, 2.9]).unwrap();
        for bits in [2, 5, 8, 13, 16] {
            let q = quantize_layer(&w, bits).unwrap();
            let d = q.dequantize().unwrap();
            assert_eq!(d[0], q.x_min);
            assert_eq!(d[2], q.x_max);
        }
    }

    #[test]
    fn constant_layer_is_degenerate() {
        let w = Tensor::filled(vec![5], 0.25);
        assert_eq!(
            quantize_layer(&w, 8),
            Err(Error::DegenerateLayer { value: 0.25 })
        );

        let mut m = build_mlp(2, &[2], 2, 1).unwrap();
        let layer = m.layer_mut("fc1").unwrap();
        let n = layer.param_count();
        layer.set_flat_params(&vec![0.25; n]).unwrap();
        let q = QuantizedLayer::from_layer(m.layer("fc1").unwrap(), 8).unwrap();
        assert_eq!(q.scale, 0.0);
        assert!(q.dequantize().unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bit_width_range_checked() {
        let w = Tensor::new(vec![2], vec![0., 1.]).unwrap();
        assert!(quantize_layer(&w, 1).is_err());
        assert!(quantize_layer(&w, 17).is_err());
    }

    #[test]
    fn vote_truth_table() {
        assert_eq!(tmr_vote(1, 1, 0), 1);
        assert_eq!(tmr_vote(0, 0, 1), 0);
        for bits in 0..8u8 {
            let (a, b, c) = (bits & 1, (bits >> 1) & 1, (bits >> 2) & 1);
            assert_eq!(tmr_vote(a, b, c), u8::from(a + b + c >= 2));
            assert_eq!(
                tmr_vote_word(a.into(), b.into(), c.into()),
                u32::from(tmr_vote(a, b, c))
            );
        }
    }

    #[test]
    fn protect_accounting() {
        let w = Tensor::new(vec![10], (0..10).map(f64::from).collect()).unwrap();
        let q = quantize_layer(&w, 6).unwrap();
        assert_eq!(q.protect_msbs(0).unwrap(), q);
        let full = q.protect_msbs(6).unwrap();
        assert_eq!(full.storage_bytes(), 3 * q.storage_bytes());
        assert!(q.protect_msbs(7).is_err());
    }

    #[test]
    fn single_replica_fault_is_masked() {
        let w = Tensor::new(vec![7], vec![-3., -1., 0., 0.5, 1., 2., 4.]).unwrap();
        let q = quantize_layer(&w, 8).unwrap().protect_msbs(3).unwrap();
        let clean = q.dequantize().unwrap();
        for elem in 0..7 {
            for bit in 0..3u32 {
                for replica in 0..3 {
                    let mut f = q.clone();
                    match replica {
                        0 => {
                            let mut codes = f.codes.unpack();
                            codes[elem] ^= 1 << (5 + bit);
                            f.codes = PackedBits::pack(&codes, 8).unwrap();
                        }
                        r => {
                            let copies = f.tmr.as_mut().unwrap();
                            let mut vals = copies[r - 1].unpack();
                            vals[elem] ^= 1 << bit;
                            copies[r - 1] = PackedBits::pack(&vals, 3).unwrap();
                        }
                    }
                    assert_eq!(f.dequantize().unwrap(), clean);
                }
            }
        }
    }

    #[test]
    fn corrupted_packing_is_a_format_error() {
        let w = Tensor::new(vec![4], vec![0., 1., 2., 3.]).unwrap();
        let mut q = quantize_layer(&w, 4).unwrap();
        q.codes.bytes.pop();
        assert!(matches!(q.dequantize(), Err(Error::Format(_))));
        assert!(matches!(
            PackedBits::from_bytes(4, 4, vec![0; 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn packing_layout_is_little_endian() {
        let p = PackedBits::pack(&[0b101, 0b011], 3).unwrap();
        // stream bits: 1,0,1, 1,1,0 -> byte 0b0001_1101
        assert_eq!(p.bytes(), &[0b0001_1101]);
    }

    #[test]
    fn model_roundtrip_stays_close() {
        let m = build_mlp(8, &[6], 3, 2).unwrap();
        let qm = QuantizedModel::quantize(&m, 8).unwrap();
        let d = qm.dequantize().unwrap();
        for (a, b) in m.layers().iter().zip(d.layers()) {
            if let Some(q) = qm.quantized_layers().find(|q| q.name == a.name) {
                for (x, y) in a.flat_params().iter().zip(b.flat_params()) {
                    assert!((x - y).abs() <= q.scale / 2.0 + 1e-15);
                }
            }
        }
    }
}
