//! Versioned little-endian checkpoint container for float and quantized
//! models.
//!
//! ```text
//! "RESQ" | version u16 | flags u16 (bit 0: quantized) | layer count u32
//! per layer:
//!   name length u16 | UTF-8 name | kind u8 | rank u8 | dims u32 * rank
//!   float payload:     weights then biases as f64
//!   quantized payload: b u8 | n_msb u8 | s f64 | x_min f64
//!                      | code bytes length u64 | code bytes
//!                      | 2 x (replica length u64 | replica bytes)
//! ```
//! Layers without parameters have rank 0 and no payload. `dims` is the
//! weight shape; the bias length follows from the layer kind.

use std::fs;
use std::path::Path;

use resq_core::model::{Layer, LayerKind, Model};
use resq_core::quant::{bias_len, PackedBits, QuantEntry, QuantizedLayer, QuantizedModel};
use resq_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RESQ";
pub const VERSION: u16 = 1;
const FLAG_QUANTIZED: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Float(Model),
    Quantized(QuantizedModel),
}

impl Checkpoint {
    pub fn is_quantized(&self) -> bool {
        matches!(self, Checkpoint::Quantized(_))
    }

    /// Float model for inference; quantized checkpoints are voted and
    /// dequantized.
    pub fn to_model(&self) -> Result<Model> {
        match self {
            Checkpoint::Float(m) => Ok(m.clone()),
            Checkpoint::Quantized(q) => Ok(q.dequantize()?),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn stream(&mut self, bytes: &[u8]) {
        self.u64(bytes.len() as u64);
        self.0.extend_from_slice(bytes);
    }
    fn layer_head(&mut self, name: &str, kind: LayerKind, dims: &[usize]) -> Result<()> {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("layer name {name} too long")))?;
        self.u16(len);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(kind.code());
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
        Ok(())
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    match ckpt {
        Checkpoint::Float(m) => {
            w.u16(0);
            w.u32(m.layers().len() as u32);
            for l in m.layers() {
                let dims = l.weight.as_ref().map_or(&[][..], |p| p.tensor.shape());
                w.layer_head(&l.name, l.kind, dims)?;
                for v in l.flat_params() {
                    w.f64(v);
                }
            }
        }
        Checkpoint::Quantized(q) => {
            w.u16(FLAG_QUANTIZED);
            w.u32(q.entries.len() as u32);
            for e in &q.entries {
                match e {
                    QuantEntry::Plain { name, kind } => w.layer_head(name, *kind, &[])?,
                    QuantEntry::Quantized(l) => {
                        w.layer_head(&l.name, l.kind, &l.weight_shape)?;
                        w.u8(l.bits as u8);
                        w.u8(l.n_msb as u8);
                        w.f64(l.scale);
                        w.f64(l.x_min);
                        w.stream(l.codes.bytes());
                        match &l.tmr {
                            Some([a, b]) => {
                                w.stream(a.bytes());
                                w.stream(b.bytes());
                            }
                            None => {
                                w.stream(&[]);
                                w.stream(&[]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn stream(&mut self) -> Result<&'a [u8]> {
        let len = usize::try_from(self.u64()?).map_err(|_| self.err("stream length overflows"))?;
        self.take(len)
    }
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }
}

struct LayerHead {
    name: String,
    kind: LayerKind,
    dims: Vec<usize>,
}

fn read_head(r: &mut Reader<'_>) -> Result<LayerHead> {
    let len = usize::from(r.u16()?);
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| r.err("layer name is not UTF-8"))?
        .to_string();
    let code = r.u8()?;
    let kind =
        LayerKind::from_code(code).ok_or_else(|| r.err(format!("unknown layer kind {code}")))?;
    let rank = usize::from(r.u8()?);
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let expected_rank = match kind {
        LayerKind::Dense => 2,
        LayerKind::Conv => 4,
        _ => 0,
    };
    if rank != expected_rank {
        return Err(r.err(format!(
            "layer {name}: {kind} expects rank {expected_rank}, found {rank}"
        )));
    }
    Ok(LayerHead { name, kind, dims })
}

/// The class count is the output width of the last parameter layer.
fn output_width(
    kinds: impl DoubleEndedIterator<Item = (LayerKind, Vec<usize>)>,
    path: &Path,
) -> Result<usize> {
    kinds
        .rev()
        .find(|(k, _)| k.has_params())
        .map(|(k, dims)| bias_len(k, &dims))
        .ok_or_else(|| Error::format(path, "container holds no parameter layers"))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic, not a RESQ container"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported container version {version}")));
    }
    let flags = r.u16()?;
    if flags & !FLAG_QUANTIZED != 0 {
        return Err(r.err(format!("unknown flags 0x{flags:04x}")));
    }
    let count = r.u32()? as usize;
    let ckpt = if flags & FLAG_QUANTIZED == 0 {
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let h = read_head(&mut r)?;
            if !h.kind.has_params() {
                layers.push(Layer::new(h.name, h.kind));
                continue;
            }
            let wlen: usize = h.dims.iter().product();
            let blen = bias_len(h.kind, &h.dims);
            let values = (0..wlen + blen)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let w =
                Tensor::new(h.dims, values[..wlen].to_vec()).map_err(|e| r.err(e.to_string()))?;
            let b = Tensor::new(vec![blen], values[wlen..].to_vec())
                .map_err(|e| r.err(e.to_string()))?;
            layers.push(Layer::with_params(h.name, h.kind, w, b));
        }
        let classes = output_width(
            layers.iter().map(|l| {
                (
                    l.kind,
                    l.weight
                        .as_ref()
                        .map_or(vec![], |p| p.tensor.shape().to_vec()),
                )
            }),
            path,
        )?;
        Checkpoint::Float(Model::from_layers(layers, classes).map_err(|e| r.err(e.to_string()))?)
    } else {
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let h = read_head(&mut r)?;
            if !h.kind.has_params() {
                entries.push(QuantEntry::Plain {
                    name: h.name,
                    kind: h.kind,
                });
                continue;
            }
            let bits = u32::from(r.u8()?);
            let n_msb = u32::from(r.u8()?);
            let scale = r.f64()?;
            let x_min = r.f64()?;
            if !(2..=16).contains(&bits) || n_msb > bits {
                return Err(r.err(format!("layer {}: invalid b={bits}, n_msb={n_msb}", h.name)));
            }
            let n = h.dims.iter().product::<usize>() + bias_len(h.kind, &h.dims);
            let codes = PackedBits::from_bytes(bits, n, r.stream()?.to_vec())
                .map_err(|e| r.err(e.to_string()))?;
            let (a, b) = (r.stream()?.to_vec(), r.stream()?.to_vec());
            let tmr = if n_msb == 0 {
                if !a.is_empty() || !b.is_empty() {
                    return Err(r.err(format!("layer {}: replicas present with n_msb=0", h.name)));
                }
                None
            } else {
                let a = PackedBits::from_bytes(n_msb, n, a).map_err(|e| r.err(e.to_string()))?;
                let b = PackedBits::from_bytes(n_msb, n, b).map_err(|e| r.err(e.to_string()))?;
                Some([a, b])
            };
            entries.push(QuantEntry::Quantized(QuantizedLayer {
                name: h.name,
                kind: h.kind,
                weight_shape: h.dims,
                bits,
                scale,
                x_min,
                x_max: x_min + f64::from((1u32 << bits) - 1) * scale,
                codes,
                n_msb,
                tmr,
            }));
        }
        let classes = output_width(
            entries.iter().map(|e| match e {
                QuantEntry::Quantized(q) => (q.kind, q.weight_shape.clone()),
                QuantEntry::Plain { kind, .. } => (*kind, vec![]),
            }),
            path,
        )?;
        let q = QuantizedModel {
            entries,
            num_classes: classes,
        };
        // Surface packing or naming problems now rather than at first use.
        q.dequantize().map_err(|e| r.err(e.to_string()))?;
        Checkpoint::Quantized(q)
    };
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ckpt)
}

pub fn save_container(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn load_float(path: &Path) -> Result<Model> {
    match load_container(path)? {
        Checkpoint::Float(m) => Ok(m),
        Checkpoint::Quantized(_) => Err(Error::format(
            path,
            "expected a float checkpoint, found a quantized one",
        )),
    }
}
