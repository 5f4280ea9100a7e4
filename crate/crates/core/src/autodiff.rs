//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Tape`] in execution order, so every node's
//! inputs precede it. [`Tape::backward`] replays adjoints in exact reverse
//! order and consumes the tape: a second call fails with a contract error.
//!
//! ```
//! use resq_core::autodiff::Tape;
//! use resq_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = tape.sum_squares(w);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
    },
    Relu(Var),
    AddBias(Var, Var),
    Flatten(Var),
    AvgPool2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.adjoints.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `var`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input (parameter or attacked image).
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    /// Records a value that receives no adjoint.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, Op::Constant)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err!("matmul of {:?} by {:?}", av.shape(), bv.shape()));
        }
        let (rows, inner, cols) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), rows, inner, cols);
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Valid (unpadded) strided convolution. Accepts `[C,H,W]` or `[N,C,H,W]`
    /// input and preserves the rank.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let iv = self.value(input);
        let kv = self.value(kernels);
        let geo = ConvGeometry::new(iv.shape(), kv.shape(), stride)?;
        let out = geo.forward(iv.data(), kv.data());
        let shape = if iv.rank() == 3 {
            vec![geo.filters, geo.out_h, geo.out_w]
        } else {
            vec![geo.batch, geo.filters, geo.out_h, geo.out_w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                stride,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    /// Adds `bias[f]` along axis 1 of a `[N,F]` or `[N,F,...]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (batch, features, inner) = bias_geometry(av.shape(), bv.shape())?;
        let mut data = av.data().to_vec();
        for n in 0..batch {
            for f in 0..features {
                let b = bv.data()[f];
                let base = (n * features + f) * inner;
                for x in &mut data[base..base + inner] {
                    *x += b;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(dim_err!("flatten needs a batch axis, got {:?}", av.shape()));
        }
        let batch = av.shape()[0];
        let rest = av.shape()[1..].iter().product();
        let value = av.clone().reshape(vec![batch, rest])?;
        Ok(self.push(value, Op::Flatten(a)))
    }

    /// 2x2 average pooling with stride 2 over `[N,C,H,W]`. Trailing partial
    /// windows are kept and averaged over the cells they cover.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 4 {
            return Err(dim_err!(
                "avg_pool2 expects [N,C,H,W], got {:?}",
                av.shape()
            ));
        }
        let s = av.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &av.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y_end, x_end) = ((2 * oy + 2).min(h), (2 * ox + 2).min(w));
                    let mut acc = 0.0;
                    for y in 2 * oy..y_end {
                        for x in 2 * ox..x_end {
                            acc += src[y * w + x];
                        }
                    }
                    dst[oy * ow + ox] = acc / ((y_end - 2 * oy) * (x_end - 2 * ox)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same_shape(a, b, |x, y| x + y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same_shape(a, b, |x, y| x - y)?;
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Squared L2 norm of all elements.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(total), Op::SumSquares(a))
    }

    /// Row-wise softmax of `[N, C]`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(dim_err!("softmax expects [N,C], got {:?}", av.shape()));
        }
        let classes = av.shape()[1];
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(classes) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Mean over the batch of `-sum_c target_c * log_softmax(logits)_c`.
    /// Target rows must be convex weights.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || targets.shape() != lv.shape() {
            return Err(dim_err!(
                "cross_entropy logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            ));
        }
        let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
        if batch == 0 {
            return Err(contract_err!("cross_entropy on an empty batch"));
        }
        for (i, row) in targets.data().chunks(classes).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&t| t < 0.0 || !t.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(contract_err!(
                    "target row {} is not a probability vector (sum {})",
                    i,
                    total
                ));
            }
        }
        let mut loss = 0.0;
        for (row, t) in lv
            .data()
            .chunks(classes)
            .zip(targets.data().chunks(classes))
        {
            let lse = log_sum_exp(row);
            loss -= row
                .iter()
                .zip(t)
                .map(|(&z, &p)| if p == 0.0 { 0.0 } else { p * (z - lse) })
                .sum::<f64>();
        }
        loss /= batch as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    fn zip_same_shape(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err!(
                "elementwise op on {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        Ok(av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    /// Propagates adjoints from the scalar `loss` back to every recorded
    /// node. The tape is consumed; calling this twice is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(contract_err!("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (rows, inner, cols) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = G B^T, dB = A^T G
                    let mut da = vec![0.0; rows * inner];
                    for i in 0..rows {
                        for k in 0..inner {
                            let mut acc = 0.0;
                            for j in 0..cols {
                                acc += g[i * cols + j] * bv.data()[k * cols + j];
                            }
                            da[i * inner + k] = acc;
                        }
                    }
                    let mut db = vec![0.0; inner * cols];
                    for i in 0..rows {
                        for k in 0..inner {
                            let a_ik = av.data()[i * inner + k];
                            if a_ik == 0.0 {
                                continue;
                            }
                            let row = &mut db[k * cols..(k + 1) * cols];
                            for (d, &gij) in row.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                                *d += a_ik * gij;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                } => {
                    let (iv, kv) = (self.value(*input), self.value(*kernels));
                    let geo = ConvGeometry::new(iv.shape(), kv.shape(), *stride)?;
                    let (di, dk) = geo.backward(iv.data(), kv.data(), &g);
                    accumulate(&mut adj, *input, di);
                    accumulate(&mut adj, *kernels, dk);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da = av
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gx)| if x > 0.0 { gx } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::AddBias(a, bias) => {
                    let (av, bv) = (self.value(*a), self.value(*bias));
                    let (batch, features, inner) = bias_geometry(av.shape(), bv.shape())?;
                    let mut db = vec![0.0; features];
                    for n in 0..batch {
                        for (f, d) in db.iter_mut().enumerate() {
                            let base = (n * features + f) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *bias, db);
                }
                Op::Flatten(a) => accumulate(&mut adj, *a, g),
                Op::AvgPool2(a) => {
                    let s = self.value(*a).shape();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                    let mut da = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let (y_end, x_end) = ((2 * oy + 2).min(h), (2 * ox + 2).min(w));
                                let cells = ((y_end - 2 * oy) * (x_end - 2 * ox)) as f64;
                                let share = g[plane * oh * ow + oy * ow + ox] / cells;
                                for y in 2 * oy..y_end {
                                    for x in 2 * ox..x_end {
                                        da[plane * h * w + y * w + x] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, factor) => {
                    let da = g.iter().map(|x| x * factor).collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    accumulate(&mut adj, *a, vec![g[0]; len]);
                }
                Op::SumSquares(a) => {
                    let da = self
                        .value(*a)
                        .data()
                        .iter()
                        .map(|x| 2.0 * x * g[0])
                        .collect();
                    accumulate(&mut adj, *a, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let classes = y.shape()[1];
                    let mut da = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(classes)
                        .zip(g.chunks(classes))
                        .zip(da.chunks_mut(classes))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
                    let coef = g[0] / batch as f64;
                    let mut dl = lv.data().to_vec();
                    for (row, t) in dl.chunks_mut(classes).zip(targets.chunks(classes)) {
                        softmax_in_place(row);
                        for (p, &ti) in row.iter_mut().zip(t) {
                            *p = (*p - ti) * coef;
                        }
                    }
                    accumulate(&mut adj, *logits, dl);
                }
            }
        }

        for (node, slot) in self.nodes.iter().zip(adj.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, grad: Vec<f64>) {
    match &mut adj[var.0] {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

fn bias_geometry(a: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() < 2 || bias.len() != 1 || a[1] != bias[0] {
        return Err(dim_err!("add_bias of {:?} with bias {:?}", a, bias));
    }
    Ok((a[0], a[1], a[2..].iter().product()))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let a_ik = a[i * inner + k];
            for (o, &bkj) in out_row.iter_mut().zip(&b[k * cols..(k + 1) * cols]) {
                *o += a_ik * bkj;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&z| libm::exp(z - max)).sum();
    max + libm::log(s)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = libm::exp(*z - max);
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        let (batch, c, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(dim_err!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {:?}",
                    input
                ))
            }
        };
        let [f, kc, kh, kw] = *kernels else {
            return Err(dim_err!(
                "conv2d kernels must be [F,C,kh,kw], got {:?}",
                kernels
            ));
        };
        if kc != c {
            return Err(dim_err!(
                "conv2d channel mismatch: input {} vs kernel {}",
                c,
                kc
            ));
        }
        if kh > h || kw > w {
            return Err(dim_err!(
                "conv2d kernel {}x{} larger than input {}x{}",
                kh,
                kw,
                h,
                w
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be >= 1"));
        }
        Ok(Self {
            batch,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let (oh, ow) = (self.out_h, self.out_w);
        let mut out = vec![0.0; self.batch * self.filters * oh * ow];
        for n in 0..self.batch {
            let img = &input[n * c * h * w..(n + 1) * c * h * w];
            for f in 0..self.filters {
                let ker = &kernels[f * c * self.kh * self.kw..(f + 1) * c * self.kh * self.kw];
                let dst = &mut out
                    [(n * self.filters + f) * oh * ow..(n * self.filters + f + 1) * oh * ow];
                for ch in 0..c {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let kval = ker[(ch * self.kh + ky) * self.kw + kx];
                            for oy in 0..oh {
                                let row = &img[ch * h * w + (oy * self.stride + ky) * w..];
                                for ox in 0..ow {
                                    dst[oy * ow + ox] += kval * row[ox * self.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[f64], kernels: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let (oh, ow) = (self.out_h, self.out_w);
        let ksz = c * self.kh * self.kw;
        let mut di = vec![0.0; input.len()];
        let mut dk = vec![0.0; kernels.len()];
        for n in 0..self.batch {
            let img = &input[n * c * h * w..(n + 1) * c * h * w];
            let dimg = &mut di[n * c * h * w..(n + 1) * c * h * w];
            for f in 0..self.filters {
                let ker = &kernels[f * ksz..(f + 1) * ksz];
                let dker = &mut dk[f * ksz..(f + 1) * ksz];
                let gout =
                    &g[(n * self.filters + f) * oh * ow..(n * self.filters + f + 1) * oh * ow];
                for ch in 0..c {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let kidx = (ch * self.kh + ky) * self.kw + kx;
                            let kval = ker[kidx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let base = ch * h * w + (oy * self.stride + ky) * w;
                                for ox in 0..ow {
                                    let go = gout[oy * ow + ox];
                                    let pix = base + ox * self.stride + kx;
                                    acc += go * img[pix];
                                    dimg[pix] += go * kval;
                                }
                            }
                            dker[kidx] += acc;
                        }
                    }
                }
            }
        }
        (di, dk)
    }
}

/// A trainable tensor with a freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(tensor: Tensor) -> Self {
        Self {
            tensor,
            trainable: true,
        }
    }
}

/// Plain gradient descent: `w <- w - lr * grad`, then clears gradients.
///
/// Frozen parameters keep their values bit-for-bit; any adjoint they
/// received is discarded.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, lr: f64) -> Result<()> {
    let mut params: Vec<&mut Param> = params.into_iter().collect();
    for p in params.iter().filter(|p| p.trainable) {
        if p.tensor.grad().is_none() {
            return Err(contract_err!(
                "sgd_step on a trainable parameter without a gradient"
            ));
        }
    }
    for p in params.iter_mut() {
        if p.trainable {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            for (w, g) in p.tensor.data_mut().iter_mut().zip(grad) {
                *w -= lr * g;
            }
        }
        p.tensor.clear_grad();
    }
    Ok(())
}
