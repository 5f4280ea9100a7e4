use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(dim_err!("shape {:?} has a zero extent", shape));
        }
        if expected != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(contract_err!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies rows `rows` of the leading axis into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| dim_err!("cannot select rows of a rank-0 tensor"))?;
        let stride = self.data.len().checked_div(lead).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(dim_err!("row {} out of range for {} rows", r, lead));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape,
                    first.shape
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}
