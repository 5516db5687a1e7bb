//! Dense row-major `f64` tensors.

use std::fmt;

use crate::error::{Error, Result};

/// Dense N-D array of `f64` in row-major order (last axis varies fastest).
///
/// All dimensions are at least 1 and `data.len()` always equals the
/// product of the shape. A rank-0 tensor holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        out[k] = out[k + 1] * shape[k + 1];
    }
    out
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "dimension sizes must be >= 1".into(),
            });
        }
        n = n.checked_mul(d).ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape. Meant for shapes known to be valid.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = checked_numel(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("from_vec needs a non-empty vector")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::InvalidArgument(format!(
                "index of rank {} for tensor of rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut flat = 0;
        let mut stride = 1;
        for k in (0..index.len()).rev() {
            if index[k] >= self.shape[k] {
                return Err(Error::InvalidArgument(format!(
                    "index {:?} out of bounds for shape {:?}",
                    index, self.shape
                )));
            }
            flat += index[k] * stride;
            stride *= self.shape[k];
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// In-place `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Combines `self` with `other`, broadcasting `other` if needed.
    ///
    /// Broadcasting aligns trailing axes: `other` may have lower rank, and
    /// each of its dimensions must equal the matching dimension of `self`
    /// or be 1. The result always has `self`'s shape.
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
            BinaryOp::Div => |a, b| a / b,
            BinaryOp::Max => f64::max,
        };
        if op == BinaryOp::Div {
            if let Some(index) = other.data.iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { index });
            }
        }
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let b_strides = self.broadcast_strides(other)?;
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; self.rank()];
        let mut b_off = 0usize;
        for &a in &self.data {
            data.push(f(a, other.data[b_off]));
            // odometer increment over self's shape, tracking other's offset
            for k in (0..index.len()).rev() {
                index[k] += 1;
                b_off += b_strides[k];
                if index[k] < self.shape[k] {
                    break;
                }
                b_off -= b_strides[k] * index[k];
                index[k] = 0;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn broadcast_strides(&self, other: &Tensor) -> Result<Vec<usize>> {
        let mismatch = || Error::ShapeMismatch {
            op: "broadcast",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        if other.rank() > self.rank() {
            return Err(mismatch());
        }
        let offset = self.rank() - other.rank();
        let own = strides(&other.shape);
        let mut out = vec![0usize; self.rank()];
        for k in 0..other.rank() {
            let d = other.shape[k];
            if d == self.shape[offset + k] {
                out[offset + k] = own[k];
            } else if d != 1 {
                return Err(mismatch());
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Div, other)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Max, other)
    }

    /// Reduces over `axes`. Reduced axes are dropped unless `keep_dims`,
    /// in which case they stay with size 1.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let kept_shape: Vec<usize> = (0..rank)
            .map(|k| if reduced[k] { 1 } else { self.shape[k] })
            .collect();
        let out_len: usize = kept_shape.iter().product();
        let count = self.data.len() / out_len;
        let out_strides = strides(&kept_shape);
        let step: Vec<usize> = (0..rank)
            .map(|k| if reduced[k] { 0 } else { out_strides[k] })
            .collect();

        let init = match op {
            ReduceOp::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut acc = vec![init; out_len];
        let mut index = vec![0usize; rank];
        let mut off = 0usize;
        for &v in &self.data {
            match op {
                ReduceOp::Max => acc[off] = acc[off].max(v),
                _ => acc[off] += v,
            }
            for k in (0..rank).rev() {
                index[k] += 1;
                off += step[k];
                if index[k] < self.shape[k] {
                    break;
                }
                off -= step[k] * index[k];
                index[k] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let c = count as f64;
            acc.iter_mut().for_each(|v| *v /= c);
        }
        let shape = if keep_dims {
            kept_shape
        } else {
            (0..rank)
                .filter(|&k| !reduced[k])
                .map(|k| self.shape[k])
                .collect()
        };
        Tensor::new(shape, acc)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose expects rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Concatenates along the last axis. All leading dimensions must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }

    /// Inverse of [`Tensor::concat_last`]: splits the last axis into pieces
    /// of the given widths.
    pub fn split_last(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let last = *self
            .shape
            .last()
            .ok_or_else(|| Error::InvalidArgument("split of a scalar".into()))?;
        if widths.iter().sum::<usize>() != last {
            return Err(Error::InvalidArgument(format!(
                "split widths {:?} do not add up to {}",
                widths, last
            )));
        }
        let rows = self.data.len() / last;
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
        for r in 0..rows {
            let mut start = r * last;
            for (buf, &w) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&self.data[start..start + w]);
                start += w;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(data, &w)| {
                let mut shape = self.shape.clone();
                *shape.last_mut().unwrap() = w;
                Tensor::new(shape, data)
            })
            .collect()
    }

    /// Rows `indices` of the leading axis, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        let row = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!("row {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
