//! Dense tensor storage and the mode algebra the rest of the crate builds on:
//! row-major N-dimensional arrays, mode unfolding/folding, permutation,
//! small matrix helpers, and the forward-difference operator.
//!
//! Conventions used throughout the crate:
//! - data is row-major (last index fastest);
//! - modes are 0-based in this API;
//! - mode-k unfolding has `I_k` rows and enumerates the remaining modes in
//!   ascending mode order, last listed mode fastest.

mod fctn;

pub use fctn::{FactorSet, RankMatrix};

use crate::error::{Result, SdtnError};

/// Index extents of an N-dimensional tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(SdtnError::Shape("shape must have at least one mode".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(SdtnError::Shape(format!("zero extent in shape {dims:?}")));
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = count
                .checked_mul(d)
                .ok_or_else(|| SdtnError::Shape(format!("element count overflow for {dims:?}")))?;
        }
        Ok(Shape { dims })
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides (last stride is 1).
    pub fn strides(&self) -> Vec<usize> {
        let n = self.dims.len();
        let mut s = vec![1usize; n];
        for m in (0..n.saturating_sub(1)).rev() {
            s[m] = s[m + 1] * self.dims[m + 1];
        }
        s
    }
}

/// N-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        DenseTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(SdtnError::Shape(format!(
                "data length {} does not match shape {:?} ({} entries)",
                data.len(),
                shape.dims(),
                shape.count()
            )));
        }
        Ok(DenseTensor { shape, data })
    }

    /// Convenience constructor from raw dims.
    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        DenseTensor::from_vec(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros_dims(dims: &[usize]) -> Result<Self> {
        Ok(DenseTensor::zeros(Shape::new(dims.to_vec())?))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let f = self.flat_index(idx);
        self.data[f] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order());
        let strides = self.shape.strides();
        idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SdtnError::Value("tensor contains non-finite entries".into()))
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// self += c * other (shapes must match).
    pub fn axpy(&mut self, c: f64, other: &DenseTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(SdtnError::Shape(format!(
                "axpy shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.dims() != other.dims() {
            return Err(SdtnError::Shape(format!(
                "sub shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn dot(&self, other: &DenseTensor) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(SdtnError::Shape("dot shape mismatch".into()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// sqrt of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>()
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<DenseTensor> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.count() != self.count() {
            return Err(SdtnError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.dims(),
                dims
            )));
        }
        Ok(DenseTensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Permute modes: output mode m is input mode `axes[m]`.
    pub fn permute(&self, axes: &[usize]) -> Result<DenseTensor> {
        let n = self.order();
        if axes.len() != n {
            return Err(SdtnError::Shape(format!(
                "permutation {axes:?} has wrong length for order {n}"
            )));
        }
        let mut seen = vec![false; n];
        for &a in axes {
            if a >= n || seen[a] {
                return Err(SdtnError::Shape(format!("invalid permutation {axes:?}")));
            }
            seen[a] = true;
        }
        let in_dims = self.dims();
        let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
        let out_shape = Shape::new(out_dims)?;
        let in_strides = self.shape.strides();
        // stride of output mode m in the input flat layout
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![0.0; self.count()];
        let out_dims = out_shape.dims().to_vec();
        let mut idx = vec![0usize; n];
        let mut src = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src];
            // odometer over output indices, tracking the source flat index
            for m in (0..n).rev() {
                idx[m] += 1;
                src += map_strides[m];
                if idx[m] < out_dims[m] {
                    break;
                }
                src -= map_strides[m] * out_dims[m];
                idx[m] = 0;
            }
        }
        Ok(DenseTensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Mode-k unfolding: an `I_k x prod(I_j, j != k)` matrix. Row i holds the
    /// entries with index i in mode k; columns run over the remaining modes in
    /// ascending mode order, last fastest.
    pub fn unfold(&self, mode: usize) -> Result<DenseTensor> {
        let n = self.order();
        if mode >= n {
            return Err(SdtnError::ModeOutOfRange { mode, order: n });
        }
        let dims = self.dims();
        let rows = dims[mode];
        let cols = self.count() / rows;
        // column strides over the remaining modes, row-major
        let mut col_strides = vec![0usize; n];
        let mut acc = 1usize;
        for m in (0..n).rev() {
            if m == mode {
                continue;
            }
            col_strides[m] = acc;
            acc *= dims[m];
        }
        let mut out = vec![0.0; self.count()];
        let mut idx = vec![0usize; n];
        for &v in self.data.iter() {
            let row = idx[mode];
            let col: usize = (0..n)
                .filter(|&m| m != mode)
                .map(|m| idx[m] * col_strides[m])
                .sum();
            out[row * cols + col] = v;
            for m in (0..n).rev() {
                idx[m] += 1;
                if idx[m] < dims[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        DenseTensor::from_dims(&[rows, cols], out)
    }

    /// Inverse of [`DenseTensor::unfold`] under the same column convention.
    pub fn fold(matrix: &DenseTensor, mode: usize, shape: &Shape) -> Result<DenseTensor> {
        let n = shape.order();
        if mode >= n {
            return Err(SdtnError::ModeOutOfRange { mode, order: n });
        }
        let dims = shape.dims();
        let rows = dims[mode];
        let cols = shape.count() / rows;
        if matrix.order() != 2 || matrix.dims() != [rows, cols] {
            return Err(SdtnError::Shape(format!(
                "fold expects a {rows}x{cols} matrix, got {:?}",
                matrix.dims()
            )));
        }
        let mut col_strides = vec![0usize; n];
        let mut acc = 1usize;
        for m in (0..n).rev() {
            if m == mode {
                continue;
            }
            col_strides[m] = acc;
            acc *= dims[m];
        }
        let mut out = vec![0.0; shape.count()];
        let mut idx = vec![0usize; n];
        for slot in out.iter_mut() {
            let row = idx[mode];
            let col: usize = (0..n)
                .filter(|&m| m != mode)
                .map(|m| idx[m] * col_strides[m])
                .sum();
            *slot = matrix.data[row * cols + col];
            for m in (0..n).rev() {
                idx[m] += 1;
                if idx[m] < dims[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Ok(DenseTensor {
            shape: shape.clone(),
            data: out,
        })
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.order() != 2 || other.order() != 2 {
            return Err(SdtnError::Shape("matmul expects 2-d tensors".into()));
        }
        let (p, q) = (self.dims()[0], self.dims()[1]);
        let (q2, r) = (other.dims()[0], other.dims()[1]);
        if q != q2 {
            return Err(SdtnError::Shape(format!(
                "matmul inner dims differ: {q} vs {q2}"
            )));
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let a = self.data[i * q + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        DenseTensor::from_dims(&[p, r], out)
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<DenseTensor> {
        if self.order() != 2 {
            return Err(SdtnError::Shape("transpose expects a 2-d tensor".into()));
        }
        self.permute(&[1, 0])
    }
}

/// Non-circular forward-difference matrix of size `(n-1) x n`: row i has -1 at
/// column i and +1 at column i+1.
pub fn diff_operator(n: usize) -> Result<DenseTensor> {
    if n < 2 {
        return Err(SdtnError::Value(format!(
            "difference operator needs extent >= 2, got {n}"
        )));
    }
    let mut data = vec![0.0; (n - 1) * n];
    for i in 0..n - 1 {
        data[i * n + i] = -1.0;
        data[i * n + i + 1] = 1.0;
    }
    DenseTensor::from_dims(&[n - 1, n], data)
}

/// Frobenius norm of a tensor (free-function form).
pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.frobenius_norm()
}
