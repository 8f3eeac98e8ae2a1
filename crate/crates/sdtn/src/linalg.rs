//! Bridging helpers between [`DenseTensor`] matrices and nalgebra, plus a
//! singular value decomposition with a fixed descending order.

use crate::error::{Result, SdtnError};
use crate::tensor::DenseTensor;
use nalgebra::DMatrix;

pub fn to_dmatrix(t: &DenseTensor) -> Result<DMatrix<f64>> {
    if t.order() != 2 {
        return Err(SdtnError::Shape("expected a 2-d tensor".into()));
    }
    Ok(DMatrix::from_row_slice(t.dims()[0], t.dims()[1], t.data()))
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> DenseTensor {
    let (rows, cols) = m.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(m[(i, j)]);
        }
    }
    DenseTensor::from_dims(&[rows, cols], data).expect("consistent dims")
}

/// Thin SVD with singular values sorted descending.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON * 16.0, 10_000)
        .ok_or_else(|| SdtnError::Value("SVD failed to converge".into()))?;
    let u = svd.u.ok_or_else(|| SdtnError::Value("SVD missing U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| SdtnError::Value("SVD missing V^T".into()))?;
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let u_sorted = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let vt_sorted = DMatrix::from_rows(&order.iter().map(|&i| v_t.row(i)).collect::<Vec<_>>());
    Ok(Svd {
        u: u_sorted,
        singular_values: order.iter().map(|&i| s[i]).collect(),
        v_t: vt_sorted,
    })
}

/// Error of the best rank-r approximation: sqrt of the tail of squared
/// singular values. Currently exercised only by the optimality tests.
#[cfg_attr(not(test), allow(dead_code))]
pub fn truncation_error(m: &DMatrix<f64>, rank: usize) -> Result<f64> {
    let s = svd(m)?.singular_values;
    Ok(s.iter().skip(rank).map(|v| v * v).sum::<f64>().sqrt())
}
