//! Fully-connected tensor network factors: every pair of modes (j, k) shares
//! a rank R_{j,k}; factor k is an order-N tensor whose m-th extent is
//! R_{m,k} for m < k, the data extent I_k at position k, and R_{k,m} for
//! m > k. Reconstruction contracts the factors sequentially in mode order.

use super::{DenseTensor, Shape};
use crate::error::{Result, SdtnError};

/// Symmetric matrix of pairwise ranks with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMatrix {
    n: usize,
    r: Vec<usize>,
}

impl RankMatrix {
    /// Build from a full n x n row-major table; must be symmetric with zero
    /// diagonal, off-diagonal entries >= 1.
    pub fn new(n: usize, table: Vec<usize>) -> Result<Self> {
        if n == 0 {
            return Err(SdtnError::Value("rank matrix needs n >= 1".into()));
        }
        if table.len() != n * n {
            return Err(SdtnError::Shape(format!(
                "rank table length {} != {n}x{n}",
                table.len()
            )));
        }
        for j in 0..n {
            if table[j * n + j] != 0 {
                return Err(SdtnError::Value("rank matrix diagonal must be zero".into()));
            }
            for k in 0..n {
                if table[j * n + k] != table[k * n + j] {
                    return Err(SdtnError::Value("rank matrix must be symmetric".into()));
                }
                if j != k && table[j * n + k] == 0 {
                    return Err(SdtnError::Value(format!(
                        "pair rank ({j},{k}) must be >= 1"
                    )));
                }
            }
        }
        Ok(RankMatrix { n, r: table })
    }

    /// All pair ranks equal to `r`.
    pub fn uniform(n: usize, r: usize) -> Result<Self> {
        let mut table = vec![r; n * n];
        for j in 0..n {
            table[j * n + j] = 0;
        }
        RankMatrix::new(n, table)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> usize {
        self.r[j * self.n + k]
    }

    pub fn set_pair(&mut self, j: usize, k: usize, r: usize) {
        self.r[j * self.n + k] = r;
        self.r[k * self.n + j] = r;
    }

    /// Ranks as a flat row-major table.
    pub fn table(&self) -> &[usize] {
        &self.r
    }

    /// Shape of factor k for the given data extents.
    pub fn factor_dims(&self, k: usize, data_dims: &[usize]) -> Vec<usize> {
        (0..self.n)
            .map(|m| if m == k { data_dims[k] } else { self.get(m.min(k), m.max(k)) })
            .collect()
    }
}

/// Axis identity used while contracting the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AxisLabel {
    /// Data index i_k.
    Data(usize),
    /// Pair rank r_{j,k}, stored with j < k.
    Bond(usize, usize),
}

fn factor_labels(k: usize, n: usize) -> Vec<AxisLabel> {
    (0..n)
        .map(|m| {
            if m == k {
                AxisLabel::Data(k)
            } else {
                AxisLabel::Bond(m.min(k), m.max(k))
            }
        })
        .collect()
}

/// Contract two labeled tensors over every label they share.
fn contract(
    a: &DenseTensor,
    la: &[AxisLabel],
    b: &DenseTensor,
    lb: &[AxisLabel],
) -> Result<(DenseTensor, Vec<AxisLabel>)> {
    let shared: Vec<AxisLabel> = la.iter().copied().filter(|l| lb.contains(l)).collect();
    let free_a: Vec<usize> = (0..la.len()).filter(|&i| !shared.contains(&la[i])).collect();
    let free_b: Vec<usize> = (0..lb.len()).filter(|&i| !shared.contains(&lb[i])).collect();
    let shared_a: Vec<usize> = shared
        .iter()
        .map(|l| la.iter().position(|x| x == l).unwrap())
        .collect();
    let shared_b: Vec<usize> = shared
        .iter()
        .map(|l| lb.iter().position(|x| x == l).unwrap())
        .collect();

    let mut perm_a = free_a.clone();
    perm_a.extend(&shared_a);
    let mut perm_b = shared_b.clone();
    perm_b.extend(&free_b);

    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.dims()[i]).product();
    let q: usize = shared_a.iter().map(|&i| a.dims()[i]).product();
    let p: usize = free_b.iter().map(|&i| b.dims()[i]).product();
    let qb: usize = shared_b.iter().map(|&i| b.dims()[i]).product();
    if q != qb {
        return Err(SdtnError::Shape(
            "inconsistent shared rank extents between factors".into(),
        ));
    }

    let prod = pa.reshape(&[m, q])?.matmul(&pb.reshape(&[q, p])?)?;

    let mut out_dims: Vec<usize> = free_a.iter().map(|&i| a.dims()[i]).collect();
    out_dims.extend(free_b.iter().map(|&i| b.dims()[i]));
    let mut out_labels: Vec<AxisLabel> = free_a.iter().map(|&i| la[i]).collect();
    out_labels.extend(free_b.iter().map(|&i| lb[i]));
    if out_dims.is_empty() {
        // fully contracted: keep a 1-element tensor with a dummy data label
        return Ok((prod.reshape(&[1])?, vec![AxisLabel::Data(usize::MAX)]));
    }
    Ok((prod.reshape(&out_dims)?, out_labels))
}

/// Permute a labeled tensor into the given target label order.
fn align(t: &DenseTensor, labels: &[AxisLabel], target: &[AxisLabel]) -> Result<DenseTensor> {
    if labels.len() != target.len() {
        return Err(SdtnError::Shape("label count mismatch during alignment".into()));
    }
    let perm: Vec<usize> = target
        .iter()
        .map(|l| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| SdtnError::Shape(format!("missing axis label {l:?}")))
        })
        .collect::<Result<_>>()?;
    t.permute(&perm)
}

/// The factors {G_k} of a fully-connected tensor network together with their
/// pairwise rank matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    ranks: RankMatrix,
    factors: Vec<DenseTensor>,
    data_dims: Vec<usize>,
}

impl FactorSet {
    pub fn new(ranks: RankMatrix, factors: Vec<DenseTensor>) -> Result<Self> {
        let n = ranks.order();
        if factors.len() != n {
            return Err(SdtnError::Shape(format!(
                "expected {n} factors, got {}",
                factors.len()
            )));
        }
        let mut data_dims = vec![0usize; n];
        for (k, g) in factors.iter().enumerate() {
            if g.order() != n {
                return Err(SdtnError::Shape(format!(
                    "factor {k} must be order {n}, got order {}",
                    g.order()
                )));
            }
            data_dims[k] = g.dims()[k];
        }
        for (k, g) in factors.iter().enumerate() {
            let expect = ranks.factor_dims(k, &data_dims);
            if g.dims() != expect {
                return Err(SdtnError::Shape(format!(
                    "factor {k} has dims {:?}, expected {:?}",
                    g.dims(),
                    expect
                )));
            }
        }
        Ok(FactorSet {
            ranks,
            factors,
            data_dims,
        })
    }

    pub fn ranks(&self) -> &RankMatrix {
        &self.ranks
    }

    pub fn order(&self) -> usize {
        self.ranks.order()
    }

    pub fn factors(&self) -> &[DenseTensor] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.factors
    }

    pub fn factor(&self, k: usize) -> &DenseTensor {
        &self.factors[k]
    }

    pub fn data_dims(&self) -> &[usize] {
        &self.data_dims
    }

    pub fn data_shape(&self) -> Shape {
        Shape::new(self.data_dims.clone()).expect("validated on construction")
    }

    /// Evaluate the network: X(i_1..i_N) = sum over all pair indices of the
    /// product of factor entries. Contracts factors sequentially in mode
    /// order.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let n = self.order();
        if n == 1 {
            return Ok(self.factors[0].clone());
        }
        let mut acc = self.factors[0].clone();
        let mut labels = factor_labels(0, n);
        for k in 1..n {
            let (next, next_labels) =
                contract(&acc, &labels, &self.factors[k], &factor_labels(k, n))?;
            acc = next;
            labels = next_labels;
        }
        let target: Vec<AxisLabel> = (0..n).map(AxisLabel::Data).collect();
        align(&acc, &labels, &target)
    }

    /// Adjoint of `reconstruct`: for L = <upstream, reconstruct()>, returns
    /// dL/dG_k, i.e. the contraction of `upstream` with every factor except
    /// G_k, aligned to G_k's axis layout.
    pub fn environment(&self, k: usize, upstream: &DenseTensor) -> Result<DenseTensor> {
        let n = self.order();
        if upstream.dims() != self.data_dims.as_slice() {
            return Err(SdtnError::Shape(format!(
                "upstream dims {:?} do not match data dims {:?}",
                upstream.dims(),
                self.data_dims
            )));
        }
        if n == 1 {
            return Ok(upstream.clone());
        }
        let mut acc = upstream.clone();
        let mut labels: Vec<AxisLabel> = (0..n).map(AxisLabel::Data).collect();
        for j in 0..n {
            if j == k {
                continue;
            }
            let (next, next_labels) =
                contract(&acc, &labels, &self.factors[j], &factor_labels(j, n))?;
            acc = next;
            labels = next_labels;
        }
        align(&acc, &labels, &factor_labels(k, n))
    }

    /// Gradients of L = <upstream, reconstruct()> for every factor.
    pub fn environment_all(&self, upstream: &DenseTensor) -> Result<Vec<DenseTensor>> {
        (0..self.order())
            .map(|k| self.environment(k, upstream))
            .collect()
    }
}
