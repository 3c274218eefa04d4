//! Conservative standard errors from a hat-matrix construction.
//!
//! For per-stratum terms `v_i` (the `(n_i/N)·D_Γi` pieces of a weighted
//! average) and a `B×p` matrix `Q` that is constant across treatment
//! assignments, the squared standard error is `Yᵀ(I − H_Q)Y / B²` with
//! `Y_i = B·v_i/√(1 − h_Qii)`. Its expectation dominates the true variance
//! of the weighted average for every confounder pattern, the excess being
//! `E(Y)ᵀ(I − H_Q)E(Y)/B²`.

use crate::design::MatchedDesign;
use crate::{Error, Result};

const LEVERAGE_GUARD: f64 = 1.0 - 1e-10;

/// A `B×p` design matrix for the standard-error construction, stored
/// row-major.
#[derive(Debug, Clone)]
pub struct DesignMatrixQ {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl DesignMatrixQ {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    pub fn from_column(column: Vec<f64>) -> Self {
        let rows = column.len();
        Self::new(column, rows, 1)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Orthonormal basis of the column space via modified Gram-Schmidt with
    /// one reorthogonalization pass; errors if the columns are dependent.
    fn orthonormal_basis(&self) -> Result<Vec<Vec<f64>>> {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.cols);
        for j in 0..self.cols {
            let mut v = self.column(j);
            let original_norm = norm(&v);
            for _ in 0..2 {
                for u in &basis {
                    let proj = dot(u, &v);
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= proj * ui;
                    }
                }
            }
            let residual_norm = norm(&v);
            if residual_norm <= 1e-12 * original_norm.max(1e-300) {
                return Err(Error::RankDeficientQ);
            }
            for vi in v.iter_mut() {
                *vi /= residual_norm;
            }
            basis.push(v);
        }
        Ok(basis)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The natural default: a single column holding the weights `B·n_i/N`.
pub fn default_q(design: &MatchedDesign) -> DesignMatrixQ {
    let b = design.num_strata() as f64;
    let n_total = design.num_units() as f64;
    DesignMatrixQ::from_column(
        design
            .strata()
            .iter()
            .map(|s| b * s.len() as f64 / n_total)
            .collect(),
    )
}

/// Standard error for a weighted average with per-stratum terms
/// `per_stratum_values` (already carrying their `n_i/N`-style weights).
pub fn se_q(per_stratum_values: &[f64], q: &DesignMatrixQ) -> Result<f64> {
    let b = per_stratum_values.len();
    assert_eq!(b, q.rows());
    if b <= q.cols() {
        return Err(Error::TooFewStrata { b, p: q.cols() });
    }
    let basis = q.orthonormal_basis()?;

    // leverages h_ii from the orthonormal basis
    let mut y = Vec::with_capacity(b);
    for i in 0..b {
        let h_ii: f64 = basis.iter().map(|u| u[i] * u[i]).sum();
        if h_ii >= LEVERAGE_GUARD {
            return Err(Error::LeverageOne(i));
        }
        y.push(b as f64 * per_stratum_values[i] / (1.0 - h_ii).sqrt());
    }

    // residual of Y against col(Q)
    let mut residual = y.clone();
    for u in &basis {
        let proj = dot(u, &residual);
        for (ri, ui) in residual.iter_mut().zip(u) {
            *ri -= proj * ui;
        }
    }
    Ok(norm(&residual) / b as f64)
}
