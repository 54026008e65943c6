use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use super::{spd_solve, InnerSolution, LocalTask};
use crate::error::{Error, Result};
use crate::manifold::Subspace;

/// Largest regularization weight accepted by the experiment runner; beyond it
/// the per-column quadratic can lose positive definiteness.
pub const MAX_MC_LAMBDA: f64 = 0.5;

/// An observed matrix entry. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ColumnObservations {
    rows: Vec<usize>,
    values: Vec<f64>,
}

/// One agent's block of columns of the partially observed matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct McShard {
    m: usize,
    n_cols: usize,
    lambda: f64,
    entries: Vec<Entry>,
    columns: Vec<ColumnObservations>,
}

impl McShard {
    /// Builds a shard from its observed entries (local 0-based column
    /// indices). Entries are stored sorted by (column, row).
    pub fn new(m: usize, n_cols: usize, mut entries: Vec<Entry>, lambda: f64) -> Result<Self> {
        if m == 0 || n_cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "shard dimensions must be positive, got {m}x{n_cols}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        entries.sort_by_key(|e| (e.col, e.row));
        let mut columns = vec![ColumnObservations::default(); n_cols];
        for (k, e) in entries.iter().enumerate() {
            if e.row >= m || e.col >= n_cols {
                return Err(Error::InvalidArgument(format!(
                    "entry ({}, {}) outside a {m}x{n_cols} shard",
                    e.row, e.col
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "entry ({}, {}) has non-finite value",
                    e.row, e.col
                )));
            }
            if k > 0 && entries[k - 1].row == e.row && entries[k - 1].col == e.col {
                return Err(Error::InvalidArgument(format!(
                    "duplicate entry ({}, {})",
                    e.row, e.col
                )));
            }
            columns[e.col].rows.push(e.row);
            columns[e.col].values.push(e.value);
        }
        if lambda == 0.0 {
            if let Some(j) = columns.iter().position(|c| c.rows.is_empty()) {
                return Err(Error::InvalidArgument(format!(
                    "local column {j} has no observed entries; its coefficients are undetermined at lambda = 0"
                )));
            }
        }
        let shard = Self {
            m,
            n_cols,
            lambda,
            entries,
            columns,
        };
        debug_assert!(shard.index_is_consistent());
        Ok(shard)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn n_observed(&self) -> usize {
        self.entries.len()
    }

    /// Observed (rows, values) of one local column.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let c = &self.columns[j];
        (&c.rows, &c.values)
    }

    /// The per-column index regroups exactly the entry list.
    pub fn index_is_consistent(&self) -> bool {
        let from_index: HashSet<(usize, usize, u64)> = self
            .columns
            .iter()
            .enumerate()
            .flat_map(|(j, c)| c.rows.iter().zip(&c.values).map(move |(&i, &v)| (i, j, v.to_bits())))
            .collect();
        let from_entries: HashSet<(usize, usize, u64)> =
            self.entries.iter().map(|e| (e.row, e.col, e.value.to_bits())).collect();
        from_index.len() == self.entries.len() && from_index == from_entries
    }

    fn check_basis(&self, basis: &DMatrix<f64>) -> Result<()> {
        if basis.nrows() != self.m || basis.ncols() == 0 {
            return Err(Error::shape(
                format!("basis with {} rows", self.m),
                format!("{:?}", basis.shape()),
            ));
        }
        Ok(())
    }

    /// Per column j, minimizes `‖U_Ω w − y‖² + λ(wᵀGw − ‖U_Ω w‖²)` with
    /// `G = UᵀU` (the identity when the basis is orthonormal).
    fn solve(&self, basis: &DMatrix<f64>, orthonormal: bool) -> Result<InnerSolution> {
        self.check_basis(basis)?;
        let r = basis.ncols();
        let lambda = self.lambda;
        let gram = if orthonormal {
            DMatrix::identity(r, r)
        } else {
            basis.tr_mul(basis)
        };
        let basis_t = basis.transpose();
        let mut w = DMatrix::zeros(self.n_cols, r);
        for (j, col) in self.columns.iter().enumerate() {
            if col.rows.is_empty() {
                continue;
            }
            let mut normal = &gram * lambda;
            let mut rhs = DVector::zeros(r);
            for (&i, &y) in col.rows.iter().zip(&col.values) {
                let u_row = basis_t.column(i);
                normal.ger(1.0 - lambda, &u_row, &u_row, 1.0);
                rhs.axpy(y, &u_row, 1.0);
            }
            let coef = match spd_solve(normal.clone(), &rhs) {
                Some(c) => c,
                None if lambda == 0.0 => ridge_fallback(normal, &rhs).ok_or_else(|| Error::SingularSystem {
                    context: format!("inner solve of local column {j}"),
                })?,
                None => {
                    return Err(Error::SingularSystem {
                        context: format!("inner solve of local column {j} (lambda = {lambda})"),
                    })
                }
            };
            w.row_mut(j).tr_copy_from(&coef);
        }
        Ok(InnerSolution::from_coefficients(w))
    }

    fn cost_impl(&self, basis: &DMatrix<f64>, sol: &InnerSolution, orthonormal: bool) -> Result<f64> {
        self.check_basis(basis)?;
        let r = basis.ncols();
        sol.check_shape(self.n_cols, r)?;
        let basis_t = basis.transpose();
        let w_t = sol.coefficients.transpose();
        let mut fit = 0.0;
        let mut observed_sq = 0.0;
        for e in &self.entries {
            let pred = basis_t.column(e.row).dot(&w_t.column(e.col));
            fit += (pred - e.value).powi(2);
            observed_sq += pred * pred;
        }
        let total_sq = if orthonormal {
            sol.coefficients.norm_squared()
        } else {
            let gram = basis.tr_mul(basis);
            (&sol.coefficients * gram).component_mul(&sol.coefficients).sum()
        };
        Ok(0.5 * fit + 0.5 * self.lambda * (total_sq - observed_sq))
    }

    fn egrad_impl(&self, basis: &DMatrix<f64>, sol: &InnerSolution) -> Result<DMatrix<f64>> {
        self.check_basis(basis)?;
        let r = basis.ncols();
        sol.check_shape(self.n_cols, r)?;
        let basis_t = basis.transpose();
        let w_t = sol.coefficients.transpose();
        let lambda = self.lambda;
        let mut grad_t = DMatrix::<f64>::zeros(r, self.m);
        for e in &self.entries {
            let w = w_t.column(e.col);
            let pred = basis_t.column(e.row).dot(&w);
            let weight = (pred - e.value) - lambda * pred;
            grad_t.column_mut(e.row).axpy(weight, &w, 1.0);
        }
        let mut grad = grad_t.transpose();
        if lambda != 0.0 {
            grad += basis * &sol.metric * lambda;
        }
        Ok(grad)
    }
}

fn ridge_fallback(normal: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let r = normal.nrows();
    let eps = 1e-10 * (normal.trace() / r as f64).max(1.0);
    spd_solve(normal + DMatrix::identity(r, r) * eps, rhs)
}

impl LocalTask for McShard {
    fn ambient_dim(&self) -> usize {
        self.m
    }

    fn inner_solve(&self, basis: &DMatrix<f64>, orthonormal: bool) -> Result<InnerSolution> {
        self.solve(basis, orthonormal)
    }

    fn cost(&self, basis: &DMatrix<f64>, sol: &InnerSolution, orthonormal: bool) -> Result<f64> {
        self.cost_impl(basis, sol, orthonormal)
    }

    fn egrad(&self, basis: &DMatrix<f64>, sol: &InnerSolution, _orthonormal: bool) -> Result<DMatrix<f64>> {
        self.egrad_impl(basis, sol)
    }
}

/// Closed-form inner coefficients
/// `w_j = ((1−λ)·U_Ωᵀ U_Ω + λI)⁻¹ U_Ωᵀ y_j` for every local column.
pub fn mc_inner_solve(u: &Subspace, shard: &McShard) -> Result<InnerSolution> {
    shard.solve(u.basis(), true)
}

/// `0.5‖P_Ω(UWᵀ) − P_Ω(Y)‖² + 0.5λ‖UWᵀ − P_Ω(UWᵀ)‖²`, evaluated from the
/// observed entries and `‖W‖²` only.
pub fn mc_cost(u: &Subspace, shard: &McShard, sol: &InnerSolution) -> Result<f64> {
    shard.cost_impl(u.basis(), sol, true)
}

/// `(P_Ω(UWᵀ) − P_Ω(Y))·W + λ(UWᵀ − P_Ω(UWᵀ))·W`.
pub fn mc_egrad(u: &Subspace, shard: &McShard, sol: &InnerSolution) -> Result<DMatrix<f64>> {
    shard.egrad_impl(u.basis(), sol)
}

/// Entries of `U Wᵀ` at the given (row, local column) positions.
pub fn predict_mc(u: &Subspace, shard: &McShard, sol: &InnerSolution, queries: &[(usize, usize)]) -> Result<Vec<f64>> {
    predict_entries(u.basis(), shard, sol, queries.iter().copied())
}

pub(crate) fn predict_entries(
    basis: &DMatrix<f64>,
    shard: &McShard,
    sol: &InnerSolution,
    queries: impl Iterator<Item = (usize, usize)>,
) -> Result<Vec<f64>> {
    shard.check_basis(basis)?;
    sol.check_shape(shard.n_cols, basis.ncols())?;
    queries
        .map(|(i, j)| {
            if i >= shard.m || j >= shard.n_cols {
                return Err(Error::InvalidArgument(format!(
                    "query ({i}, {j}) outside a {}x{} shard",
                    shard.m, shard.n_cols
                )));
            }
            Ok(basis.row(i).dot(&sol.coefficients.row(j)))
        })
        .collect()
}
