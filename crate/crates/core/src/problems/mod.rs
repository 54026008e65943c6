//! Local tasks held by the agents.
//!
//! Each task maps a subspace basis U to an inner least-squares solution, a
//! cost, and the Euclidean gradient of that cost with the inner solution held
//! fixed (exact by the envelope property, since the inner solution is optimal).

mod mc;
mod mtl;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub(crate) use mc::predict_entries;
pub use mc::{mc_cost, mc_egrad, mc_inner_solve, predict_mc, Entry, McShard, MAX_MC_LAMBDA};
pub use mtl::{mtl_cost, mtl_egrad, mtl_inner_solve, Task, TaskGroup};

/// Optimal inner coefficients for a fixed basis.
///
/// `coefficients` has one row per local column (matrix completion) or per
/// task (multitask); `metric` is `coefficientsᵀ·coefficients`, the task part
/// of the preconditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub coefficients: DMatrix<f64>,
    pub metric: DMatrix<f64>,
}

impl InnerSolution {
    pub(crate) fn from_coefficients(coefficients: DMatrix<f64>) -> Self {
        let gram = coefficients.tr_mul(&coefficients);
        let metric = (&gram + gram.transpose()) * 0.5;
        Self { coefficients, metric }
    }

    pub fn rank(&self) -> usize {
        self.coefficients.ncols()
    }

    pub(crate) fn check_shape(&self, rows: usize, rank: usize) -> Result<()> {
        if self.coefficients.shape() != (rows, rank) {
            return Err(Error::shape(
                format!("inner solution ({rows}, {rank})"),
                format!("{:?}", self.coefficients.shape()),
            ));
        }
        Ok(())
    }
}

/// The interface the gossip engine drives.
///
/// `orthonormal` states whether `basis` satisfies UᵀU = I (Grassmann mode);
/// the Euclidean baseline passes arbitrary full-rank matrices.
pub trait LocalTask: Send + Sync {
    fn ambient_dim(&self) -> usize;

    fn inner_solve(&self, basis: &DMatrix<f64>, orthonormal: bool) -> Result<InnerSolution>;

    fn cost(&self, basis: &DMatrix<f64>, sol: &InnerSolution, orthonormal: bool) -> Result<f64>;

    fn egrad(&self, basis: &DMatrix<f64>, sol: &InnerSolution, orthonormal: bool) -> Result<DMatrix<f64>>;
}

/// A task with no data: cost and gradient are identically zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroTask {
    pub m: usize,
}

impl LocalTask for ZeroTask {
    fn ambient_dim(&self) -> usize {
        self.m
    }

    fn inner_solve(&self, basis: &DMatrix<f64>, _orthonormal: bool) -> Result<InnerSolution> {
        Ok(InnerSolution::from_coefficients(DMatrix::zeros(0, basis.ncols())))
    }

    fn cost(&self, _basis: &DMatrix<f64>, _sol: &InnerSolution, _orthonormal: bool) -> Result<f64> {
        Ok(0.0)
    }

    fn egrad(&self, basis: &DMatrix<f64>, _sol: &InnerSolution, _orthonormal: bool) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(basis.nrows(), basis.ncols()))
    }
}

/// Solves the r×r symmetric positive-definite system `a·x = b` by Cholesky.
pub(crate) fn spd_solve(a: DMatrix<f64>, b: &nalgebra::DVector<f64>) -> Option<nalgebra::DVector<f64>> {
    a.cholesky().map(|c| c.solve(b))
}
