use nalgebra::{DMatrix, DVector};

use super::{spd_solve, InnerSolution, LocalTask};
use crate::error::{Error, Result};
use crate::manifold::Subspace;

/// One regression task: `d_t` samples of `m` features and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Task {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::shape(
                format!("{} labels", x.nrows()),
                format!("{} labels", y.len()),
            ));
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("task without samples"));
        }
        Ok(Self { x, y })
    }

    pub fn samples(&self) -> usize {
        self.x.nrows()
    }
}

/// The tasks assigned to one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGroup {
    m: usize,
    lambda: f64,
    tasks: Vec<Task>,
}

impl TaskGroup {
    pub fn new(m: usize, tasks: Vec<Task>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        if tasks.is_empty() {
            return Err(Error::Empty("task group without tasks"));
        }
        for (t, task) in tasks.iter().enumerate() {
            if task.x.ncols() != m {
                return Err(Error::shape(
                    format!("task {t} with {m} features"),
                    format!("{} features", task.x.ncols()),
                ));
            }
            if task.x.nrows() == 0 || task.x.nrows() != task.y.len() {
                return Err(Error::InvalidArgument(format!(
                    "task {t} has {} samples and {} labels",
                    task.x.nrows(),
                    task.y.len()
                )));
            }
        }
        Ok(Self { m, lambda, tasks })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
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

    fn solve(&self, basis: &DMatrix<f64>) -> Result<InnerSolution> {
        self.check_basis(basis)?;
        let r = basis.ncols();
        let mut weights = DMatrix::zeros(self.tasks.len(), r);
        for (t, task) in self.tasks.iter().enumerate() {
            let features = &task.x * basis;
            let normal = features.tr_mul(&features) + DMatrix::identity(r, r) * self.lambda;
            let rhs = features.tr_mul(&task.y);
            let w = spd_solve(normal, &rhs).ok_or_else(|| Error::SingularSystem {
                context: format!("ridge solve of task {t} (lambda = {})", self.lambda),
            })?;
            weights.row_mut(t).tr_copy_from(&w);
        }
        Ok(InnerSolution::from_coefficients(weights))
    }

    fn cost_impl(&self, basis: &DMatrix<f64>, sol: &InnerSolution) -> Result<f64> {
        self.check_basis(basis)?;
        sol.check_shape(self.tasks.len(), basis.ncols())?;
        let mut cost = 0.0;
        for (t, task) in self.tasks.iter().enumerate() {
            let w = sol.coefficients.row(t).transpose();
            let residual = &task.x * (basis * &w) - &task.y;
            cost += 0.5 * residual.norm_squared() + 0.5 * self.lambda * w.norm_squared();
        }
        Ok(cost)
    }

    fn egrad_impl(&self, basis: &DMatrix<f64>, sol: &InnerSolution) -> Result<DMatrix<f64>> {
        self.check_basis(basis)?;
        sol.check_shape(self.tasks.len(), basis.ncols())?;
        let mut grad = DMatrix::zeros(self.m, basis.ncols());
        for (t, task) in self.tasks.iter().enumerate() {
            let w = sol.coefficients.row(t).transpose();
            let residual = &task.x * (basis * &w) - &task.y;
            let back = task.x.tr_mul(&residual);
            grad.ger(1.0, &back, &w, 1.0);
        }
        Ok(grad)
    }
}

impl LocalTask for TaskGroup {
    fn ambient_dim(&self) -> usize {
        self.m
    }

    fn inner_solve(&self, basis: &DMatrix<f64>, _orthonormal: bool) -> Result<InnerSolution> {
        self.solve(basis)
    }

    fn cost(&self, basis: &DMatrix<f64>, sol: &InnerSolution, _orthonormal: bool) -> Result<f64> {
        self.cost_impl(basis, sol)
    }

    fn egrad(&self, basis: &DMatrix<f64>, sol: &InnerSolution, _orthonormal: bool) -> Result<DMatrix<f64>> {
        self.egrad_impl(basis, sol)
    }
}

/// Ridge solutions `w_t = (UᵀX_tᵀX_tU + λI)⁻¹ UᵀX_tᵀ y_t`.
pub fn mtl_inner_solve(u: &Subspace, group: &TaskGroup) -> Result<InnerSolution> {
    group.solve(u.basis())
}

/// `Σ_t 0.5‖X_t U w_t − y_t‖² + 0.5λ‖w_t‖²`; the ridge term keeps the cost
/// consistent with its envelope gradient when λ > 0.
pub fn mtl_cost(u: &Subspace, group: &TaskGroup, sol: &InnerSolution) -> Result<f64> {
    group.cost_impl(u.basis(), sol)
}

/// `Σ_t X_tᵀ(X_t U w_t − y_t) w_tᵀ`.
pub fn mtl_egrad(u: &Subspace, group: &TaskGroup, sol: &InnerSolution) -> Result<DMatrix<f64>> {
    group.egrad_impl(u.basis(), sol)
}
