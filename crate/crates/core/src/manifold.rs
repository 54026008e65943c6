//! Matrix-level geometry of the Grassmann manifold Gr(r, m).
//!
//! A point is stored as one orthonormal m×r representative of the column
//! space; two representatives of the same subspace compare equal only through
//! [`principal_angles`]. Tangent vectors are horizontal m×r matrices ξ with
//! Uᵀξ = 0.
//!
//! The squared distance follows the `0.5·‖Log‖²` convention used by the
//! consensus term of the gossip engine, so `2·dist_sq(U, V) = Σ θᵢ²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance on `‖UᵀU − I‖_F` accepted by [`Subspace::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Smallest admissible singular value of `UᵀV` in [`log_map`].
pub const LOG_SINGULAR_TOL: f64 = 1e-12;

/// Residual above which [`exp_map`] re-orthonormalizes its output.
pub const EXP_REORTH_TOL: f64 = 1e-12;

pub const FRECHET_TOL: f64 = 1e-8;
pub const FRECHET_MAX_ITER: usize = 100;

/// Relative diagonal threshold of the QR factor below which a basis is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Frobenius norm of `basisᵀ·basis − I`.
pub fn orthonormality_residual(basis: &DMatrix<f64>) -> f64 {
    let r = basis.ncols();
    (basis.tr_mul(basis) - DMatrix::<f64>::identity(r, r)).norm()
}

/// An r-dimensional subspace of R^m, held as an orthonormal m×r basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps an orthonormal basis, rejecting it if `‖UᵀU − I‖_F > 1e-10`.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        check_dims(basis.nrows(), basis.ncols())?;
        let residual = orthonormality_residual(&basis);
        if !(residual <= ORTHONORMAL_TOL) {
            return Err(Error::NotOrthonormal { residual });
        }
        Ok(Self { basis })
    }

    /// Orthonormalizes an arbitrary full-column-rank matrix with a thin QR
    /// factorization, fixing signs so the diagonal of R is positive.
    pub fn orthonormalize(matrix: &DMatrix<f64>) -> Result<Self> {
        let (m, r) = matrix.shape();
        check_dims(m, r)?;
        let qr = matrix.clone().qr();
        let rfac = qr.r();
        let mut q = qr.q();
        let scale = (0..r).map(|j| rfac[(j, j)].abs()).fold(0.0, f64::max);
        for j in 0..r {
            let d = rfac[(j, j)];
            if !(d.abs() > RANK_TOL * scale) {
                return Err(Error::RankDeficient {
                    context: format!("column {j} of a {m}x{r} basis"),
                });
            }
            if d < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        Ok(Self { basis: q })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn into_basis(self) -> DMatrix<f64> {
        self.basis
    }

    /// Ambient dimension m.
    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Subspace dimension r.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn residual(&self) -> f64 {
        orthonormality_residual(&self.basis)
    }

    /// True when every principal angle to `other` is at most `tol`.
    pub fn same_subspace(&self, other: &Subspace, tol: f64) -> Result<bool> {
        Ok(principal_angles(self, other)?.max() <= tol)
    }

    fn check_same_shape(&self, other: &Subspace) -> Result<()> {
        if self.basis.shape() != other.basis.shape() {
            return Err(Error::shape(
                format!("{:?}", self.basis.shape()),
                format!("{:?}", other.basis.shape()),
            ));
        }
        Ok(())
    }
}

fn check_dims(m: usize, r: usize) -> Result<()> {
    if r == 0 || r > m {
        return Err(Error::InvalidArgument(format!(
            "subspace dimension must satisfy 1 <= r <= m, got m={m}, r={r}"
        )));
    }
    Ok(())
}

/// A horizontal tangent vector anchored at a subspace.
#[derive(Debug, Clone)]
pub struct TangentVector {
    direction: DMatrix<f64>,
    anchor: Subspace,
}

impl TangentVector {
    /// Builds a tangent vector from a direction that is already horizontal
    /// (`‖Uᵀξ‖_F ≤ 1e-10·max(1, ‖ξ‖_F)`).
    pub fn new(anchor: &Subspace, direction: DMatrix<f64>) -> Result<Self> {
        check_matrix_shape(anchor, &direction)?;
        let vertical = anchor.basis.tr_mul(&direction).norm();
        if vertical > ORTHONORMAL_TOL * direction.norm().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "direction is not horizontal (‖Uᵀξ‖ = {vertical:.3e})"
            )));
        }
        Ok(Self {
            direction,
            anchor: anchor.clone(),
        })
    }

    pub fn zero(anchor: &Subspace) -> Self {
        Self {
            direction: DMatrix::zeros(anchor.ambient_dim(), anchor.dim()),
            anchor: anchor.clone(),
        }
    }

    pub fn direction(&self) -> &DMatrix<f64> {
        &self.direction
    }

    pub fn into_direction(self) -> DMatrix<f64> {
        self.direction
    }

    pub fn anchor(&self) -> &Subspace {
        &self.anchor
    }

    /// Frobenius norm of the direction.
    pub fn norm(&self) -> f64 {
        self.direction.norm()
    }

    /// `‖anchorᵀ·direction‖_F`.
    pub fn horizontality_residual(&self) -> f64 {
        self.anchor.basis.tr_mul(&self.direction).norm()
    }

    /// Euclidean (Frobenius) inner product, the metric of Gr(r, m).
    pub fn inner(&self, other: &TangentVector) -> Result<f64> {
        self.check_anchor(other)?;
        Ok(self.direction.dot(&other.direction))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            direction: &self.direction * factor,
            anchor: self.anchor.clone(),
        }
    }

    pub fn plus(&self, other: &TangentVector) -> Result<Self> {
        self.check_anchor(other)?;
        Ok(Self {
            direction: &self.direction + &other.direction,
            anchor: self.anchor.clone(),
        })
    }

    /// Right multiplication by an r×r matrix; Uᵀ(ξM) = (Uᵀξ)M keeps the
    /// result horizontal.
    pub fn right_multiply(&self, factor: &DMatrix<f64>) -> Result<Self> {
        let r = self.anchor.dim();
        if factor.shape() != (r, r) {
            return Err(Error::shape(format!("({r}, {r})"), format!("{:?}", factor.shape())));
        }
        Ok(Self {
            direction: &self.direction * factor,
            anchor: self.anchor.clone(),
        })
    }

    fn check_anchor(&self, other: &TangentVector) -> Result<()> {
        if self.anchor.basis != other.anchor.basis {
            return Err(Error::AnchorMismatch);
        }
        Ok(())
    }
}

fn check_matrix_shape(u: &Subspace, z: &DMatrix<f64>) -> Result<()> {
    if z.shape() != u.basis.shape() {
        return Err(Error::shape(
            format!("{:?}", u.basis.shape()),
            format!("{:?}", z.shape()),
        ));
    }
    Ok(())
}

/// Thin SVD `X = P diag(s) Qᵀ` of a tall m×r matrix with orthonormal P
/// (m×r) and Qᵀ (r×r).
///
/// nalgebra's bidiagonal iteration occasionally returns singular vectors
/// that do not reconstruct X when X has repeated zero singular values
/// (common for tangent vectors of rank below r); such results are replaced
/// by a one-sided Jacobi SVD.
pub(crate) fn thin_svd(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    debug_assert!(x.nrows() >= x.ncols());
    let svd = x.clone().svd(true, true);
    if let (Some(p), Some(q_t)) = (svd.u, svd.v_t) {
        let r = x.ncols();
        let scale = x.norm().max(f64::MIN_POSITIVE);
        let recon = (&p * DMatrix::from_diagonal(&svd.singular_values) * &q_t - x).norm();
        if recon <= SVD_CHECK_TOL * scale
            && orthonormality_residual(&p) <= SVD_CHECK_TOL
            && (q_t.tr_mul(&q_t) - DMatrix::<f64>::identity(r, r)).norm() <= SVD_CHECK_TOL
        {
            return (p, svd.singular_values, q_t);
        }
    }
    jacobi_svd(x)
}

/// Acceptance threshold of [`thin_svd`] on relative reconstruction error and
/// orthonormality of the factors.
const SVD_CHECK_TOL: f64 = 1e-11;

/// One-sided (Hestenes) Jacobi SVD of a tall matrix, singular values
/// descending. Left vectors of numerically zero singular values are an
/// orthonormal completion.
fn jacobi_svd(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, r) = x.shape();
    let mut a = x.clone();
    let mut v = DMatrix::<f64>::identity(r, r);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..r {
            for q in p + 1..r {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for k in 0..mat.nrows() {
                        let (xp, xq) = (mat[(k, p)], mat[(k, q)]);
                        mat[(k, p)] = c * xp - s * xq;
                        mat[(k, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..r).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let cutoff = norms.iter().fold(0.0_f64, |acc, &n| acc.max(n)) * f64::EPSILON * m as f64;

    let mut p = DMatrix::<f64>::zeros(m, r);
    let mut q_t = DMatrix::<f64>::zeros(r, r);
    let mut s = DVector::<f64>::zeros(r);
    let mut filled = 0;
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        q_t.row_mut(k).copy_from(&v.column(j).transpose());
        if norms[j] > cutoff {
            p.set_column(k, &(a.column(j) / norms[j]));
            filled += 1;
        }
    }
    // complete P with the standard basis vector farthest from its span
    for k in filled..r {
        let known = p.columns(0, k).into_owned();
        let residual = DMatrix::<f64>::identity(m, m) - &known * known.transpose();
        let best = (0..m)
            .max_by(|&i, &j| residual.column(i).norm().total_cmp(&residual.column(j).norm()))
            .unwrap_or(0);
        let mut col = residual.column(best).into_owned();
        col -= &known * known.tr_mul(&col);
        p.set_column(k, &(&col / col.norm()));
    }
    (p, s, q_t)
}

/// Orthogonal projection onto the horizontal space at `u`: `Z − U(UᵀZ)`.
pub fn project_tangent(u: &Subspace, z: &DMatrix<f64>) -> Result<TangentVector> {
    check_matrix_shape(u, z)?;
    let direction = z - &u.basis * u.basis.tr_mul(z);
    Ok(TangentVector {
        direction,
        anchor: u.clone(),
    })
}

/// Converts a Euclidean gradient into the Riemannian gradient at `u`.
pub fn egrad_to_rgrad(u: &Subspace, egrad: &DMatrix<f64>) -> Result<TangentVector> {
    project_tangent(u, egrad)
}

/// Exponential map `Exp_U(scale·ξ) = U V cos(Σ) Vᵀ + W sin(Σ) Vᵀ` where
/// `W Σ Vᵀ` is the thin SVD of `scale·ξ`.
pub fn exp_map(u: &Subspace, xi: &TangentVector, scale: f64) -> Result<Subspace> {
    if xi.anchor.basis != u.basis {
        return Err(Error::AnchorMismatch);
    }
    let (w, sigma, v_t) = thin_svd(&(&xi.direction * scale));
    let cos = DMatrix::from_diagonal(&sigma.map(f64::cos));
    let sin = DMatrix::from_diagonal(&sigma.map(f64::sin));
    let basis = &u.basis * v_t.transpose() * cos * &v_t + w * sin * &v_t;
    if orthonormality_residual(&basis) > EXP_REORTH_TOL {
        Subspace::orthonormalize(&basis)
    } else {
        Ok(Subspace { basis })
    }
}

/// Logarithm map: the horizontal vector at `u` whose geodesic reaches `v`,
/// `P arctan(S) Qᵀ` with `P S Qᵀ` the thin SVD of `(V − U UᵀV)(UᵀV)⁻¹`.
pub fn log_map(u: &Subspace, v: &Subspace) -> Result<TangentVector> {
    u.check_same_shape(v)?;
    let utv = u.basis.tr_mul(&v.basis);
    let min_singular = utv.singular_values().min();
    if !(min_singular >= LOG_SINGULAR_TOL) {
        return Err(Error::SubspacesTooFar { min_singular });
    }
    let residual = &v.basis - &u.basis * &utv;
    // X·(UᵀV) = residual  ⇔  (UᵀV)ᵀ·Xᵀ = residualᵀ
    let xt = utv
        .transpose()
        .lu()
        .solve(&residual.transpose())
        .ok_or(Error::SubspacesTooFar { min_singular })?;
    let (p, s, q_t) = thin_svd(&xt.transpose());
    let atan = DMatrix::from_diagonal(&s.map(f64::atan));
    let direction = p * atan * q_t;
    project_tangent(u, &direction)
}

/// Squared distance `0.5·‖Log_U(V)‖_F²`.
pub fn dist_sq(u: &Subspace, v: &Subspace) -> Result<f64> {
    let log = log_map(u, v)?;
    Ok(0.5 * log.direction.norm_squared())
}

/// Principal angles between two subspaces, ascending, in `[0, π/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAngles {
    angles: Vec<f64>,
}

impl PrincipalAngles {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn sum_sq(&self) -> f64 {
        self.angles.iter().map(|a| a * a).sum()
    }

    /// Euclidean norm of the angle vector (the geodesic distance).
    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max(&self) -> f64 {
        self.angles.last().copied().unwrap_or(0.0)
    }
}

/// Principal angles from the singular values of `UᵀV` (cosines) and of
/// `V − U UᵀV` (sines). Small angles are read from the sines and large ones
/// from the cosines so neither branch loses precision.
pub fn principal_angles(u: &Subspace, v: &Subspace) -> Result<PrincipalAngles> {
    u.check_same_shape(v)?;
    let utv = u.basis.tr_mul(&v.basis);
    let mut cosines: Vec<f64> = utv.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    let residual = &v.basis - &u.basis * &utv;
    let mut sines: Vec<f64> = residual.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sines.sort_by(f64::total_cmp);
    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            if c >= std::f64::consts::FRAC_1_SQRT_2 {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(PrincipalAngles { angles })
}

/// Orthonormalized m×r standard Gaussian matrix.
pub fn random_subspace<R: Rng + ?Sized>(m: usize, r: usize, rng: &mut R) -> Result<Subspace> {
    check_dims(m, r)?;
    let gaussian = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    Subspace::orthonormalize(&gaussian)
}

/// Result of the Karcher-mean iteration.
#[derive(Debug, Clone)]
pub struct FrechetMean {
    pub subspace: Subspace,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the last mean tangent vector.
    pub residual: f64,
}

/// Karcher mean: repeat `U ← Exp_U(mean_i Log_U(U_i))` from the first
/// element until the mean tangent norm drops below `tol`.
pub fn frechet_mean(subspaces: &[Subspace], tol: f64, max_iter: usize) -> Result<FrechetMean> {
    let first = subspaces.first().ok_or(Error::Empty("Fréchet mean of no subspaces"))?;
    for s in &subspaces[1..] {
        first.check_same_shape(s)?;
    }
    let weight = 1.0 / subspaces.len() as f64;
    let mut current = first.clone();
    let mut residual = f64::INFINITY;
    for iteration in 0..=max_iter {
        let mut mean = DMatrix::zeros(current.ambient_dim(), current.dim());
        for s in subspaces {
            mean += log_map(&current, s)?.direction;
        }
        mean *= weight;
        residual = mean.norm();
        if residual < tol {
            return Ok(FrechetMean {
                subspace: current,
                iterations: iteration,
                converged: true,
                residual,
            });
        }
        if iteration == max_iter {
            break;
        }
        let step = TangentVector {
            direction: mean,
            anchor: current.clone(),
        };
        current = exp_map(&current, &step, 1.0)?;
    }
    Ok(FrechetMean {
        subspace: current,
        iterations: max_iter,
        converged: false,
        residual,
    })
}

/// Thin QR re-orthonormalization of a representative that has drifted.
pub fn reorthonormalize(u: &Subspace) -> Result<Subspace> {
    Subspace::orthonormalize(&u.basis)
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub(crate) fn min_eigenvalue_symmetric(matrix: &DMatrix<f64>) -> f64 {
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig: DVector<f64> = sym.symmetric_eigenvalues();
    eig.min()
}
