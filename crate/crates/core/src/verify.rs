//! Property suites behind the `verify` subcommand: geometry identities and
//! finite-difference checks of every implemented gradient.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{gen_mc, gen_mtl, partition_columns, partition_tasks, McParams, MtlParams};
use crate::error::Result;
use crate::gossip::{pair_cost_and_grad, precondition, AgentPoint, AgentState};
use crate::manifold::{
    dist_sq, egrad_to_rgrad, exp_map, log_map, principal_angles, project_tangent, random_subspace, Subspace,
    TangentVector,
};
use crate::problems::LocalTask;

/// Outcome of one property suite.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error and the threshold it was held to.
    pub detail: String,
}

fn result(name: &'static str, worst: f64, tol: f64) -> PropertyResult {
    PropertyResult {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn failed(name: &'static str, err: crate::Error) -> PropertyResult {
    PropertyResult {
        name,
        passed: false,
        detail: format!("error: {err}"),
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random tangent vector at `u` with Frobenius norm `norm`.
pub fn random_tangent<R: Rng + ?Sized>(u: &Subspace, norm: f64, rng: &mut R) -> Result<TangentVector> {
    let xi = project_tangent(u, &gaussian(u.ambient_dim(), u.dim(), rng))?;
    Ok(xi.scaled(norm / xi.norm()))
}

/// Worst `‖Log_U(Exp_U(ξ)) − ξ‖` over random ξ with ‖ξ‖ ≤ 0.5.
pub fn log_exp_inverse(m: usize, r: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_subspace(m, r, rng)?;
        let xi = random_tangent(&u, 0.5 * rng.random::<f64>(), rng)?;
        let back = log_map(&u, &exp_map(&u, &xi, 1.0)?)?;
        worst = worst.max((back.direction() - xi.direction()).norm());
    }
    Ok(worst)
}

/// Worst `|2·dist_sq − Σθᵢ²|` with θ from an SVD of UᵀV.
pub fn distance_vs_angles(m: usize, r: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_subspace(m, r, rng)?;
        let v = random_subspace(m, r, rng)?;
        let angles: f64 = (u.basis().transpose() * v.basis())
            .singular_values()
            .iter()
            .map(|s| s.clamp(-1.0, 1.0).acos().powi(2))
            .sum();
        worst = worst.max((2.0 * dist_sq(&u, &v)? - angles).abs());
        worst = worst.max((principal_angles(&u, &v)?.sum_sq() - angles).abs());
    }
    Ok(worst)
}

/// Orthonormality residual after `steps` composed exponential steps.
pub fn exp_drift(m: usize, r: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut u = random_subspace(m, r, rng)?;
    for _ in 0..steps {
        let xi = random_tangent(&u, 0.3, rng)?;
        u = exp_map(&u, &xi, 1.0)?;
    }
    Ok(u.residual())
}

/// Relative error of a central finite difference against an analytic
/// directional derivative.
pub fn relative_gap(finite_difference: f64, analytic: f64) -> f64 {
    (finite_difference - analytic).abs() / analytic.abs().max(finite_difference.abs()).max(f64::MIN_POSITIVE)
}

fn local_cost<T: LocalTask>(task: &T, u: &Subspace) -> Result<f64> {
    let sol = task.inner_solve(u.basis(), true)?;
    task.cost(u.basis(), &sol, true)
}

/// Worst relative finite-difference error of a task's Riemannian gradient
/// along `trials` random unit tangents.
pub fn task_gradient_check<T: LocalTask>(task: &T, r: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_subspace(task.ambient_dim(), r, rng)?;
        let sol = task.inner_solve(u.basis(), true)?;
        let grad = egrad_to_rgrad(&u, &task.egrad(u.basis(), &sol, true)?)?;
        let xi = random_tangent(&u, 1.0, rng)?;
        let fd = (local_cost(task, &exp_map(&u, &xi, h)?)? - local_cost(task, &exp_map(&u, &xi, -h)?)?) / (2.0 * h);
        worst = worst.max(relative_gap(fd, grad.inner(&xi)?));
    }
    Ok(worst)
}

fn pair_agents(a: Subspace, b: Subspace) -> Vec<AgentState> {
    [a, b]
        .into_iter()
        .enumerate()
        .map(|(k, s)| AgentState {
            id: k + 1,
            shard: k,
            point: AgentPoint::Grassmann(s),
            update_count: 0,
        })
        .collect()
}

/// Worst relative finite-difference error of the pair cost g_1 of a
/// two-agent chain, moving both agents at once. The second agent starts
/// within `spread` of the first so the logarithm map stays defined.
pub fn pair_gradient_check<T: LocalTask>(
    tasks: &[T],
    r: usize,
    rho: f64,
    spread: f64,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let h = 1e-5;
    let m = tasks[0].ambient_dim();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let ua = random_subspace(m, r, rng)?;
        let ub = exp_map(&ua, &random_tangent(&ua, spread, rng)?, 1.0)?;
        let g = pair_cost_and_grad(&pair_agents(ua.clone(), ub.clone()), 1, rho, tasks)?;
        let xa = random_tangent(&ua, 1.0, rng)?;
        let xb = random_tangent(&ub, 1.0, rng)?;
        let analytic = g.left.inner(&xa)? + g.right.inner(&xb)?;
        let at = |t: f64| -> Result<f64> {
            let agents = pair_agents(exp_map(&ua, &xa, t)?, exp_map(&ub, &xb, t)?);
            Ok(pair_cost_and_grad(&agents, 1, rho, tasks)?.g_value)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst = worst.max(relative_gap(fd, analytic));
    }
    Ok(worst)
}

/// Worst horizontality residual of preconditioned gradients.
pub fn precondition_tangency(m: usize, r: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = random_subspace(m, r, rng)?;
        let xi = random_tangent(&u, 1.0, rng)?;
        let b = gaussian(2 * r, r, rng);
        let out = precondition(&xi, &(b.transpose() * b), rng.random_range(0.1..10.0))?;
        worst = worst.max(out.horizontality_residual());
    }
    Ok(worst)
}

/// Runs every suite with the given seed.
pub fn run_all(seed: u64) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, tol, value: Result<f64>| {
        out.push(match value {
            Ok(worst) => result(name, worst, tol),
            Err(e) => failed(name, e),
        })
    };

    push("log-exp inverse", 1e-8, log_exp_inverse(50, 5, 100, &mut rng));
    push(
        "distance vs principal angles",
        1e-8,
        distance_vs_angles(50, 5, 100, &mut rng),
    );
    push(
        "orthonormality after 1000 steps",
        1e-10,
        exp_drift(50, 5, 1000, &mut rng),
    );
    push(
        "preconditioner tangency",
        1e-12,
        precondition_tangency(30, 4, 20, &mut rng),
    );

    let mc = |lambda: f64, rng: &mut ChaCha8Rng| -> Result<Vec<crate::problems::McShard>> {
        let params = McParams {
            m: 30,
            n: 50,
            r: 3,
            os: 3.0,
            noise_sd: 0.1,
            test_size: 0,
        };
        let inst = gen_mc(&params, rng)?;
        Ok(partition_columns(&inst, 2, lambda)?
            .into_iter()
            .map(|p| p.shard)
            .collect())
    };
    for (name, lambda) in [("mc gradient, lambda=0", 0.0), ("mc gradient, lambda=0.1", 0.1)] {
        let value = mc(lambda, &mut rng).and_then(|shards| task_gradient_check(&shards[0], 3, 20, &mut rng));
        push(name, 1e-5, value);
    }

    let mtl = |rng: &mut ChaCha8Rng| -> Result<Vec<crate::problems::TaskGroup>> {
        let params = MtlParams {
            tasks: 10,
            m: 30,
            r: 4,
            d_min: 10,
            d_max: 50,
            noise_sd: 0.1,
        };
        let inst = gen_mtl(&params, rng)?;
        partition_tasks(&inst.tasks, 30, 2, 0.1)
    };
    push(
        "mtl gradient",
        1e-5,
        mtl(&mut rng).and_then(|groups| task_gradient_check(&groups[0], 4, 20, &mut rng)),
    );
    push(
        "pair gradient, mc",
        1e-5,
        mc(0.1, &mut rng).and_then(|shards| pair_gradient_check(&shards, 3, 10.0, 0.5, 20, &mut rng)),
    );
    push(
        "pair gradient, mtl",
        1e-5,
        mtl(&mut rng).and_then(|groups| pair_gradient_check(&groups, 4, 10.0, 0.5, 20, &mut rng)),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for r in run_all(2024) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn relative_gap_values() {
        assert_eq!(relative_gap(1.0, 1.0), 0.0);
        assert!((relative_gap(1.1, 1.0) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_gap(0.0, 0.0), 0.0);
    }
}
