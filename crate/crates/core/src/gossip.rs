//! The decentralized gossip engine.
//!
//! N agents sit on a chain; agents i and i+1 are neighbours and share the
//! pair cost
//!
//! ```text
//! g_i = α_i f_i(U_i) + α_{i+1} f_{i+1}(U_{i+1}) + 0.5ρ‖Log_{U_i}(U_{i+1})‖²
//! ```
//!
//! with α = 1 at the chain ends and 0.5 inside, so that Σ g_i counts every
//! local cost once. Each slot samples one pair (stochastic mode) or one of
//! the odd/even pair groups (parallel mode) and moves the selected agents
//! along the negative Riemannian gradient of g with the exponential map.
//! A Euclidean baseline replaces the manifold with R^{m×r} and the consensus
//! term with `0.5ρ‖U_i − U_{i+1}‖_F²`.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    egrad_to_rgrad, exp_map, frechet_mean, log_map, min_eigenvalue_symmetric, random_subspace, reorthonormalize,
    FrechetMean, Subspace, TangentVector, FRECHET_MAX_ITER, FRECHET_TOL,
};
use crate::metrics::consensus_profile;
use crate::problems::{InnerSolution, LocalTask};

const INIT_STREAM: u64 = 0;
const SELECTION_STREAM: u64 = 1;
const RETRY_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One uniformly sampled pair per slot.
    Stochastic,
    /// One of the odd/even pair groups per slot, updated together.
    Parallel,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stochastic => "stochastic",
            Mode::Parallel => "parallel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Grassmann,
    Euclidean,
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Geometry::Grassmann => "grassmann",
            Geometry::Euclidean => "euclidean",
        })
    }
}

/// Run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GossipConfig {
    /// Number of agents N on the chain.
    pub agents: usize,
    /// Dimension r of the learned subspace.
    pub rank: usize,
    /// Consensus weight ρ.
    pub rho: f64,
    /// Stepsize schedule γ_k = a / (1 + b·k).
    pub stepsize_a: f64,
    pub stepsize_b: f64,
    pub max_slots: usize,
    pub mode: Mode,
    pub geometry: Geometry,
    pub precon: bool,
    pub seed: u64,
    /// Re-orthonormalize an agent's basis every this many of its updates
    /// (0 disables the periodic pass).
    pub reorth_every: usize,
    /// Evaluate every agent's local cost every this many slots (0 = never).
    pub cost_cadence: usize,
    /// Worker threads for parallel rounds.
    pub workers: usize,
}

impl GossipConfig {
    pub fn new(agents: usize, rank: usize) -> Self {
        Self {
            agents,
            rank,
            rho: 1e3,
            stepsize_a: 0.1,
            stepsize_b: 0.01,
            max_slots: default_budget(Mode::Stochastic, agents),
            mode: Mode::Stochastic,
            geometry: Geometry::Grassmann,
            precon: false,
            seed: 0,
            reorth_every: 100,
            cost_cadence: 10,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.agents < 2 {
            return bad(format!("need at least 2 agents, got {}", self.agents));
        }
        if self.mode == Mode::Parallel && self.agents < 3 {
            return bad("parallel mode needs at least 3 agents".into());
        }
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be finite and >= 0, got {}", self.rho));
        }
        if !(self.stepsize_a > 0.0 && self.stepsize_a.is_finite()) {
            return bad(format!("stepsize a must be > 0, got {}", self.stepsize_a));
        }
        if !(self.stepsize_b > 0.0 && self.stepsize_b.is_finite()) {
            return bad(format!("stepsize b must be > 0, got {}", self.stepsize_b));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        Ok(())
    }
}

/// Slot budget: 200(N−1) stochastic slots, 400N parallel rounds.
pub fn default_budget(mode: Mode, agents: usize) -> usize {
    match mode {
        Mode::Stochastic => 200 * agents.saturating_sub(1),
        Mode::Parallel => 400 * agents,
    }
}

/// Position of an agent: an orthonormal basis in Grassmann mode, an
/// unconstrained matrix in the Euclidean baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentPoint {
    Grassmann(Subspace),
    Euclidean(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// 1-based position on the chain.
    pub id: usize,
    /// Index of the agent's task in the task slice.
    pub shard: usize,
    pub point: AgentPoint,
    pub update_count: usize,
}

impl AgentState {
    pub fn basis(&self) -> &DMatrix<f64> {
        match &self.point {
            AgentPoint::Grassmann(s) => s.basis(),
            AgentPoint::Euclidean(m) => m,
        }
    }

    pub fn subspace(&self) -> Option<&Subspace> {
        match &self.point {
            AgentPoint::Grassmann(s) => Some(s),
            AgentPoint::Euclidean(_) => None,
        }
    }

    /// The column space as a subspace (orthonormalizing a Euclidean iterate).
    pub fn column_space(&self) -> Result<Subspace> {
        match &self.point {
            AgentPoint::Grassmann(s) => Ok(s.clone()),
            AgentPoint::Euclidean(m) => Subspace::orthonormalize(m),
        }
    }

    /// Whether the point is an orthonormal basis (Grassmann mode).
    pub fn is_orthonormal(&self) -> bool {
        matches!(self.point, AgentPoint::Grassmann(_))
    }
}

/// Random orthonormal initial bases, one per task, drawn from the seed's
/// initialization stream. Both geometries start from the same matrices.
pub fn init_agents(config: &GossipConfig, m: usize) -> Result<Vec<AgentState>> {
    let mut rng = stream(config.seed, INIT_STREAM);
    (0..config.agents)
        .map(|k| {
            let s = random_subspace(m, config.rank, &mut rng)?;
            let point = match config.geometry {
                Geometry::Grassmann => AgentPoint::Grassmann(s),
                Geometry::Euclidean => AgentPoint::Euclidean(s.into_basis()),
            };
            Ok(AgentState {
                id: k + 1,
                shard: k,
                point,
                update_count: 0,
            })
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Weight of agent i's local cost inside the pair costs it belongs to.
pub fn alpha(i: usize, n: usize) -> Result<f64> {
    if i == 0 || i > n {
        return Err(Error::InvalidArgument(format!("agent {i} outside chain 1..={n}")));
    }
    Ok(if i == 1 || i == n { 1.0 } else { 0.5 })
}

/// γ_k = a / (1 + b·k).
pub fn stepsize(k: usize, a: f64, b: f64) -> f64 {
    a / (1.0 + b * k as f64)
}

/// Riemannian gradients of g_i at both ends of pair i.
#[derive(Debug, Clone)]
pub struct PairGradient {
    pub pair: usize,
    pub left: TangentVector,
    pub right: TangentVector,
    pub g_value: f64,
    /// Task metric terms (WᵀW) of the two agents, for preconditioning.
    pub left_metric: DMatrix<f64>,
    pub right_metric: DMatrix<f64>,
}

/// Euclidean gradients of the flat pair cost.
#[derive(Debug, Clone)]
pub struct EuclideanPairGradient {
    pub pair: usize,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
    pub g_value: f64,
    pub left_metric: DMatrix<f64>,
    pub right_metric: DMatrix<f64>,
}

struct TaskTerms {
    cost: f64,
    egrad: DMatrix<f64>,
    solution: InnerSolution,
}

fn task_terms<T: LocalTask>(task: &T, basis: &DMatrix<f64>, orthonormal: bool) -> Result<TaskTerms> {
    let solution = task.inner_solve(basis, orthonormal)?;
    let cost = task.cost(basis, &solution, orthonormal)?;
    let egrad = task.egrad(basis, &solution, orthonormal)?;
    Ok(TaskTerms { cost, egrad, solution })
}

fn check_pair(agents: &[AgentState], i: usize) -> Result<()> {
    if i == 0 || i >= agents.len() {
        return Err(Error::InvalidArgument(format!(
            "pair {i} outside 1..={}",
            agents.len().saturating_sub(1)
        )));
    }
    Ok(())
}

/// Cost and Riemannian gradients of the pair cost g_i (Grassmann mode).
///
/// `left = α_i·grad f_i − ρ·Log_{U_i}(U_{i+1})`,
/// `right = α_{i+1}·grad f_{i+1} − ρ·Log_{U_{i+1}}(U_i)`.
pub fn pair_cost_and_grad<T: LocalTask>(
    agents: &[AgentState],
    i: usize,
    rho: f64,
    tasks: &[T],
) -> Result<PairGradient> {
    check_pair(agents, i)?;
    let n = agents.len();
    let (a, b) = (&agents[i - 1], &agents[i]);
    let (ua, ub) = match (a.subspace(), b.subspace()) {
        (Some(ua), Some(ub)) => (ua, ub),
        _ => {
            return Err(Error::InvalidArgument(
                "pair_cost_and_grad needs Grassmann agents".into(),
            ))
        }
    };
    let log_ab = log_map(ua, ub)?;
    let log_ba = log_map(ub, ua)?;
    let ta = task_terms(&tasks[a.shard], ua.basis(), true)?;
    let tb = task_terms(&tasks[b.shard], ub.basis(), true)?;
    let (alpha_a, alpha_b) = (alpha(i, n)?, alpha(i + 1, n)?);
    let left = egrad_to_rgrad(ua, &ta.egrad)?
        .scaled(alpha_a)
        .plus(&log_ab.scaled(-rho))?;
    let right = egrad_to_rgrad(ub, &tb.egrad)?
        .scaled(alpha_b)
        .plus(&log_ba.scaled(-rho))?;
    let g_value = alpha_a * ta.cost + alpha_b * tb.cost + 0.5 * rho * log_ab.norm().powi(2);
    Ok(PairGradient {
        pair: i,
        left,
        right,
        g_value,
        left_metric: ta.solution.metric,
        right_metric: tb.solution.metric,
    })
}

/// Cost and Euclidean gradients of the flat pair cost
/// `α_i f_i + α_{i+1} f_{i+1} + 0.5ρ‖U_i − U_{i+1}‖²`.
pub fn euclidean_pair_cost_and_grad<T: LocalTask>(
    agents: &[AgentState],
    i: usize,
    rho: f64,
    tasks: &[T],
) -> Result<EuclideanPairGradient> {
    check_pair(agents, i)?;
    let n = agents.len();
    let (a, b) = (&agents[i - 1], &agents[i]);
    let (ua, ub) = (a.basis(), b.basis());
    let ta = task_terms(&tasks[a.shard], ua, a.is_orthonormal())?;
    let tb = task_terms(&tasks[b.shard], ub, b.is_orthonormal())?;
    let (alpha_a, alpha_b) = (alpha(i, n)?, alpha(i + 1, n)?);
    let diff = ua - ub;
    let left = ta.egrad * alpha_a + &diff * rho;
    let right = tb.egrad * alpha_b - &diff * rho;
    let g_value = alpha_a * ta.cost + alpha_b * tb.cost + 0.5 * rho * diff.norm_squared();
    Ok(EuclideanPairGradient {
        pair: i,
        left,
        right,
        g_value,
        left_metric: ta.solution.metric,
        right_metric: tb.solution.metric,
    })
}

fn preconditioner_factor(metric: &DMatrix<f64>, rho: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let r = metric.nrows();
    if metric.ncols() != r {
        return Err(Error::shape("square metric", format!("{:?}", metric.shape())));
    }
    let min_eigenvalue = min_eigenvalue_symmetric(metric);
    let scale = metric.norm().max(1.0);
    if min_eigenvalue < -1e-10 * scale || (metric - metric.transpose()).norm() > 1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue });
    }
    (metric + DMatrix::identity(r, r) * rho)
        .cholesky()
        .ok_or(Error::NotPositiveSemidefinite { min_eigenvalue })
}

/// `ξ ↦ ξ·(M + ρI)⁻¹` with M the task metric term.
pub fn precondition(grad: &TangentVector, metric: &DMatrix<f64>, rho: f64) -> Result<TangentVector> {
    let scaled = precondition_matrix(grad.direction(), metric, rho)?;
    let inverse_applied = TangentVector::new(grad.anchor(), scaled);
    // right multiplication by an r×r matrix keeps the direction horizontal
    debug_assert!(inverse_applied.is_ok());
    inverse_applied
}

/// Matrix form of [`precondition`] used by the Euclidean baseline.
pub fn precondition_matrix(direction: &DMatrix<f64>, metric: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    if metric.nrows() != direction.ncols() {
        return Err(Error::shape(
            format!("({0}, {0}) metric", direction.ncols()),
            format!("{:?}", metric.shape()),
        ));
    }
    let chol = preconditioner_factor(metric, rho)?;
    // ξ M⁻¹ = (M⁻¹ ξᵀ)ᵀ for symmetric M
    Ok(chol.solve(&direction.transpose()).transpose())
}

/// Which pair(s) a slot updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Pair(usize),
    Odd,
    Even,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Pair(i) => write!(f, "{i}"),
            Selection::Odd => f.write_str("odd"),
            Selection::Even => f.write_str("even"),
        }
    }
}

/// Per-slot telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub slot: usize,
    pub gamma: f64,
    pub mode: Mode,
    pub selection: Selection,
    /// Sum of the sampled pair costs, evaluated before the update.
    pub g_value: f64,
    /// dist_sq between neighbours after the update (+∞ when undefined).
    pub distances: Vec<f64>,
    /// Local cost of every agent after the update, on cadence slots.
    pub costs: Option<Vec<f64>>,
}

/// Destination of trace records.
pub trait TraceSink {
    fn record(&mut self, record: &TraceRecord) -> Result<()>;
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, record: &TraceRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards every record.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _record: &TraceRecord) -> Result<()> {
        Ok(())
    }
}

/// Random streams and worker pool shared by consecutive slots.
pub struct SlotContext {
    selection: ChaCha8Rng,
    retry: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

impl SlotContext {
    pub fn new(config: &GossipConfig) -> Result<Self> {
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            selection: stream(config.seed, SELECTION_STREAM),
            retry: stream(config.seed, RETRY_STREAM),
            pool,
        })
    }
}

/// New positions of the two agents of one pair, not yet committed.
#[derive(Debug, Clone)]
struct PairUpdate {
    pair: usize,
    left: AgentPoint,
    right: AgentPoint,
    g_value: f64,
}

fn grassmann_step(
    grad: &TangentVector,
    metric: &DMatrix<f64>,
    config: &GossipConfig,
    gamma: f64,
) -> Result<AgentPoint> {
    let direction = if config.precon {
        precondition(grad, metric, config.rho)?
    } else {
        grad.clone()
    };
    Ok(AgentPoint::Grassmann(exp_map(grad.anchor(), &direction, -gamma)?))
}

fn euclidean_step(
    basis: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    metric: &DMatrix<f64>,
    config: &GossipConfig,
    gamma: f64,
) -> Result<AgentPoint> {
    let direction = if config.precon {
        precondition_matrix(grad, metric, config.rho)?
    } else {
        grad.clone()
    };
    Ok(AgentPoint::Euclidean(basis - direction * gamma))
}

fn compute_pair_update<T: LocalTask>(
    agents: &[AgentState],
    i: usize,
    config: &GossipConfig,
    gamma: f64,
    tasks: &[T],
) -> Result<PairUpdate> {
    match config.geometry {
        Geometry::Grassmann => {
            let g = pair_cost_and_grad(agents, i, config.rho, tasks)?;
            Ok(PairUpdate {
                pair: i,
                left: grassmann_step(&g.left, &g.left_metric, config, gamma)?,
                right: grassmann_step(&g.right, &g.right_metric, config, gamma)?,
                g_value: g.g_value,
            })
        }
        Geometry::Euclidean => {
            let g = euclidean_pair_cost_and_grad(agents, i, config.rho, tasks)?;
            let left = euclidean_step(agents[i - 1].basis(), &g.left, &g.left_metric, config, gamma)?;
            let right = euclidean_step(agents[i].basis(), &g.right, &g.right_metric, config, gamma)?;
            // the next inner solve needs full column rank
            for point in [&left, &right] {
                if let AgentPoint::Euclidean(m) = point {
                    Subspace::orthonormalize(m)?;
                }
            }
            Ok(PairUpdate {
                pair: i,
                left,
                right,
                g_value: g.g_value,
            })
        }
    }
}

fn commit_point(agent: &mut AgentState, point: AgentPoint, reorth_every: usize) -> Result<()> {
    agent.update_count += 1;
    agent.point = match point {
        AgentPoint::Grassmann(s) if reorth_every > 0 && agent.update_count.is_multiple_of(reorth_every) => {
            AgentPoint::Grassmann(reorthonormalize(&s)?)
        }
        other => other,
    };
    Ok(())
}

fn commit(agents: &mut [AgentState], update: PairUpdate, reorth_every: usize) -> Result<()> {
    let i = update.pair;
    commit_point(&mut agents[i - 1], update.left, reorth_every)?;
    commit_point(&mut agents[i], update.right, reorth_every)
}

/// Applies the update of one pair immediately.
pub fn apply_pair<T: LocalTask>(
    agents: &mut [AgentState],
    i: usize,
    k: usize,
    config: &GossipConfig,
    tasks: &[T],
) -> Result<f64> {
    let gamma = stepsize(k, config.stepsize_a, config.stepsize_b);
    let update = compute_pair_update(agents, i, config, gamma, tasks)?;
    let g = update.g_value;
    commit(agents, update, config.reorth_every)?;
    Ok(g)
}

fn is_cut_locus(err: &Error) -> bool {
    matches!(err, Error::SubspacesTooFar { .. })
}

fn check_geometry(agents: &[AgentState], geometry: Geometry) -> Result<()> {
    let ok = agents.iter().all(|a| {
        matches!(
            (&a.point, geometry),
            (AgentPoint::Grassmann(_), Geometry::Grassmann) | (AgentPoint::Euclidean(_), Geometry::Euclidean)
        )
    });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "agent state does not match the configured {geometry} geometry"
        )))
    }
}

fn sequential_slot<T: LocalTask>(
    agents: &mut [AgentState],
    k: usize,
    config: &GossipConfig,
    ctx: &mut SlotContext,
    tasks: &[T],
) -> Result<TraceRecord> {
    let n = agents.len();
    let pair = ctx.selection.random_range(1..n);
    let gamma = stepsize(k, config.stepsize_a, config.stepsize_b);
    let update = match compute_pair_update(agents, pair, config, gamma, tasks) {
        Ok(u) => u,
        Err(first) if is_cut_locus(&first) => {
            let fresh = ctx.retry.random_range(1..n);
            compute_pair_update(agents, fresh, config, gamma, tasks).map_err(|second| Error::SlotAborted {
                slot: k,
                reason: format!("pair {pair}: {first}; retry with pair {fresh}: {second}"),
            })?
        }
        Err(e) => return Err(e),
    };
    let selection = Selection::Pair(update.pair);
    let g_value = update.g_value;
    commit(agents, update, config.reorth_every)?;
    Ok(TraceRecord {
        slot: k,
        gamma,
        mode: config.mode,
        selection,
        g_value,
        distances: consensus_profile(agents),
        costs: None,
    })
}

/// One slot of the stochastic gossip algorithm: sample a pair uniformly,
/// then move both agents with `U ← Exp_U(−γ_k·grad)`.
///
/// If the logarithm map is undefined for the sampled pair, a fresh pair is
/// drawn once from the retry stream; a second failure aborts the slot and
/// leaves every agent untouched.
pub fn stochastic_slot<T: LocalTask>(
    agents: &mut [AgentState],
    k: usize,
    config: &GossipConfig,
    ctx: &mut SlotContext,
    tasks: &[T],
) -> Result<TraceRecord> {
    check_geometry(agents, Geometry::Grassmann)?;
    sequential_slot(
        agents,
        k,
        &GossipConfig {
            geometry: Geometry::Grassmann,
            ..config.clone()
        },
        ctx,
        tasks,
    )
}

/// Euclidean baseline slot: same pair sampling as [`stochastic_slot`],
/// plain gradient step `U ← U − γ_k·(α·Grad f ± ρ(U_i − U_{i+1}))`.
pub fn euclidean_slot<T: LocalTask>(
    agents: &mut [AgentState],
    k: usize,
    config: &GossipConfig,
    ctx: &mut SlotContext,
    tasks: &[T],
) -> Result<TraceRecord> {
    check_geometry(agents, Geometry::Euclidean)?;
    sequential_slot(
        agents,
        k,
        &GossipConfig {
            geometry: Geometry::Euclidean,
            ..config.clone()
        },
        ctx,
        tasks,
    )
}

/// Pair indices of the odd (1, 3, 5, …) or even (2, 4, …) group.
pub fn group_pairs(n: usize, odd: bool) -> Vec<usize> {
    let start = if odd { 1 } else { 2 };
    (start..n).step_by(2).collect()
}

fn compute_group<T: LocalTask>(
    agents: &[AgentState],
    pairs: &[usize],
    config: &GossipConfig,
    gamma: f64,
    tasks: &[T],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<PairUpdate>> {
    match pool {
        Some(pool) => pool.install(|| {
            pairs
                .par_iter()
                .map(|&i| compute_pair_update(agents, i, config, gamma, tasks))
                .collect()
        }),
        None => pairs
            .iter()
            .map(|&i| compute_pair_update(agents, i, config, gamma, tasks))
            .collect(),
    }
}

/// One round of the parallel variant: with probability 0.5 update every odd
/// pair, else every even pair. Pairs of one group share no agent, so the
/// result equals applying them one after another in ascending order.
pub fn parallel_round<T: LocalTask>(
    agents: &mut [AgentState],
    k: usize,
    config: &GossipConfig,
    ctx: &mut SlotContext,
    tasks: &[T],
) -> Result<TraceRecord> {
    check_geometry(agents, config.geometry)?;
    let n = agents.len();
    if n < 3 {
        return Err(Error::InvalidArgument("parallel rounds need at least 3 agents".into()));
    }
    let odd = ctx.selection.random_bool(0.5);
    let gamma = stepsize(k, config.stepsize_a, config.stepsize_b);
    let pool = ctx.pool.as_ref();
    let (odd, updates) = match compute_group(agents, &group_pairs(n, odd), config, gamma, tasks, pool) {
        Ok(u) => (odd, u),
        Err(first) if is_cut_locus(&first) => {
            let fresh = ctx.retry.random_bool(0.5);
            let updates =
                compute_group(agents, &group_pairs(n, fresh), config, gamma, tasks, pool).map_err(|second| {
                    Error::SlotAborted {
                        slot: k,
                        reason: format!("group {}: {first}; retry: {second}", if odd { "odd" } else { "even" }),
                    }
                })?;
            (fresh, updates)
        }
        Err(e) => return Err(e),
    };
    let g_value = updates.iter().map(|u| u.g_value).sum();
    for update in updates {
        commit(agents, update, config.reorth_every)?;
    }
    Ok(TraceRecord {
        slot: k,
        gamma,
        mode: config.mode,
        selection: if odd { Selection::Odd } else { Selection::Even },
        g_value,
        distances: consensus_profile(agents),
        costs: None,
    })
}

/// Local cost f_i of every agent at its current point.
pub fn local_costs<T: LocalTask>(agents: &[AgentState], tasks: &[T]) -> Result<Vec<f64>> {
    agents
        .iter()
        .map(|a| {
            let task = &tasks[a.shard];
            let orthonormal = a.is_orthonormal();
            let sol = task.inner_solve(a.basis(), orthonormal)?;
            task.cost(a.basis(), &sol, orthonormal)
        })
        .collect()
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub agents: Vec<AgentState>,
    pub slots_executed: usize,
    pub final_distances: Vec<f64>,
    pub final_costs: Vec<f64>,
    /// Karcher mean of the agents' column spaces, when it is defined.
    pub frechet_mean: Option<FrechetMean>,
    pub init_time: Duration,
    pub run_time: Duration,
}

/// Initializes random agents and runs [`run_from`].
pub fn run<T: LocalTask>(config: &GossipConfig, tasks: &[T], sink: &mut dyn TraceSink) -> Result<RunOutcome> {
    config.validate()?;
    let m = tasks.first().ok_or(Error::Empty("no tasks"))?.ambient_dim();
    let start = Instant::now();
    let agents = init_agents(config, m)?;
    let init_time = start.elapsed();
    let mut outcome = run_from(config, tasks, agents, sink)?;
    outcome.init_time = init_time;
    Ok(outcome)
}

/// Runs `config.max_slots` slots from the given agents, emitting one trace
/// record per slot.
pub fn run_from<T: LocalTask>(
    config: &GossipConfig,
    tasks: &[T],
    mut agents: Vec<AgentState>,
    sink: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    config.validate()?;
    if tasks.len() != config.agents || agents.len() != config.agents {
        return Err(Error::InvalidArgument(format!(
            "{} agents configured, {} tasks and {} agent states supplied",
            config.agents,
            tasks.len(),
            agents.len()
        )));
    }
    let m = tasks[0].ambient_dim();
    if tasks.iter().any(|t| t.ambient_dim() != m) || agents.iter().any(|a| a.basis().shape() != (m, config.rank)) {
        return Err(Error::InvalidArgument("inconsistent ambient dimensions".into()));
    }
    check_geometry(&agents, config.geometry)?;
    let start = Instant::now();
    let mut ctx = SlotContext::new(config)?;
    for k in 0..config.max_slots {
        let mut record = match (config.mode, config.geometry) {
            (Mode::Parallel, _) => parallel_round(&mut agents, k, config, &mut ctx, tasks)?,
            (Mode::Stochastic, Geometry::Grassmann) => stochastic_slot(&mut agents, k, config, &mut ctx, tasks)?,
            (Mode::Stochastic, Geometry::Euclidean) => euclidean_slot(&mut agents, k, config, &mut ctx, tasks)?,
        };
        let cadence = config.cost_cadence;
        if cadence > 0 && (k % cadence == 0 || k + 1 == config.max_slots) {
            record.costs = Some(local_costs(&agents, tasks)?);
        }
        sink.record(&record)?;
    }
    let run_time = start.elapsed();
    let final_distances = consensus_profile(&agents);
    let final_costs = local_costs(&agents, tasks)?;
    let spaces: Result<Vec<Subspace>> = agents.iter().map(AgentState::column_space).collect();
    let frechet_mean = spaces
        .ok()
        .and_then(|s| frechet_mean(&s, FRECHET_TOL, FRECHET_MAX_ITER).ok());
    Ok(RunOutcome {
        agents,
        slots_executed: config.max_slots,
        final_distances,
        final_costs,
        frechet_mean,
        init_time: Duration::ZERO,
        run_time,
    })
}
