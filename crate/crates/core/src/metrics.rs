//! Evaluation metrics and the trace/summary writers.
//!
//! Trace CSV columns: `slot,gamma,mode,pair_or_group,g_value,d_1..d_{N-1},
//! cost_1..cost_N`. Distances are present on every row; costs only on cadence
//! slots (empty fields otherwise). Floats use the shortest representation
//! that parses back to the same bits; an undefined distance is written `inf`.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gossip::{AgentState, GossipConfig, TraceRecord, TraceSink};
use crate::manifold::{dist_sq, principal_angles, Subspace};
use crate::problems::{predict_entries, Entry, InnerSolution, LocalTask, McShard, Task, TaskGroup};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// dist_sq between chain neighbours; +∞ where the distance is undefined.
pub fn consensus_profile(agents: &[AgentState]) -> Vec<f64> {
    let spaces: Vec<Option<Subspace>> = agents.iter().map(|a| a.column_space().ok()).collect();
    spaces
        .windows(2)
        .map(|pair| match (&pair[0], &pair[1]) {
            (Some(u), Some(v)) => dist_sq(u, v).unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        })
        .collect()
}

/// Mean squared residual of `U Wᵀ` over exactly the given entries
/// (local column indices).
pub fn mse_mc(basis: &DMatrix<f64>, shard: &McShard, sol: &InnerSolution, entries: &[Entry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Empty("no entries to evaluate"));
    }
    let predictions = predict_entries(basis, shard, sol, entries.iter().map(|e| (e.row, e.col)))?;
    let sum: f64 = predictions
        .iter()
        .zip(entries)
        .map(|(p, e)| (p - e.value).powi(2))
        .sum();
    Ok(sum / entries.len() as f64)
}

pub fn rmse(mse: f64) -> f64 {
    mse.sqrt()
}

/// Root mean square of the entry values.
pub fn rms_values(entries: &[Entry]) -> f64 {
    (entries.iter().map(|e| e.value * e.value).sum::<f64>() / entries.len().max(1) as f64).sqrt()
}

/// Labels predicted for task `t` of a group: `X·U·w_t`.
fn predict_task(basis: &DMatrix<f64>, x: &DMatrix<f64>, sol: &InnerSolution, t: usize) -> DVector<f64> {
    let w = sol.coefficients.row(t).transpose();
    x * (basis * w)
}

/// Mean NMSE over tasks with nonzero label variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Nmse {
    pub value: f64,
    pub per_task: Vec<Option<f64>>,
    /// Tasks skipped because their labels have zero variance.
    pub excluded: usize,
}

/// Per-task `MSE_t / var(y_t)` (population variance) averaged over tasks.
/// `sol` holds one coefficient row per task, fitted on the training side.
pub fn nmse(basis: &DMatrix<f64>, tasks: &[Task], sol: &InnerSolution) -> Result<Nmse> {
    sol.check_shape(tasks.len(), basis.ncols())?;
    let per_task: Vec<Option<f64>> = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let d = task.samples() as f64;
            let mean = task.y.sum() / d;
            let var = task.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / d;
            if var > 0.0 {
                let residual = predict_task(basis, &task.x, sol, t) - &task.y;
                Some(residual.norm_squared() / d / var)
            } else {
                None
            }
        })
        .collect();
    let kept: Vec<f64> = per_task.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Empty("every task has zero label variance"));
    }
    Ok(Nmse {
        value: kept.iter().sum::<f64>() / kept.len() as f64,
        excluded: per_task.len() - kept.len(),
        per_task,
    })
}

/// Mean squared training residual over all samples of a group.
pub fn mse_tasks(basis: &DMatrix<f64>, tasks: &[Task], sol: &InnerSolution) -> Result<f64> {
    sol.check_shape(tasks.len(), basis.ncols())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (t, task) in tasks.iter().enumerate() {
        sum += (predict_task(basis, &task.x, sol, t) - &task.y).norm_squared();
        count += task.samples();
    }
    Ok(sum / count.max(1) as f64)
}

/// `√(Σθᵢ²)` over the principal angles between two subspaces.
pub fn subspace_error(u: &Subspace, v: &Subspace) -> Result<f64> {
    Ok(principal_angles(u, v)?.norm())
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Evaluation of one model (an agent, or the Fréchet mean). Fields that do
/// not apply to the problem, or are not finite, are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_rmse: Option<f64>,
    /// Test RMSE over the RMS of the test values.
    pub relative_test_rmse: Option<f64>,
    pub test_nmse: Option<f64>,
    pub subspace_error: Option<f64>,
}

/// Train and test metrics of a basis on one matrix completion shard.
pub fn evaluate_mc(basis: &DMatrix<f64>, orthonormal: bool, shard: &McShard, test: &[Entry]) -> Result<EvalMetrics> {
    let sol = shard.inner_solve(basis, orthonormal)?;
    let train_mse = mse_mc(basis, shard, &sol, shard.entries())?;
    let mut out = EvalMetrics {
        train_mse: finite(train_mse),
        ..EvalMetrics::default()
    };
    if !test.is_empty() {
        let test_mse = mse_mc(basis, shard, &sol, test)?;
        out.test_mse = finite(test_mse);
        out.test_rmse = finite(rmse(test_mse));
        out.relative_test_rmse = finite(rmse(test_mse) / rms_values(test));
    }
    Ok(out)
}

/// Metrics of one basis pooled over several shards: squared residuals are
/// summed over all entries before averaging.
pub fn evaluate_mc_pooled(
    basis: &DMatrix<f64>,
    orthonormal: bool,
    parts: &[(&McShard, &[Entry])],
) -> Result<EvalMetrics> {
    let (mut train_sum, mut train_count, mut test_sum, mut test_sq, mut test_count) = (0.0, 0, 0.0, 0.0, 0);
    for (shard, test) in parts {
        let sol = shard.inner_solve(basis, orthonormal)?;
        train_sum += mse_mc(basis, shard, &sol, shard.entries())? * shard.n_observed() as f64;
        train_count += shard.n_observed();
        if !test.is_empty() {
            test_sum += mse_mc(basis, shard, &sol, test)? * test.len() as f64;
            test_sq += test.iter().map(|e| e.value * e.value).sum::<f64>();
            test_count += test.len();
        }
    }
    let mut out = EvalMetrics {
        train_mse: finite(train_sum / train_count.max(1) as f64),
        ..EvalMetrics::default()
    };
    if test_count > 0 {
        let test_mse = test_sum / test_count as f64;
        out.test_mse = finite(test_mse);
        out.test_rmse = finite(test_mse.sqrt());
        out.relative_test_rmse = finite((test_mse / (test_sq / test_count as f64)).sqrt());
    }
    Ok(out)
}

/// Train MSE, test NMSE and subspace error of a basis on one task group.
/// Returns the metrics and the number of tasks excluded from the NMSE.
pub fn evaluate_mtl(
    basis: &DMatrix<f64>,
    orthonormal: bool,
    group: &TaskGroup,
    test: Option<&[Task]>,
    truth: Option<&Subspace>,
) -> Result<(EvalMetrics, usize)> {
    let sol = group.inner_solve(basis, orthonormal)?;
    let mut out = EvalMetrics {
        train_mse: finite(mse_tasks(basis, group.tasks(), &sol)?),
        ..EvalMetrics::default()
    };
    let mut excluded = 0;
    if let Some(test) = test {
        let score = nmse(basis, test, &sol)?;
        out.test_nmse = finite(score.value);
        excluded = score.excluded;
    }
    if let Some(truth) = truth {
        let space = Subspace::orthonormalize(basis)?;
        out.subspace_error = finite(subspace_error(&space, truth)?);
    }
    Ok((out, excluded))
}

/// Writes trace records as CSV.
pub struct CsvTraceWriter<W: Write> {
    writer: W,
    agents: usize,
}

impl<W: Write> CsvTraceWriter<W> {
    /// Writes the header for a chain of `agents` agents.
    pub fn new(mut writer: W, agents: usize) -> Result<Self> {
        let mut header = String::from("slot,gamma,mode,pair_or_group,g_value");
        for i in 1..agents {
            header.push_str(&format!(",d_{i}"));
        }
        for i in 1..=agents {
            header.push_str(&format!(",cost_{i}"));
        }
        writeln!(writer, "{header}").map_err(io_err)?;
        Ok(Self { writer, agents })
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.writer.flush().map_err(io_err)?;
        Ok(self.writer)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("trace", e)
}

impl<W: Write> TraceSink for CsvTraceWriter<W> {
    fn record(&mut self, record: &TraceRecord) -> Result<()> {
        if record.distances.len() + 1 != self.agents {
            return Err(Error::shape(
                format!("{} distances", self.agents - 1),
                format!("{}", record.distances.len()),
            ));
        }
        let mut line = format!(
            "{},{:e},{},{},{:e}",
            record.slot, record.gamma, record.mode, record.selection, record.g_value
        );
        for d in &record.distances {
            line.push_str(&format!(",{d:e}"));
        }
        match &record.costs {
            Some(costs) if costs.len() == self.agents => {
                for c in costs {
                    line.push_str(&format!(",{c:e}"));
                }
            }
            Some(costs) => {
                return Err(Error::shape(
                    format!("{} costs", self.agents),
                    format!("{}", costs.len()),
                ));
            }
            None => line.push_str(&",".repeat(self.agents)),
        }
        writeln!(self.writer, "{line}").map_err(io_err)
    }
}

/// One parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub slot: usize,
    pub gamma: f64,
    pub mode: String,
    pub pair_or_group: String,
    pub g_value: f64,
    pub distances: Vec<f64>,
    pub costs: Option<Vec<f64>>,
}

/// Parses a trace CSV written by [`CsvTraceWriter`].
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRow>> {
    let path = Path::new("trace");
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(io_err)?;
    let columns: Vec<&str> = header.split(',').collect();
    let n_dist = columns.iter().filter(|c| c.starts_with("d_")).count();
    let agents = columns.iter().filter(|c| c.starts_with("cost_")).count();
    if columns.len() != 5 + n_dist + agents || n_dist + 1 != agents {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(io_err)?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(parse_err(
                line_no,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("cannot parse {s:?}")))
        };
        let cost_fields = &fields[5 + n_dist..];
        let costs = if cost_fields.iter().all(|f| f.is_empty()) {
            None
        } else {
            Some(cost_fields.iter().map(|f| num(f)).collect::<Result<Vec<_>>>()?)
        };
        rows.push(TraceRow {
            slot: fields[0]
                .parse()
                .map_err(|_| parse_err(line_no, format!("cannot parse slot {:?}", fields[0])))?,
            gamma: num(fields[1])?,
            mode: fields[2].to_string(),
            pair_or_group: fields[3].to_string(),
            g_value: num(fields[4])?,
            distances: fields[5..5 + n_dist]
                .iter()
                .map(|f| num(f))
                .collect::<Result<Vec<_>>>()?,
            costs,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub id: usize,
    pub updates: usize,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetSummary {
    pub iterations: usize,
    pub converged: bool,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generate: f64,
    pub init: f64,
    pub run: f64,
    pub evaluate: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// `"mc"` or `"mtl"`.
    pub problem: String,
    pub config: GossipConfig,
    pub slots_executed: usize,
    pub agents: Vec<AgentSummary>,
    /// Final dist_sq between neighbours; null where undefined.
    pub consensus_distances: Vec<Option<f64>>,
    pub frechet_mean: Option<FrechetSummary>,
    /// Mean removed from matrix completion values before training.
    pub offset: f64,
    /// Tasks left out of NMSE averages because of zero label variance.
    pub nmse_excluded_tasks: usize,
    pub timing: Timing,
}

impl RunSummary {
    pub fn consensus(distances: &[f64]) -> Vec<Option<f64>> {
        distances.iter().map(|&d| finite(d)).collect()
    }
}

/// Pretty-printed JSON of any serializable value.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    write_json(path, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{AgentPoint, Mode, Selection};
    use crate::manifold::random_subspace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use serde_json::Value;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn agent(id: usize, s: Subspace) -> AgentState {
        AgentState {
            id,
            shard: id - 1,
            point: AgentPoint::Grassmann(s),
            update_count: 0,
        }
    }

    #[test]
    fn consensus_profile_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let u = random_subspace(6, 2, &mut rng).unwrap();
        let same: Vec<AgentState> = (1..=4).map(|i| agent(i, u.clone())).collect();
        assert!(consensus_profile(&same).iter().all(|&d| d < 1e-24));
        let spaces: Vec<Subspace> = (0..4).map(|_| random_subspace(6, 2, &mut rng).unwrap()).collect();
        let agents: Vec<AgentState> = spaces
            .iter()
            .enumerate()
            .map(|(k, s)| agent(k + 1, s.clone()))
            .collect();
        let profile = consensus_profile(&agents);
        assert_eq!(profile.len(), 3);
        for i in 0..3 {
            assert_eq!(profile[i], dist_sq(&spaces[i], &spaces[i + 1]).unwrap());
        }
        assert_eq!(consensus_profile(&agents[..2]).len(), 1);

        let e1 = Subspace::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = Subspace::new(DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(consensus_profile(&[agent(1, e1), agent(2, e2)]), vec![f64::INFINITY]);
    }

    fn shard_and_solution(rng: &mut ChaCha8Rng) -> (Subspace, McShard, InnerSolution) {
        let u = random_subspace(8, 2, rng).unwrap();
        let entries: Vec<Entry> = (0..8)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|&(i, j)| (i + 2 * j) % 3 != 0)
            .map(|(i, j)| Entry::new(i, j, (i * j) as f64 * 0.1 - 1.0))
            .collect();
        let shard = McShard::new(8, 5, entries, 0.0).unwrap();
        let sol = shard.inner_solve(u.basis(), true).unwrap();
        (u, shard, sol)
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (u, shard, sol) = shard_and_solution(&mut rng);
        let dense = u.basis() * sol.coefficients.transpose();
        let exact: Vec<Entry> = (0..4).map(|k| Entry::new(k, k, dense[(k, k)])).collect();
        assert!(mse_mc(u.basis(), &shard, &sol, &exact).unwrap() < 1e-28);
        let off = [Entry::new(1, 2, dense[(1, 2)] + 3.0)];
        let mse = mse_mc(u.basis(), &shard, &sol, &off).unwrap();
        assert!((mse - 9.0).abs() < 1e-12);
        assert!((rmse(mse) - 3.0).abs() < 1e-12);

        let oracle: f64 = shard
            .entries()
            .iter()
            .map(|e| (dense[(e.row, e.col)] - e.value).powi(2))
            .sum::<f64>()
            / shard.n_observed() as f64;
        let mse = mse_mc(u.basis(), &shard, &sol, shard.entries()).unwrap();
        assert!((mse - oracle).abs() < 1e-12 * oracle.max(1.0));
        assert!(mse_mc(u.basis(), &shard, &sol, &[]).is_err());
        assert!(mse_mc(u.basis(), &shard, &sol, &[Entry::new(8, 0, 1.0)]).is_err());
    }

    fn group_and_solution(rng: &mut ChaCha8Rng) -> (Subspace, Vec<Task>, InnerSolution) {
        let u = random_subspace(6, 2, rng).unwrap();
        let tasks: Vec<Task> = (0..4)
            .map(|_| Task::new(gaussian(7, 6, rng), gaussian(7, 1, rng).column(0).into_owned()).unwrap())
            .collect();
        let sol = InnerSolution::from_coefficients(gaussian(4, 2, rng));
        (u, tasks, sol)
    }

    #[test]
    fn nmse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let (u, tasks, sol) = group_and_solution(&mut rng);
        let perfect: Vec<Task> = tasks
            .iter()
            .enumerate()
            .map(|(t, task)| Task::new(task.x.clone(), predict_task(u.basis(), &task.x, &sol, t)).unwrap())
            .collect();
        assert!(nmse(u.basis(), &perfect, &sol).unwrap().value < 1e-28);

        // zero coefficients predict 0; labels y − mean(y) + 0 make the
        // predictor equal to the label mean, so NMSE = var/var = 1
        let zero = InnerSolution::from_coefficients(DMatrix::zeros(4, 2));
        let centered: Vec<Task> = tasks
            .iter()
            .map(|t| {
                let mean = t.y.mean();
                Task::new(t.x.clone(), t.y.map(|y| y - mean)).unwrap()
            })
            .collect();
        let score = nmse(u.basis(), &centered, &zero).unwrap();
        assert!((score.value - 1.0).abs() < 1e-12);
        assert_eq!(score.excluded, 0);

        let mut with_constant = tasks.clone();
        with_constant[1] = Task::new(tasks[1].x.clone(), DVector::from_element(7, 2.5)).unwrap();
        let score = nmse(u.basis(), &with_constant, &sol).unwrap();
        assert_eq!(score.excluded, 1);
        assert!(score.per_task[1].is_none());
    }

    #[test]
    fn nmse_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let (u, tasks, sol) = group_and_solution(&mut rng);
        let base = nmse(u.basis(), &tasks, &sol).unwrap().value;
        for c in [-3.0, 0.01, 250.0] {
            let scaled: Vec<Task> = tasks
                .iter()
                .map(|t| Task::new(t.x.clone(), &t.y * c).unwrap())
                .collect();
            let scaled_sol = InnerSolution::from_coefficients(&sol.coefficients * c);
            let v = nmse(u.basis(), &scaled, &scaled_sol).unwrap().value;
            assert!((v - base).abs() < 1e-12 * base.max(1.0), "c={c}: {v} vs {base}");
        }
    }

    #[test]
    fn subspace_error_examples() {
        let theta: f64 = 0.42;
        let u = Subspace::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let v = Subspace::new(DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()])).unwrap();
        assert!((subspace_error(&u, &v).unwrap() - theta).abs() < 1e-14);
        assert!(subspace_error(&u, &u).unwrap() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let a = random_subspace(7, 3, &mut rng).unwrap();
        let b = random_subspace(7, 3, &mut rng).unwrap();
        let q = Subspace::orthonormalize(&gaussian(3, 3, &mut rng)).unwrap();
        let rotated = Subspace::new(a.basis() * q.basis()).unwrap();
        let base = subspace_error(&a, &b).unwrap();
        assert!((subspace_error(&rotated, &b).unwrap() - base).abs() < 1e-12);
        assert!((subspace_error(&b, &rotated).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn subspace_error_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for _ in 0..30 {
            let s: Vec<Subspace> = (0..3).map(|_| random_subspace(8, 2, &mut rng).unwrap()).collect();
            let d = |i: usize, j: usize| subspace_error(&s[i], &s[j]).unwrap();
            assert!((d(0, 1) - d(1, 0)).abs() < 1e-8);
            assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-8);
        }
    }

    fn record(slot: usize, costs: Option<Vec<f64>>) -> TraceRecord {
        TraceRecord {
            slot,
            gamma: 0.1 / (1.0 + 0.01 * slot as f64),
            mode: Mode::Stochastic,
            selection: Selection::Pair(2),
            g_value: 1.0 / 3.0 + slot as f64,
            distances: vec![1e-17, f64::INFINITY],
            costs,
        }
    }

    #[test]
    fn trace_round_trip() {
        let mut writer = CsvTraceWriter::new(Vec::new(), 3).unwrap();
        let records = vec![
            record(0, Some(vec![0.5, 1e300, 2.0f64.sqrt()])),
            record(1, None),
            TraceRecord {
                mode: Mode::Parallel,
                selection: Selection::Odd,
                ..record(2, None)
            },
        ];
        for r in &records {
            writer.record(r).unwrap();
        }
        let bytes = writer.into_inner().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("slot,gamma,mode,pair_or_group,g_value,d_1,d_2,cost_1,cost_2,cost_3\n"));
        let rows = read_trace(bytes.as_slice()).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, rec) in rows.iter().zip(&records) {
            assert_eq!(row.slot, rec.slot);
            assert_eq!(row.gamma.to_bits(), rec.gamma.to_bits());
            assert_eq!(row.g_value.to_bits(), rec.g_value.to_bits());
            assert_eq!(row.distances, rec.distances);
            assert_eq!(row.costs, rec.costs);
            assert_eq!(row.mode, rec.mode.to_string());
            assert_eq!(row.pair_or_group, rec.selection.to_string());
        }
        assert_eq!(rows[2].pair_or_group, "odd");
    }

    #[test]
    fn empty_trace_is_header_only() {
        let writer = CsvTraceWriter::new(Vec::new(), 2).unwrap();
        let text = String::from_utf8(writer.into_inner().unwrap()).unwrap();
        assert_eq!(text, "slot,gamma,mode,pair_or_group,g_value,d_1,cost_1,cost_2\n");
        assert!(read_trace(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn trace_rejects_wrong_widths() {
        let mut writer = CsvTraceWriter::new(Vec::new(), 4).unwrap();
        assert!(writer.record(&record(0, None)).is_err());
    }

    fn sample_summary() -> RunSummary {
        let metrics = EvalMetrics {
            train_mse: Some(1e-9),
            test_mse: Some(2e-9),
            test_rmse: Some(2e-9f64.sqrt()),
            relative_test_rmse: Some(1e-4),
            test_nmse: None,
            subspace_error: None,
        };
        RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            problem: "mc".into(),
            config: GossipConfig::new(3, 2),
            slots_executed: 400,
            agents: (1..=3)
                .map(|id| AgentSummary {
                    id,
                    updates: 100,
                    metrics: metrics.clone(),
                })
                .collect(),
            consensus_distances: RunSummary::consensus(&[1e-6, f64::INFINITY]),
            frechet_mean: Some(FrechetSummary {
                iterations: 3,
                converged: true,
                metrics,
            }),
            offset: 0.0,
            nmse_excluded_tasks: 0,
            timing: Timing::default(),
        }
    }

    /// Independent check of the documented summary layout.
    fn check_schema(v: &Value) -> std::result::Result<(), String> {
        let obj = v.as_object().ok_or("summary is not an object")?;
        let need = |key: &str| obj.get(key).ok_or(format!("missing {key}"));
        if need("schema_version")?.as_u64() != Some(1) {
            return Err("schema_version must be 1".into());
        }
        if !matches!(need("problem")?.as_str(), Some("mc" | "mtl")) {
            return Err("problem must be mc or mtl".into());
        }
        let config = need("config")?.as_object().ok_or("config is not an object")?;
        for key in [
            "agents",
            "rank",
            "rho",
            "stepsize_a",
            "stepsize_b",
            "max_slots",
            "mode",
            "geometry",
            "precon",
            "seed",
            "reorth_every",
            "cost_cadence",
            "workers",
        ] {
            config.get(key).ok_or(format!("config misses {key}"))?;
        }
        need("slots_executed")?.as_u64().ok_or("slots_executed")?;
        let n = config["agents"].as_u64().ok_or("config.agents")? as usize;
        let agents = need("agents")?.as_array().ok_or("agents is not an array")?;
        if agents.len() != n {
            return Err("agents length".into());
        }
        let metric_keys = [
            "train_mse",
            "test_mse",
            "test_rmse",
            "relative_test_rmse",
            "test_nmse",
            "subspace_error",
        ];
        let check_metrics = |o: &serde_json::Map<String, Value>| -> std::result::Result<(), String> {
            for key in metric_keys {
                let v = o.get(key).ok_or(format!("metric {key} missing"))?;
                if !(v.is_null() || v.as_f64().is_some_and(f64::is_finite)) {
                    return Err(format!("metric {key} is not a finite number or null"));
                }
            }
            Ok(())
        };
        for a in agents {
            let a = a.as_object().ok_or("agent entry")?;
            a.get("id").and_then(Value::as_u64).ok_or("agent id")?;
            a.get("updates").and_then(Value::as_u64).ok_or("agent updates")?;
            check_metrics(a)?;
        }
        let d = need("consensus_distances")?.as_array().ok_or("consensus_distances")?;
        if d.len() + 1 != n || !d.iter().all(|x| x.is_null() || x.is_f64()) {
            return Err("consensus_distances".into());
        }
        match need("frechet_mean")? {
            Value::Null => {}
            Value::Object(f) => {
                f.get("iterations")
                    .and_then(Value::as_u64)
                    .ok_or("frechet iterations")?;
                f.get("converged").and_then(Value::as_bool).ok_or("frechet converged")?;
                check_metrics(f)?;
            }
            _ => return Err("frechet_mean".into()),
        }
        need("offset")?.as_f64().ok_or("offset")?;
        need("nmse_excluded_tasks")?.as_u64().ok_or("nmse_excluded_tasks")?;
        let timing = need("timing")?.as_object().ok_or("timing")?;
        for key in ["generate", "init", "run", "evaluate"] {
            timing.get(key).and_then(Value::as_f64).ok_or(format!("timing {key}"))?;
        }
        Ok(())
    }

    #[test]
    fn summary_matches_schema_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        let summary = sample_summary();
        write_summary(&path, &summary).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let value: Value = serde_json::from_str(&text).unwrap();
        check_schema(&value).unwrap();
        assert!(value["consensus_distances"][1].is_null());
        let back: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, summary);

        let mut broken = value.clone();
        broken.as_object_mut().unwrap().remove("timing");
        assert!(check_schema(&broken).is_err());
    }

    #[test]
    fn write_errors_carry_the_path() {
        let err = write_summary(Path::new("/nonexistent/dir/summary.json"), &sample_summary()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/summary.json"));
    }
}
