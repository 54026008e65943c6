//! Synthetic instances, file loaders, train/test splits and partitioning of
//! columns or tasks across agents.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::manifold::{random_subspace, Subspace};
use crate::problems::{Entry, McShard, Task, TaskGroup};

/// Largest m·n for which a dense ground-truth matrix may be materialized.
pub const DENSE_LIMIT: usize = 10_000_000;

/// A matrix completion instance. Entry indices are 0-based and global.
#[derive(Debug, Clone, PartialEq)]
pub struct McInstance {
    pub m: usize,
    pub n: usize,
    /// Rank of the ground truth, when known.
    pub r_true: Option<usize>,
    /// Ground-truth factors A (m×r) and B (n×r) with Y* = ABᵀ.
    pub factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub train: Vec<Entry>,
    pub test: Vec<Entry>,
    pub noise_sd: f64,
    /// Mean removed from every value by [`center_mc`].
    pub offset: f64,
}

impl McInstance {
    /// Ground-truth value at (i, j).
    pub fn truth(&self, i: usize, j: usize) -> Option<f64> {
        self.factors.as_ref().map(|(a, b)| a.row(i).dot(&b.row(j)))
    }

    /// Dense Y* = ABᵀ, only for m·n ≤ [`DENSE_LIMIT`].
    pub fn dense_truth(&self) -> Result<DMatrix<f64>> {
        let (a, b) = self
            .factors
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("instance has no ground truth".into()))?;
        if self.m.saturating_mul(self.n) > DENSE_LIMIT {
            return Err(Error::InvalidArgument(format!(
                "{}x{} is too large to materialize",
                self.m, self.n
            )));
        }
        Ok(a * b.transpose())
    }
}

/// Parameters of the Gaussian low-rank generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    /// Over-sampling ratio |Ω| / (mr + nr − r²).
    pub os: f64,
    pub noise_sd: f64,
    /// Number of held-out test entries.
    pub test_size: usize,
}

/// |Ω| = round(OS·(mr + nr − r²)).
pub fn observed_count(m: usize, n: usize, r: usize, os: f64) -> usize {
    let dof = (m * r + n * r) as f64 - (r * r) as f64;
    (os * dof).round() as usize
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn check_mc_params(p: &McParams) -> Result<usize> {
    if p.m == 0 || p.n == 0 || p.r == 0 || p.r > p.m.min(p.n) {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= r <= min(m, n), got m={}, n={}, r={}",
            p.m, p.n, p.r
        )));
    }
    if !(p.os >= 1.0 && p.os.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "over-sampling ratio must be >= 1, got {}",
            p.os
        )));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sd must be >= 0, got {}",
            p.noise_sd
        )));
    }
    let train = observed_count(p.m, p.n, p.r, p.os);
    let total =
        p.m.checked_mul(p.n)
            .ok_or_else(|| Error::InvalidArgument("m·n overflows".into()))?;
    if train + p.test_size > total {
        return Err(Error::InvalidArgument(format!(
            "{train} training + {} test entries exceed the {total} entries of a {}x{} matrix",
            p.test_size, p.m, p.n
        )));
    }
    Ok(train)
}

/// Samples Ω and the test set without replacement and evaluates entries
/// lazily from the factors. Training values get Gaussian noise; test values
/// are noiseless.
fn sample_entries<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    train: usize,
    test: usize,
    noise_sd: f64,
    rng: &mut R,
) -> (Vec<Entry>, Vec<Entry>) {
    let (m, n) = (a.nrows(), b.nrows());
    let positions = index::sample(rng, m * n, train + test).into_vec();
    let value = |p: usize| {
        let (i, j) = (p % m, p / m);
        (i, j, a.row(i).dot(&b.row(j)))
    };
    let mut train_entries: Vec<Entry> = positions[..train]
        .iter()
        .map(|&p| {
            let (i, j, v) = value(p);
            let noise = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            Entry::new(i, j, v + noise)
        })
        .collect();
    let mut test_entries: Vec<Entry> = positions[train..]
        .iter()
        .map(|&p| {
            let (i, j, v) = value(p);
            Entry::new(i, j, v)
        })
        .collect();
    let by_position = |e: &Entry| (e.col, e.row);
    train_entries.sort_by_key(by_position);
    test_entries.sort_by_key(by_position);
    (train_entries, test_entries)
}

/// Gaussian factors A (m×r), B (n×r); Ω of size round(OS·(mr+nr−r²))
/// sampled uniformly without replacement, plus a disjoint test set.
pub fn gen_mc<R: Rng + ?Sized>(params: &McParams, rng: &mut R) -> Result<McInstance> {
    let train = check_mc_params(params)?;
    let a = gaussian(params.m, params.r, rng);
    let b = gaussian(params.n, params.r, rng);
    let (train, test) = sample_entries(&a, &b, train, params.test_size, params.noise_sd, rng);
    Ok(McInstance {
        m: params.m,
        n: params.n,
        r_true: Some(params.r),
        factors: Some((a, b)),
        train,
        test,
        noise_sd: params.noise_sd,
        offset: 0.0,
    })
}

/// Singular values `σ_k = σ_1·cond^{−(k−1)/(r−1)}` with `σ_1 = √(mn)`, so
/// the leading component has unit entry scale.
pub fn illcond_spectrum(m: usize, n: usize, r: usize, cond: f64) -> Result<Vec<f64>> {
    if !(cond >= 1.0 && cond.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "condition number must be >= 1, got {cond}"
        )));
    }
    if r == 0 || (r == 1 && cond > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "condition number {cond} needs rank >= 2, got {r}"
        )));
    }
    let top = ((m * n) as f64).sqrt();
    Ok((0..r)
        .map(|k| {
            if k == 0 {
                top
            } else if k == r - 1 {
                top / cond
            } else {
                top * cond.powf(-(k as f64) / (r - 1) as f64)
            }
        })
        .collect())
}

/// Y* = P·diag(σ)·Qᵀ with random orthonormal P (m×r), Q (n×r) and a
/// geometrically decaying spectrum of condition number `cond`.
pub fn gen_mc_illcond<R: Rng + ?Sized>(params: &McParams, cond: f64, rng: &mut R) -> Result<McInstance> {
    let train = check_mc_params(params)?;
    let sigma = illcond_spectrum(params.m, params.n, params.r, cond)?;
    let p = random_subspace(params.m, params.r, rng)?.into_basis();
    let q = random_subspace(params.n, params.r, rng)?.into_basis();
    let a = p * DMatrix::from_diagonal(&DVector::from_vec(sigma));
    let (train, test) = sample_entries(&a, &q, train, params.test_size, params.noise_sd, rng);
    Ok(McInstance {
        m: params.m,
        n: params.n,
        r_true: Some(params.r),
        factors: Some((a, q)),
        train,
        test,
        noise_sd: params.noise_sd,
        offset: 0.0,
    })
}

/// Sizes of `parts` contiguous blocks covering `total` items; the first
/// `total % parts` blocks are one larger.
pub fn block_sizes(total: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || parts > total {
        return Err(Error::InvalidArgument(format!(
            "cannot split {total} items into {parts} non-empty blocks"
        )));
    }
    let (base, extra) = (total / parts, total % parts);
    Ok((0..parts).map(|k| base + usize::from(k < extra)).collect())
}

/// One agent's share of a matrix completion instance.
#[derive(Debug, Clone)]
pub struct McPart {
    pub shard: McShard,
    /// Held-out entries of the agent's columns, with local column indices.
    pub test: Vec<Entry>,
    /// Global index of the first local column.
    pub col_offset: usize,
}

/// Splits the columns into N contiguous blocks; entries of each block are
/// re-indexed to local columns.
pub fn partition_columns(instance: &McInstance, agents: usize, lambda: f64) -> Result<Vec<McPart>> {
    let sizes = block_sizes(instance.n, agents)?;
    let mut owner = Vec::with_capacity(instance.n);
    let mut offsets = Vec::with_capacity(agents);
    let mut start = 0;
    for (k, &size) in sizes.iter().enumerate() {
        offsets.push(start);
        owner.extend(std::iter::repeat_n(k, size));
        start += size;
    }
    let mut train = vec![Vec::new(); agents];
    let mut test = vec![Vec::new(); agents];
    for (set, out) in [(&instance.train, &mut train), (&instance.test, &mut test)] {
        for e in set {
            if e.col >= instance.n || e.row >= instance.m {
                return Err(Error::InvalidArgument(format!(
                    "entry ({}, {}) outside a {}x{} instance",
                    e.row, e.col, instance.m, instance.n
                )));
            }
            let k = owner[e.col];
            out[k].push(Entry::new(e.row, e.col - offsets[k], e.value));
        }
    }
    train
        .into_iter()
        .zip(test)
        .enumerate()
        .map(|(k, (train, test))| {
            Ok(McPart {
                shard: McShard::new(instance.m, sizes[k], train, lambda)?,
                test,
                col_offset: offsets[k],
            })
        })
        .collect()
}

/// A multitask regression instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlInstance {
    pub m: usize,
    pub tasks: Vec<Task>,
    /// Generating subspace U_* (synthetic instances only).
    pub truth: Option<Subspace>,
    pub noise_sd: f64,
}

/// Parameters of the multitask generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtlParams {
    pub tasks: usize,
    pub m: usize,
    pub r: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub noise_sd: f64,
}

impl Default for MtlParams {
    fn default() -> Self {
        Self {
            tasks: 1000,
            m: 100,
            r: 5,
            d_min: 10,
            d_max: 50,
            noise_sd: 1e-6,
        }
    }
}

/// Tasks with d_t ~ U{d_min..d_max} Gaussian samples and labels
/// `y_t = X_t U_* U_*ᵀ w_t + noise`, with Gaussian w_t.
pub fn gen_mtl<R: Rng + ?Sized>(params: &MtlParams, rng: &mut R) -> Result<MtlInstance> {
    let p = params;
    if p.tasks == 0 || p.m == 0 || p.r == 0 || p.r > p.m {
        return Err(Error::InvalidArgument(format!(
            "need T >= 1 and 1 <= r <= m, got T={}, m={}, r={}",
            p.tasks, p.m, p.r
        )));
    }
    if p.d_min == 0 || p.d_min > p.d_max {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= d_min <= d_max, got [{}, {}]",
            p.d_min, p.d_max
        )));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sd must be >= 0, got {}",
            p.noise_sd
        )));
    }
    let truth = random_subspace(p.m, p.r, rng)?;
    let u = truth.basis();
    let tasks = (0..p.tasks)
        .map(|_| {
            let d = rng.random_range(p.d_min..=p.d_max);
            let x = gaussian(d, p.m, rng);
            let w = gaussian(p.m, 1, rng);
            let mut y = &x * (u * (u.tr_mul(&w)));
            if p.noise_sd > 0.0 {
                y += gaussian(d, 1, rng) * p.noise_sd;
            }
            Task::new(x, y.column(0).into_owned())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MtlInstance {
        m: p.m,
        tasks,
        truth: Some(truth),
        noise_sd: p.noise_sd,
    })
}

/// Splits the tasks into N contiguous groups.
pub fn partition_tasks(tasks: &[Task], m: usize, agents: usize, lambda: f64) -> Result<Vec<TaskGroup>> {
    let sizes = block_sizes(tasks.len(), agents)?;
    let mut start = 0;
    sizes
        .into_iter()
        .map(|size| {
            let group = TaskGroup::new(m, tasks[start..start + size].to_vec(), lambda);
            start += size;
            group
        })
        .collect()
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    line: &str,
    expected: Option<usize>,
) -> Result<Vec<T>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if let Some(count) = expected {
        if fields.len() != count {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {count} fields, found {}", fields.len()),
            ));
        }
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| parse_err(path, line_no, format!("cannot parse {f:?}")))
        })
        .collect()
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with their 1-based line numbers.
fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((k + 1, line));
        }
    }
    Ok(out)
}

/// Reads a triplet file: a header line `m n`, then one `i j v` line per
/// observed entry with 1-based indices. All entries become training data.
pub fn load_mc_triplets(path: &Path) -> Result<McInstance> {
    let lines = content_lines(path)?;
    let (header_line, header) = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "missing `m n` header"))?;
    let dims: Vec<usize> = parse_fields(path, *header_line, header, Some(2))?;
    let (m, n) = (dims[0], dims[1]);
    if m == 0 || n == 0 {
        return Err(parse_err(path, *header_line, "dimensions must be positive"));
    }
    let mut seen = HashSet::with_capacity(lines.len());
    let mut train = Vec::with_capacity(lines.len() - 1);
    for (line_no, line) in &lines[1..] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                *line_no,
                format!("expected `i j v`, found {} fields", fields.len()),
            ));
        }
        let index = |f: &str| {
            f.parse::<usize>()
                .map_err(|_| parse_err(path, *line_no, format!("cannot parse index {f:?}")))
        };
        let (i, j) = (index(fields[0])?, index(fields[1])?);
        let v: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, *line_no, format!("cannot parse value {:?}", fields[2])))?;
        if i == 0 || j == 0 || i > m || j > n {
            return Err(parse_err(
                path,
                *line_no,
                format!("index ({i}, {j}) outside 1..={m} x 1..={n}"),
            ));
        }
        if !v.is_finite() {
            return Err(parse_err(path, *line_no, "non-finite value"));
        }
        if !seen.insert((i, j)) {
            return Err(parse_err(path, *line_no, format!("duplicate entry ({i}, {j})")));
        }
        train.push(Entry::new(i - 1, j - 1, v));
    }
    Ok(McInstance {
        m,
        n,
        r_true: None,
        factors: None,
        train,
        test: Vec::new(),
        noise_sd: 0.0,
        offset: 0.0,
    })
}

/// Writes entries in the triplet format read by [`load_mc_triplets`].
/// Values are printed in shortest round-trip form, so reloading is exact.
pub fn write_mc_triplets(path: &Path, m: usize, n: usize, entries: &[Entry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{m} {n}").map_err(io)?;
    for e in entries {
        writeln!(w, "{} {} {}", e.row + 1, e.col + 1, e.value).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads one task file: header `d m`, then d rows `x_1 … x_m y`.
pub fn load_mtl_task(path: &Path) -> Result<Task> {
    let lines = content_lines(path)?;
    let (header_line, header) = lines
        .first()
        .ok_or_else(|| parse_err(path, 1, "missing `d m` header"))?;
    let dims: Vec<usize> = parse_fields(path, *header_line, header, Some(2))?;
    let (d, m) = (dims[0], dims[1]);
    if d == 0 || m == 0 {
        return Err(parse_err(path, *header_line, "dimensions must be positive"));
    }
    if lines.len() - 1 != d {
        return Err(parse_err(
            path,
            lines.last().map_or(1, |l| l.0),
            format!("header declares {d} samples, found {}", lines.len() - 1),
        ));
    }
    let mut x = DMatrix::zeros(d, m);
    let mut y = DVector::zeros(d);
    for (k, (line_no, line)) in lines[1..].iter().enumerate() {
        let values: Vec<f64> = parse_fields(path, *line_no, line, Some(m + 1))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, *line_no, "non-finite value"));
        }
        for (c, &v) in values[..m].iter().enumerate() {
            x[(k, c)] = v;
        }
        y[k] = values[m];
    }
    Task::new(x, y)
}

/// Reads every regular file of a directory (sorted by file name) as one task.
pub fn load_mtl_dir(dir: &Path) -> Result<MtlInstance> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.retain(|p| p.is_file());
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("task directory has no files"));
    }
    let tasks = paths.iter().map(|p| load_mtl_task(p)).collect::<Result<Vec<_>>>()?;
    let m = tasks[0].x.ncols();
    if let Some((p, t)) = paths.iter().zip(&tasks).find(|(_, t)| t.x.ncols() != m) {
        return Err(parse_err(
            p,
            1,
            format!("task has {} features, expected {m}", t.x.ncols()),
        ));
    }
    Ok(MtlInstance {
        m,
        tasks,
        truth: None,
        noise_sd: 0.0,
    })
}

/// Writes one task in the format read by [`load_mtl_task`].
pub fn write_mtl_task(path: &Path, task: &Task) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", task.x.nrows(), task.x.ncols()).map_err(io)?;
    for k in 0..task.x.nrows() {
        let row: Vec<String> = task.x.row(k).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{} {}", row.join(" "), task.y[k]).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )))
    }
}

/// Moves every entry of the instance into a fresh per-entry train/test split
/// with `round(fraction·|entries|)` training entries.
pub fn split_train_test<R: Rng + ?Sized>(instance: &McInstance, fraction: f64, rng: &mut R) -> Result<McInstance> {
    check_fraction(fraction)?;
    let mut all: Vec<Entry> = instance.train.iter().chain(&instance.test).copied().collect();
    all.shuffle(rng);
    let cut = (fraction * all.len() as f64).round() as usize;
    let mut test = all.split_off(cut);
    let by_position = |e: &Entry| (e.col, e.row);
    all.sort_by_key(by_position);
    test.sort_by_key(by_position);
    Ok(McInstance {
        train: all,
        test,
        ..instance.clone()
    })
}

/// Per-sample split inside every task; each side keeps at least one sample.
pub fn split_tasks<R: Rng + ?Sized>(tasks: &[Task], fraction: f64, rng: &mut R) -> Result<(Vec<Task>, Vec<Task>)> {
    check_fraction(fraction)?;
    let mut train = Vec::with_capacity(tasks.len());
    let mut test = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let d = task.samples();
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "task {t} has {d} sample(s), cannot split"
            )));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let cut = ((fraction * d as f64).round() as usize).clamp(1, d - 1);
        let pick = |rows: &[usize]| {
            let x = task.x.select_rows(rows);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&k| task.y[k]));
            Task::new(x, y)
        };
        train.push(pick(&order[..cut])?);
        test.push(pick(&order[cut..])?);
    }
    Ok((train, test))
}

/// Subtracts the training mean from every training and test value and
/// records it in `offset`. Returns the mean.
pub fn center_mc(instance: &mut McInstance) -> Result<f64> {
    if instance.train.is_empty() {
        return Err(Error::Empty("no training entries to center"));
    }
    let mean = instance.train.iter().map(|e| e.value).sum::<f64>() / instance.train.len() as f64;
    for e in instance.train.iter_mut().chain(instance.test.iter_mut()) {
        e.value -= mean;
    }
    instance.offset += mean;
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{mtl_cost, mtl_inner_solve};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(m: usize, n: usize, r: usize, os: f64, test_size: usize) -> McParams {
        McParams {
            m,
            n,
            r,
            os,
            noise_sd: 0.0,
            test_size,
        }
    }

    fn positions(entries: &[Entry]) -> HashSet<(usize, usize)> {
        entries.iter().map(|e| (e.row, e.col)).collect()
    }

    #[test]
    fn observed_count_formula() {
        // dof = 10·2 + 20·2 − 4 = 56
        assert_eq!(observed_count(10, 20, 2, 1.0), 56);
        assert_eq!(observed_count(10, 20, 2, 2.5), 140);
        let inst = gen_mc(&params(10, 20, 2, 2.5, 10), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(inst.train.len(), 140);
        assert_eq!(inst.test.len(), 10);
    }

    #[test]
    fn oversampling_beyond_matrix_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(gen_mc(&params(10, 20, 2, 4.0, 0), &mut rng).is_err());
        assert!(gen_mc(&params(10, 20, 2, 3.0, 100), &mut rng).is_err());
        assert!(gen_mc(&params(10, 20, 2, 0.5, 0), &mut rng).is_err());
    }

    #[test]
    fn noiseless_entries_are_rank_r_values() {
        let inst = gen_mc(&params(10, 20, 2, 2.0, 20), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (a, b) = inst.factors.as_ref().unwrap();
        let dense = a * b.transpose();
        assert_eq!(dense.rank(1e-9), 2);
        for e in inst.train.iter().chain(&inst.test) {
            assert!((e.value - dense[(e.row, e.col)]).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_train_clean_test() {
        let mut p = params(30, 40, 3, 2.0, 50);
        p.noise_sd = 0.1;
        let inst = gen_mc(&p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dense = inst.dense_truth().unwrap();
        let noise: Vec<f64> = inst.train.iter().map(|e| e.value - dense[(e.row, e.col)]).collect();
        let sd = (noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.02, "noise sd {sd}");
        assert!(inst.test.iter().all(|e| e.value == dense[(e.row, e.col)]));
    }

    #[test]
    fn test_set_disjoint_from_training() {
        for seed in 0..100 {
            let inst = gen_mc(&params(12, 15, 2, 2.0, 40), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let train = positions(&inst.train);
            assert_eq!(train.len(), inst.train.len());
            assert!(positions(&inst.test).is_disjoint(&train));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let p = params(20, 30, 2, 3.0, 10);
        let a = gen_mc(&p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_mc(&p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mp = MtlParams {
            tasks: 5,
            m: 8,
            r: 2,
            d_min: 3,
            d_max: 6,
            noise_sd: 0.0,
        };
        assert_eq!(
            gen_mtl(&mp, &mut ChaCha8Rng::seed_from_u64(9)).unwrap(),
            gen_mtl(&mp, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
        );
    }

    fn singular_values(inst: &McInstance) -> Vec<f64> {
        let mut s: Vec<f64> = inst.dense_truth().unwrap().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    }

    #[test]
    fn illcond_spectrum_ratio_and_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = gen_mc_illcond(&params(40, 60, 5, 2.0, 0), 500.0, &mut rng).unwrap();
        let s = singular_values(&inst);
        assert!((s[0] / s[4] - 500.0).abs() / 500.0 < 1e-10);
        let ratios: Vec<f64> = s[..5].windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-9);
        }
        assert!(s[5] < 1e-9 * s[0]);

        let flat = gen_mc_illcond(&params(40, 60, 3, 2.0, 0), 1.0, &mut rng).unwrap();
        let s = singular_values(&flat);
        assert!((s[0] - s[2]).abs() < 1e-9 * s[0]);

        let spectrum = illcond_spectrum(500, 5000, 5, 500.0).unwrap();
        assert!((spectrum[0] / spectrum[4] - 500.0).abs() < 1e-10);
        assert!(illcond_spectrum(10, 10, 1, 2.0).is_err());
        assert!(illcond_spectrum(10, 10, 1, 1.0).is_ok());
        assert!(illcond_spectrum(10, 10, 3, 0.5).is_err());
    }

    #[test]
    fn block_size_examples() {
        assert_eq!(
            block_sizes(100_000, 6).unwrap(),
            vec![16_667, 16_667, 16_667, 16_667, 16_666, 16_666]
        );
        assert_eq!(block_sizes(1000, 6).unwrap(), vec![167, 167, 167, 167, 166, 166]);
        assert_eq!(block_sizes(7, 7).unwrap(), vec![1; 7]);
        assert!(block_sizes(5, 6).is_err());
        assert!(block_sizes(5, 0).is_err());
    }

    #[test]
    fn column_partition_round_trip() {
        let inst = gen_mc(&params(15, 23, 2, 2.0, 30), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let parts = partition_columns(&inst, 4, 0.0).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shard.n_cols()).collect();
        assert_eq!(sizes, block_sizes(23, 4).unwrap());
        let mut train = HashSet::new();
        let mut test = HashSet::new();
        for p in &parts {
            for e in p.shard.entries() {
                assert!(e.col < p.shard.n_cols());
                train.insert((e.row, e.col + p.col_offset, e.value.to_bits()));
            }
            for e in &p.test {
                assert!(e.col < p.shard.n_cols());
                test.insert((e.row, e.col + p.col_offset, e.value.to_bits()));
            }
        }
        let expect = |s: &[Entry]| {
            s.iter()
                .map(|e| (e.row, e.col, e.value.to_bits()))
                .collect::<HashSet<_>>()
        };
        assert_eq!(train, expect(&inst.train));
        assert_eq!(test, expect(&inst.test));

        let single = partition_columns(&inst, 1, 0.0).unwrap();
        assert_eq!(
            single[0].shard.entries(),
            McShard::new(15, 23, inst.train.clone(), 0.0).unwrap().entries()
        );
        assert!(partition_columns(&inst, 24, 0.0).is_err());
    }

    #[test]
    fn mtl_generator_properties() {
        let p = MtlParams {
            tasks: 30,
            m: 12,
            r: 3,
            d_min: 4,
            d_max: 9,
            noise_sd: 0.0,
        };
        let inst = gen_mtl(&p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(inst.tasks.len(), 30);
        assert!(inst
            .tasks
            .iter()
            .all(|t| (4..=9).contains(&t.samples()) && t.x.ncols() == 12));
        let truth = inst.truth.clone().unwrap();
        let group = TaskGroup::new(12, inst.tasks.clone(), 0.0).unwrap();
        let sol = mtl_inner_solve(&truth, &group).unwrap();
        assert!(mtl_cost(&truth, &group, &sol).unwrap() < 1e-20);

        let defaults = MtlParams::default();
        assert_eq!(
            (defaults.tasks, defaults.m, defaults.r, defaults.d_min, defaults.d_max),
            (1000, 100, 5, 10, 50)
        );
        assert!(gen_mtl(&MtlParams { d_min: 0, ..p }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(gen_mtl(&MtlParams { d_min: 10, ..p }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(gen_mtl(&MtlParams { r: 13, ..p }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn task_partition() {
        let p = MtlParams {
            tasks: 1000,
            m: 4,
            r: 1,
            d_min: 1,
            d_max: 2,
            noise_sd: 0.0,
        };
        let inst = gen_mtl(&p, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let groups = partition_tasks(&inst.tasks, 4, 6, 0.1).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.tasks().len()).collect();
        assert_eq!(sizes, vec![167, 167, 167, 167, 166, 166]);
        let rejoined: Vec<Task> = groups.iter().flat_map(|g| g.tasks().iter().cloned()).collect();
        assert_eq!(rejoined, inst.tasks);
        let singletons = partition_tasks(&inst.tasks[..10], 4, 10, 0.1).unwrap();
        assert!(singletons.iter().all(|g| g.tasks().len() == 1));
        assert!(partition_tasks(&inst.tasks[..10], 4, 11, 0.1).is_err());
    }

    #[test]
    fn triplet_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.txt");
        let inst = gen_mc(&params(9, 13, 2, 2.0, 0), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mut entries = inst.train.clone();
        entries[0].value = f64::MIN_POSITIVE;
        entries[1].value = -1.0 / 3.0;
        write_mc_triplets(&path, 9, 13, &entries).unwrap();
        let loaded = load_mc_triplets(&path).unwrap();
        assert_eq!((loaded.m, loaded.n), (9, 13));
        assert_eq!(loaded.train.len(), entries.len());
        for (a, b) in loaded.train.iter().zip(&entries) {
            assert_eq!((a.row, a.col, a.value.to_bits()), (b.row, b.col, b.value.to_bits()));
        }
    }

    fn load_str(contents: &str) -> Result<McInstance> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        fs::write(&path, contents).unwrap();
        load_mc_triplets(&path)
    }

    #[test]
    fn triplet_errors_carry_line_numbers() {
        let line_of = |r: Result<McInstance>| match r {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        };
        assert_eq!(line_of(load_str("3 3\n1 1 2.0\n1 x 1\n")), 3);
        assert_eq!(line_of(load_str("3 3\n1 1 2.0\n2 2 1\n1 1 5\n")), 4);
        assert_eq!(line_of(load_str("3 3\n4 1 2.0\n")), 2);
        assert_eq!(line_of(load_str("3 3\n0 1 2.0\n")), 2);
        assert_eq!(line_of(load_str("3\n")), 1);
        assert_eq!(line_of(load_str("3 3\n1 1\n")), 2);
        assert!(matches!(
            load_mc_triplets(Path::new("/nonexistent/ratings.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mtl_files_round_trip() {
        let p = MtlParams {
            tasks: 3,
            m: 5,
            r: 2,
            d_min: 2,
            d_max: 4,
            noise_sd: 0.1,
        };
        let inst = gen_mtl(&p, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (t, task) in inst.tasks.iter().enumerate() {
            write_mtl_task(&dir.path().join(format!("task{t:03}.txt")), task).unwrap();
        }
        let loaded = load_mtl_dir(dir.path()).unwrap();
        assert_eq!(loaded.m, 5);
        assert_eq!(loaded.tasks, inst.tasks);

        fs::write(dir.path().join("task999.txt"), "2 5\n1 2 3 4 5 6\n").unwrap();
        assert!(matches!(load_mtl_dir(dir.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn split_sizes_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let entries: Vec<Entry> = (0..100).map(|k| Entry::new(k % 10, k / 10, 3.0 + k as f64)).collect();
        let inst = McInstance {
            m: 10,
            n: 10,
            r_true: None,
            factors: None,
            train: entries,
            test: Vec::new(),
            noise_sd: 0.0,
            offset: 0.0,
        };
        let mut split = split_train_test(&inst, 0.8, &mut rng).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (80, 20));
        assert!(positions(&split.train).is_disjoint(&positions(&split.test)));
        let before: Vec<f64> = split.test.iter().map(|e| e.value).collect();
        let mean = center_mc(&mut split).unwrap();
        let centered_mean = split.train.iter().map(|e| e.value).sum::<f64>() / 80.0;
        assert!(centered_mean.abs() <= 1e-12);
        assert_eq!(split.offset, mean);
        for (e, b) in split.test.iter().zip(before) {
            assert_eq!(e.value, b - mean);
        }
        assert!(split_train_test(&inst, 1.0, &mut rng).is_err());
        assert!(split_train_test(&inst, 0.0, &mut rng).is_err());
    }

    #[test]
    fn task_split_keeps_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = MtlParams {
            tasks: 20,
            m: 6,
            r: 2,
            d_min: 2,
            d_max: 30,
            noise_sd: 0.0,
        };
        let inst = gen_mtl(&p, &mut rng).unwrap();
        let (train, test) = split_tasks(&inst.tasks, 0.8, &mut rng).unwrap();
        for ((tr, te), orig) in train.iter().zip(&test).zip(&inst.tasks) {
            assert_eq!(tr.samples() + te.samples(), orig.samples());
            assert!(tr.samples() >= 1 && te.samples() >= 1);
        }
    }
}
