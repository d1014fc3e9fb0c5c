//! Monte Carlo driver, statistics, regression fits and the experiment studies.
//!
//! Paths are split into fixed chunks of consecutive indices. Chunks may run on
//! any worker, but their statistics are always merged in index order, so a
//! result depends only on the seed and never on the thread count.

pub mod fit;
pub mod stats;
pub mod studies;

use rayon::prelude::*;
use serde::Serialize;

pub use fit::{fit_loglinear, FitResult, Transform};
pub use stats::{combined_stderr, MCStats};
pub use studies::*;

use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind};
use crate::integrate::{simulate_augmented_snapshots, NoiseStream, StepPolicy};
use crate::models::{ModelParams, SdeModel};

const CHUNK: u64 = 512;

/// Partial results that combine associatively.
pub trait Accumulator: Send {
    fn merge(&mut self, other: Self);
}

impl Accumulator for MCStats {
    fn merge(&mut self, other: Self) {
        MCStats::merge(self, &other);
    }
}

impl<A: Accumulator, B: Accumulator> Accumulator for (A, B) {
    fn merge(&mut self, other: Self) {
        self.0.merge(other.0);
        self.1.merge(other.1);
    }
}

/// Runs `body(path_index, acc)` for every index in `0..n_paths` and merges the
/// per-chunk accumulators in canonical order.
pub fn parallel_accumulate<A, I, F>(n_paths: u64, init: I, body: F) -> A
where
    A: Accumulator,
    I: Fn() -> A + Sync,
    F: Fn(u64, &mut A) + Sync,
{
    let chunks = n_paths.div_ceil(CHUNK);
    let parts: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_paths) {
                body(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in parts {
        total.merge(p);
    }
    total
}

/// Statistics of one estimator at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McRun {
    pub t: f64,
    pub stats: MCStats,
    /// Paths that went non-finite before `t`, or whose value exceeded the clamp.
    pub blowups: u64,
    pub clamped: u64,
    /// Timesteps consumed by the paths counted in `stats`.
    pub cost: u64,
}

impl McRun {
    pub fn mean(&self) -> f64 {
        self.stats.mean()
    }
    pub fn variance(&self) -> f64 {
        self.stats.variance()
    }
    pub fn stderr(&self) -> f64 {
        self.stats.stderr()
    }
}

#[derive(Debug, Clone)]
struct SnapshotAcc {
    stats: Vec<MCStats>,
    blowups: Vec<u64>,
    clamped: Vec<u64>,
    cost: Vec<u64>,
}

impl SnapshotAcc {
    fn new(k: usize) -> Self {
        Self {
            stats: vec![MCStats::new(); k],
            blowups: vec![0; k],
            clamped: vec![0; k],
            cost: vec![0; k],
        }
    }
}

impl Accumulator for SnapshotAcc {
    fn merge(&mut self, other: Self) {
        for k in 0..self.stats.len() {
            self.stats[k].merge(&other.stats[k]);
            self.blowups[k] += other.blowups[k];
            self.clamped[k] += other.clamped[k];
            self.cost[k] += other.cost[k];
        }
    }
}

/// Options for [`mc_run_snapshots`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Values with magnitude above this are clamped to it and counted.
    pub clamp: Option<f64>,
    /// Tolerate any number of non-finite paths (reported, not fatal).
    pub allow_blowups: bool,
}

impl RunOptions {
    pub fn for_kind(kind: EstimatorKind) -> Self {
        Self {
            clamp: None,
            allow_blowups: kind == EstimatorKind::StandardPs,
        }
    }
}

/// One Monte Carlo run recording the estimator at every time of the grid.
///
/// Path `i` uses `NoiseStream::new(seed, i)`, so each horizon's statistics are
/// those of independent runs stopped at that horizon (correlated across horizons).
#[allow(clippy::too_many_arguments)]
pub fn mc_run_snapshots<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    times: &[f64],
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
    options: RunOptions,
) -> Result<Vec<McRun>> {
    if n_paths < 2 {
        return Err(invalid("paths", "need at least 2 paths"));
    }
    estimator.validate(params)?;
    crate::integrate::validate_times(times)?;
    let k = times.len();
    let acc = parallel_accumulate(
        n_paths,
        || SnapshotAcc::new(k),
        |i, acc| {
            let mut noise = NoiseStream::new(seed, i);
            let mut reached = 0;
            let _ = simulate_augmented_snapshots(
                model,
                params,
                estimator,
                times,
                policy,
                &mut noise,
                |j, st| {
                    let mut value = estimator.evaluate_state(model, st);
                    if let Some(c) = options.clamp {
                        if value.abs() > c {
                            value = c.copysign(value);
                            acc.clamped[j] += 1;
                            acc.blowups[j] += 1;
                        }
                    }
                    acc.stats[j].push(value);
                    acc.cost[j] += st.steps;
                    reached = j + 1;
                },
            );
            for j in reached..k {
                acc.blowups[j] += 1;
            }
        },
    );
    let nonfinite = |j: usize| acc.blowups[j] - acc.clamped[j];
    if !options.allow_blowups {
        if let Some(j) = (0..k).find(|&j| nonfinite(j) * 100 > n_paths) {
            return Err(Error::TooManyBlowups {
                failed: nonfinite(j) as usize,
                total: n_paths as usize,
            });
        }
    }
    Ok((0..k)
        .map(|j| McRun {
            t: times[j],
            stats: acc.stats[j],
            blowups: acc.blowups[j],
            clamped: acc.clamped[j],
            cost: acc.cost[j],
        })
        .collect())
}

/// Runs `n_paths` samples with path indices `0..n_paths` and merges their statistics.
///
/// Fails if more than 1% of the paths blow up, except for the standard
/// pathwise estimator where the blow-up count is itself the result.
pub fn mc_run<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
) -> Result<McRun> {
    let runs = mc_run_snapshots(
        model,
        params,
        estimator,
        &[t_end],
        policy,
        n_paths,
        seed,
        RunOptions::for_kind(estimator.kind),
    )?;
    Ok(runs[0])
}
