//! Command-line front end: flags are layered over an optional JSON config,
//! one study runs, and its table and summary are written to `--out`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use chaosens::estimators::{default_fd_epsilon, fd_sensitivity, FdTarget};
use chaosens::extrapolation::{ode_reference, ode_reference_sensitivity, rr_estimate, RRScheme};
use chaosens::harness::{
    lambda_star_estimate, mc_run, mc_run_snapshots, variance_vs_t_study, weak_convergence_study,
    ExperimentConfig, FitResult, ModelName, RunOptions,
};
use chaosens::integrate::derive_seed;
use chaosens::mlmc::mlmc_driver;
use chaosens::{
    Estimator, EstimatorKind, Lorenz, NoiseStream, OrnsteinUhlenbeck, SdeModel, StepPolicy,
};

#[derive(Debug, Parser)]
#[command(
    name = "chaosens",
    version,
    about = "Sensitivity estimators for chaotic SDEs"
)]
pub struct Cli {
    /// Master seed; every path, level and volatility derives its stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo paths per estimate.
    #[arg(long, global = true)]
    pub paths: Option<u64>,
    /// Directory receiving `<command>.csv` and `<command>.json`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// JSON file with experiment settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// `lorenz` or `ou`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// OU mean-reversion speed.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Observed Lorenz component (0, 1 or 2).
    #[arg(long)]
    pub component: Option<usize>,
    /// Uniform timestep.
    #[arg(long, conflicts_with = "adaptive")]
    pub h: Option<f64>,
    /// Drift-adaptive timestep with base step DELTA.
    #[arg(long, value_name = "DELTA")]
    pub adaptive: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimatorArgs {
    /// value, standard, malliavin, isps-theta, isps-sigma or isps-x0.
    #[arg(long)]
    pub estimator: Option<EstimatorKind>,
    /// Spring constant S.
    #[arg(long)]
    pub spring: Option<f64>,
    /// Initial-state direction for isps-x0, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo mean of the observable over a time grid.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "T")]
        t_end: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<f64>>,
    },
    /// One sensitivity estimate at horizon T.
    Sens {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long = "T")]
        t_end: Option<f64>,
        /// Use the common-random-number finite difference instead (parameter chosen by --estimator).
        #[arg(long)]
        fd: bool,
        #[arg(long)]
        fd_eps: Option<f64>,
    },
    /// Estimator variance against the horizon T.
    VarianceStudy {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<f64>>,
    },
    /// Exponential relaxation speed of the mean towards equilibrium.
    LambdaStar {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Weak error against the deterministic limit across volatilities.
    WeakSigma {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_delimiter = ',')]
        sigma_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta_grid: Option<Vec<f64>>,
        /// Cap on the σ-dependent horizon.
        #[arg(long)]
        t_max: Option<f64>,
        /// Deterministic reference value (computed from the ODE if omitted).
        #[arg(long, allow_hyphen_values = true)]
        reference: Option<f64>,
    },
    /// Multilevel Monte Carlo with spring coupling between levels.
    Mlmc {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Target root-mean-square error.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        h0: Option<f64>,
        #[arg(long = "T")]
        t_end: Option<f64>,
        /// Couple levels by shared noise only.
        #[arg(long)]
        no_change_of_measure: bool,
        #[arg(long)]
        max_levels: Option<usize>,
        #[arg(long)]
        n_init: Option<u64>,
    },
    /// Richardson–Romberg extrapolation in the volatility.
    Rr {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long)]
        order: Option<usize>,
        /// `auto` (horizon rule on the base volatility) or a number.
        #[arg(long = "T")]
        t_end: Option<String>,
        /// Also write the per-volatility table.
        #[arg(long)]
        per_sigma: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Sens { .. } => "sens",
            Command::VarianceStudy { .. } => "variance-study",
            Command::LambdaStar { .. } => "lambda-star",
            Command::WeakSigma { .. } => "weak-sigma",
            Command::Mlmc { .. } => "mlmc",
            Command::Rr { .. } => "rr",
        }
    }

    fn model_args(&self) -> &ModelArgs {
        match self {
            Command::Simulate { model, .. }
            | Command::Sens { model, .. }
            | Command::VarianceStudy { model, .. }
            | Command::LambdaStar { model, .. }
            | Command::WeakSigma { model, .. }
            | Command::Mlmc { model, .. }
            | Command::Rr { model, .. } => model,
        }
    }

    fn estimator_args(&self) -> Option<&EstimatorArgs> {
        match self {
            Command::Sens { est, .. }
            | Command::VarianceStudy { est, .. }
            | Command::WeakSigma { est, .. }
            | Command::Mlmc { est, .. }
            | Command::Rr { est, .. } => Some(est),
            _ => None,
        }
    }
}

/// Files produced by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub command: &'static str,
    pub summary: Value,
    pub csv: Option<String>,
    /// Extra table (`rr --per-sigma`).
    pub extra_csv: Option<(String, String)>,
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Layers the command-line flags over `cfg`.
pub fn apply_flags(cli: &Cli, mut cfg: ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.paths {
        cfg.paths = n;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.display().to_string();
    }
    let m = cli.command.model_args();
    if let Some(name) = &m.model {
        cfg.model = match name.as_str() {
            "lorenz" => ModelName::Lorenz,
            "ou" => ModelName::Ou,
            other => bail!("unknown model `{other}` (expected lorenz or ou)"),
        };
    }
    set(&mut cfg.theta, m.theta);
    set(&mut cfg.sigma, m.sigma);
    set(&mut cfg.kappa, m.kappa);
    set(&mut cfg.component, m.component);
    if let Some(x0) = &m.x0 {
        cfg.x0 = x0.clone();
    }
    if let Some(h) = m.h {
        cfg.policy = StepPolicy::uniform(h)?;
    }
    if let Some(d) = m.adaptive {
        cfg.policy = StepPolicy::adaptive(d)?;
    }
    if let Some(e) = cli.command.estimator_args() {
        set(&mut cfg.estimator, e.estimator);
        if let Some(s) = e.spring {
            cfg.spring = s;
            cfg.mlmc.spring = s;
        }
        if let Some(d) = &e.direction {
            cfg.direction = d.clone();
        }
    }
    match &cli.command {
        Command::Simulate { t_end, t_grid, .. } => {
            if let Some(g) = t_grid {
                cfg.t_grid = g.clone();
            }
            if let Some(t) = t_end {
                cfg.t_end = *t;
                cfg.t_grid = vec![*t];
            }
        }
        Command::Sens { t_end, .. } => set(&mut cfg.t_end, *t_end),
        Command::VarianceStudy { t_grid, .. } => {
            if let Some(g) = t_grid {
                cfg.t_grid = g.clone();
            }
        }
        Command::LambdaStar {
            t_max,
            window,
            spacing,
            ..
        } => {
            set(&mut cfg.lambda_t_max, *t_max);
            set(&mut cfg.lambda_window, *window);
            set(&mut cfg.lambda_spacing, *spacing);
        }
        Command::WeakSigma {
            sigma_grid,
            theta_grid,
            t_max,
            reference,
            ..
        } => {
            if let Some(g) = sigma_grid {
                cfg.sigma_grid = g.clone();
            }
            if let Some(g) = theta_grid {
                cfg.theta_grid = g.clone();
            }
            set(&mut cfg.horizon.t_max, *t_max);
            if reference.is_some() {
                cfg.reference = *reference;
            }
        }
        Command::Mlmc {
            eps,
            h0,
            t_end,
            no_change_of_measure,
            max_levels,
            n_init,
            ..
        } => {
            set(&mut cfg.mlmc.target_rmse, *eps);
            set(&mut cfg.mlmc.h0, *h0);
            set(&mut cfg.t_end, *t_end);
            set(&mut cfg.mlmc.max_levels, *max_levels);
            set(&mut cfg.mlmc.n_init, *n_init);
            if *no_change_of_measure {
                cfg.mlmc.change_of_measure = false;
            }
        }
        Command::Rr { order, t_end, .. } => {
            set(&mut cfg.rr_order, *order);
            match t_end.as_deref() {
                None | Some("auto") => {}
                Some(v) => {
                    cfg.t_end = v
                        .parse()
                        .with_context(|| format!("--T expects `auto` or a number, got `{v}`"))?
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Resolves the configuration and runs the study; writes nothing.
pub fn run(cli: &Cli) -> anyhow::Result<Report> {
    let cfg = apply_flags(cli, load_config(cli.config.as_deref())?)?;
    match cfg.model {
        ModelName::Lorenz => execute::<3, _>(&Lorenz::observing(cfg.component)?, &cfg, cli),
        ModelName::Ou => execute::<1, _>(&OrnsteinUhlenbeck::new(cfg.kappa, cfg.theta)?, &cfg, cli),
    }
}

/// Runs and writes `<out>/<command>.json` (and `.csv`), returning the report.
pub fn run_and_write(cli: &Cli) -> anyhow::Result<Report> {
    let report = run(cli)?;
    let cfg = apply_flags(cli, load_config(cli.config.as_deref())?)?;
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_string_pretty(&report.summary)? + "\n";
    std::fs::write(dir.join(format!("{}.json", report.command)), json)?;
    if let Some(csv) = &report.csv {
        std::fs::write(dir.join(format!("{}.csv", report.command)), csv)?;
    }
    if let Some((name, csv)) = &report.extra_csv {
        std::fs::write(dir.join(name), csv)?;
    }
    Ok(report)
}

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn fit_json(f: &FitResult) -> Value {
    json!({ "slope": f.slope, "intercept": f.intercept, "r2": f.r_squared })
}

fn policy_h(p: &StepPolicy) -> f64 {
    p.h_max()
}

struct Summary {
    map: Map<String, Value>,
}

impl Summary {
    fn new(command: &str, cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let mut params = serde_json::to_value(cfg)?;
        if let Value::Object(m) = &mut params {
            m.remove("out_dir");
        }
        let mut map = Map::new();
        map.insert("command".into(), command.into());
        map.insert("params".into(), params);
        map.insert("seed".into(), cfg.seed.into());
        map.insert("fit".into(), Value::Null);
        Ok(Self { map })
    }

    fn core(mut self, estimate: f64, stderr: f64, cost: u64) -> Self {
        self.map.insert("estimate".into(), json!(estimate));
        self.map.insert("stderr".into(), json!(stderr));
        self.map.insert("total_cost_steps".into(), cost.into());
        self
    }

    fn with(mut self, key: &str, v: impl Serialize) -> Self {
        self.map
            .insert(key.into(), serde_json::to_value(v).expect("serializable"));
        self
    }

    fn done(self) -> Value {
        Value::Object(self.map)
    }
}

fn execute<const M: usize, Mo: SdeModel<M>>(
    model: &Mo,
    cfg: &ExperimentConfig,
    cli: &Cli,
) -> anyhow::Result<Report> {
    let params = cfg.params::<M>()?;
    let est = cfg.estimator_for::<M>()?;
    let command = cli.command.name();
    let summary = Summary::new(command, cfg)?;
    let mut extra_csv = None;
    let (summary, csv) =
        match &cli.command {
            Command::Simulate { .. } => {
                let runs = mc_run_snapshots(
                    model,
                    &params,
                    &Estimator::value(),
                    &cfg.t_grid,
                    &cfg.policy,
                    cfg.paths,
                    cfg.seed,
                    RunOptions::for_kind(EstimatorKind::Value),
                )?;
                #[derive(Serialize)]
                struct Row {
                    t: f64,
                    mean: f64,
                    variance: f64,
                    stderr: f64,
                    n: u64,
                }
                let last = runs.last().expect("non-empty grid");
                let csv = to_csv(runs.iter().map(|r| Row {
                    t: r.t,
                    mean: r.mean(),
                    variance: r.variance(),
                    stderr: r.stderr(),
                    n: r.stats.count(),
                }))?;
                (
                    summary.core(last.mean(), last.stderr(), last.cost),
                    Some(csv),
                )
            }
            Command::Sens { fd, fd_eps, .. } => {
                let (estimate, stderr, variance, n, cost) = if *fd {
                    let target = match cfg.estimator {
                        EstimatorKind::IsPsSigma => FdTarget::Sigma,
                        EstimatorKind::IsPsX0 => FdTarget::X0(est.direction),
                        _ => FdTarget::Theta,
                    };
                    let eps =
                        fd_eps.unwrap_or_else(|| default_fd_epsilon(target.magnitude(&params)));
                    let r = fd_sensitivity(
                        model,
                        &params,
                        cfg.t_end,
                        &cfg.policy,
                        cfg.seed,
                        eps,
                        cfg.paths,
                        target,
                    )?;
                    (r.estimate, r.stderr, r.variance, r.n, r.cost)
                } else {
                    let r = mc_run(
                        model,
                        &params,
                        &est,
                        cfg.t_end,
                        &cfg.policy,
                        cfg.paths,
                        cfg.seed,
                    )?;
                    (r.mean(), r.stderr(), r.variance(), r.stats.count(), r.cost)
                };
                let s = summary
                    .core(estimate, stderr, cost)
                    .with("variance", variance)
                    .with("n", n)
                    .with("T", cfg.t_end)
                    .with("h", policy_h(&cfg.policy))
                    .with("cost", cost)
                    .with(
                        "method",
                        if *fd {
                            "finite-difference"
                        } else {
                            cfg.estimator.as_str()
                        },
                    );
                (s, None)
            }
            Command::VarianceStudy { .. } => {
                let v = variance_vs_t_study(
                    model,
                    &params,
                    &est,
                    &cfg.t_grid,
                    &cfg.policy,
                    cfg.paths,
                    cfg.seed,
                )?;
                let last = v.rows.last().expect("non-empty grid");
                let s = summary
                    .core(last.mean, last.stderr, v.total_cost)
                    .with("fit", fit_json(&v.fit))
                    .with("transform", v.transform)
                    .with("clamped", v.clamped);
                (s, Some(to_csv(&v.rows)?))
            }
            Command::LambdaStar { .. } => {
                let l = lambda_star_estimate(
                    model,
                    &params,
                    cfg.lambda_t_max,
                    cfg.lambda_spacing,
                    cfg.lambda_window,
                    &cfg.policy,
                    cfg.paths,
                    cfg.seed,
                )?;
                let s = summary
                    .core(l.lambda, l.fit.slope_stderr, l.total_cost)
                    .with("fit", fit_json(&l.fit))
                    .with("noise_floor", l.noise_floor)
                    .with("fit_range", l.fit_range);
                (s, Some(to_csv(&l.rows)?))
            }
            Command::WeakSigma { .. } => {
                let references = match cfg.reference {
                    Some(r) => vec![r; cfg.theta_grid.len()],
                    None => cfg
                        .theta_grid
                        .iter()
                        .map(|&th| deterministic_reference(model, cfg, &params.x0, th))
                        .collect::<anyhow::Result<_>>()?,
                };
                let w = weak_convergence_study(
                    model,
                    &params,
                    &est,
                    &cfg.theta_grid,
                    &cfg.sigma_grid,
                    &references,
                    &cfg.horizon,
                    &cfg.policy,
                    cfg.paths,
                    cfg.seed,
                )?;
                #[derive(Serialize)]
                struct Row {
                    sigma: f64,
                    #[serde(rename = "T")]
                    t: f64,
                    estimate: f64,
                    stderr: f64,
                    weak_error: f64,
                }
                let csv = to_csv(w.rows.iter().map(|r| Row {
                    sigma: r.sigma,
                    t: r.t,
                    estimate: r.estimate,
                    stderr: r.stderr,
                    weak_error: r.weak_error,
                }))?;
                let first = w.rows.first().expect("non-empty grid");
                let mut s = summary
                    .core(first.estimate, first.stderr, w.total_cost)
                    .with("references", &w.references)
                    .with("thetas", &cfg.theta_grid);
                if let Some(f) = w.fits.first() {
                    s = s.with("fit", fit_json(f));
                }
                (s, Some(csv))
            }
            Command::Mlmc { .. } => {
                let r = mlmc_driver(model, &params, &est, cfg.t_end, &cfg.mlmc, cfg.seed)?;
                #[derive(Serialize)]
                struct Row {
                    level: usize,
                    #[serde(rename = "N")]
                    n: u64,
                    mean: f64,
                    variance: f64,
                    cost: u64,
                }
                let csv = to_csv(r.levels.iter().map(|l| Row {
                    level: l.level,
                    n: l.n_samples,
                    mean: l.mean,
                    variance: l.variance,
                    cost: l.cost,
                }))?;
                let s = summary
                    .core(r.estimate, r.stderr, r.total_cost)
                    .with("total_cost", r.total_cost)
                    .with("alpha", r.alpha)
                    .with("beta", r.beta)
                    .with("levels", r.levels.len());
                (s, Some(csv))
            }
            Command::Rr {
                t_end, per_sigma, ..
            } => {
                let scheme = RRScheme::new(cfg.rr_order, cfg.sigma)?;
                let t = match t_end.as_deref() {
                    None | Some("auto") => cfg.horizon.horizon(cfg.sigma)?,
                    Some(_) => cfg.t_end,
                };
                let r = rr_estimate(
                    model,
                    &params,
                    &est,
                    &scheme,
                    t,
                    &cfg.policy,
                    cfg.paths,
                    cfg.seed,
                )?;
                if *per_sigma {
                    #[derive(Serialize)]
                    struct Row {
                        sigma: f64,
                        weight: f64,
                        mean: f64,
                        stderr: f64,
                    }
                    let rows = r.sigmas.iter().zip(&r.weights).zip(&r.rungs).map(
                        |((&sigma, &weight), st)| Row {
                            sigma,
                            weight,
                            mean: st.mean(),
                            stderr: st.stderr(),
                        },
                    );
                    extra_csv = Some(("rr_sigmas.csv".to_string(), to_csv(rows)?));
                }
                let s = summary
                    .core(r.estimate, r.stderr, r.total_cost)
                    .with("order", r.order)
                    .with("sigmas", &r.sigmas)
                    .with("weights", &r.weights)
                    .with("total_cost", r.total_cost)
                    .with("T", t);
                (s, None)
            }
        };
    Ok(Report {
        command,
        summary: summary.done(),
        csv,
        extra_csv,
    })
}

/// Number of initial states averaged for the deterministic sensitivity.
const ODE_SENSITIVITY_STATES: u64 = 20;

/// Time average of the observable along the ODE (plain value), or its
/// θ-derivative averaged over perturbed initial states.
fn deterministic_reference<const M: usize, Mo: SdeModel<M>>(
    model: &Mo,
    cfg: &ExperimentConfig,
    x0: &[f64; M],
    theta: f64,
) -> anyhow::Result<f64> {
    match cfg.estimator {
        EstimatorKind::Value => Ok(ode_reference(model, theta, *x0, cfg.ode_t_end, cfg.ode_h)?),
        EstimatorKind::StandardPs | EstimatorKind::Malliavin | EstimatorKind::IsPsTheta => {
            let salt = derive_seed(cfg.seed, 0x0DE);
            let states: Vec<[f64; M]> = (0..ODE_SENSITIVITY_STATES)
                .map(|k| {
                    let mut s = NoiseStream::new(salt, k);
                    std::array::from_fn(|i| x0[i] + s.standard_normal())
                })
                .collect();
            let st =
                ode_reference_sensitivity(model, theta, &states, cfg.ode_t_end, cfg.ode_h, 1.0)?;
            Ok(st.mean())
        }
        k => bail!("no deterministic reference for the {k} estimator; pass --reference"),
    }
}
