//! Per-path sensitivity samples.
//!
//! | kind          | variation `v`                              | value                                  |
//! |---------------|--------------------------------------------|----------------------------------------|
//! | `StandardPs`  | `v += (γ + J v) h`, `v₀ = 0`               | `⟨∇φ(X_T), v_T⟩`                       |
//! | `Malliavin`   | none                                       | `φ(X_T) Σ ⟨γ(X_n)/σ, ΔW_n⟩`            |
//! | `IsPsTheta`   | `v += (γ + (J − S) v) h`, `v₀ = 0`         | `⟨∇φ, v_T⟩ + φ(X_T) Σ (S/σ)⟨v_n, ΔW_n⟩` |
//! | `IsPsSigma`   | `v += (J − S) v h + ΔW`, `v₀ = 0`          | as `IsPsTheta`                         |
//! | `IsPsX0`      | `v += (J − S) v h`, `v₀ = direction`       | as `IsPsTheta`                         |
//!
//! The spring `S` makes the variation contractive; the Itô sum undoes its
//! effect in expectation (a Girsanov reweighting differentiated at zero
//! perturbation). All integrands are evaluated at the left end of each step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::{parallel_accumulate, MCStats};
use crate::integrate::{
    simulate_augmented, AugmentedPathState, BrownianSource, NoiseStream, StepPolicy,
};
use crate::linalg::{dot, Vector};
use crate::models::{ModelParams, SdeModel};

/// Spring used for the Lorenz experiments when none is configured.
pub const DEFAULT_SPRING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// The observable `φ(X_T)` itself, no sensitivity.
    Value,
    #[serde(rename = "standard", alias = "standard-ps")]
    StandardPs,
    Malliavin,
    #[serde(rename = "isps-theta", alias = "is-ps-theta")]
    IsPsTheta,
    #[serde(rename = "isps-sigma", alias = "is-ps-sigma")]
    IsPsSigma,
    #[serde(rename = "isps-x0", alias = "is-ps-x0")]
    IsPsX0,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        Self::Value,
        Self::StandardPs,
        Self::Malliavin,
        Self::IsPsTheta,
        Self::IsPsSigma,
        Self::IsPsX0,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Value => "value",
            Self::StandardPs => "standard",
            Self::Malliavin => "malliavin",
            Self::IsPsTheta => "isps-theta",
            Self::IsPsSigma => "isps-sigma",
            Self::IsPsX0 => "isps-x0",
        }
    }

    pub fn uses_spring(self) -> bool {
        matches!(self, Self::IsPsTheta | Self::IsPsSigma | Self::IsPsX0)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid("estimator", format!("unknown estimator `{s}`")))
    }
}

/// An estimator kind with its spring and, for `IsPsX0`, the perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimator<const M: usize> {
    pub kind: EstimatorKind,
    pub spring: f64,
    pub direction: Vector<M>,
}

impl<const M: usize> Estimator<M> {
    /// `direction` defaults to all ones; `spring` is ignored by kinds without one.
    pub fn new(kind: EstimatorKind, spring: f64) -> Self {
        Self {
            kind,
            spring: if kind.uses_spring() { spring } else { 0.0 },
            direction: [1.0; M],
        }
    }

    pub fn value() -> Self {
        Self::new(EstimatorKind::Value, 0.0)
    }

    pub fn standard_ps() -> Self {
        Self::new(EstimatorKind::StandardPs, 0.0)
    }

    pub fn malliavin() -> Self {
        Self::new(EstimatorKind::Malliavin, 0.0)
    }

    pub fn is_ps_theta(spring: f64) -> Self {
        Self::new(EstimatorKind::IsPsTheta, spring)
    }

    pub fn is_ps_sigma(spring: f64) -> Self {
        Self::new(EstimatorKind::IsPsSigma, spring)
    }

    pub fn is_ps_x0(spring: f64, direction: Vector<M>) -> Self {
        Self {
            direction,
            ..Self::new(EstimatorKind::IsPsX0, spring)
        }
    }

    pub fn initial_variation(&self) -> Vector<M> {
        match self.kind {
            EstimatorKind::IsPsX0 => self.direction,
            _ => [0.0; M],
        }
    }

    /// Run-entry preconditions: `σ > 0` for weighted kinds, `S > 0` for spring kinds.
    pub fn validate(&self, params: &ModelParams<M>) -> Result<()> {
        match self.kind {
            EstimatorKind::Value | EstimatorKind::StandardPs => Ok(()),
            EstimatorKind::Malliavin => params.require_positive_sigma(),
            _ => {
                if !(self.spring > 0.0) || !self.spring.is_finite() {
                    return Err(invalid(
                        "spring",
                        format!("must be > 0, got {}", self.spring),
                    ));
                }
                params.require_positive_sigma()
            }
        }
    }

    /// Estimator value from terminal state, variation and Itô sum.
    #[inline]
    pub fn evaluate<Mo: SdeModel<M> + ?Sized>(
        &self,
        model: &Mo,
        x: &Vector<M>,
        v: &Vector<M>,
        ito_acc: f64,
    ) -> f64 {
        match self.kind {
            EstimatorKind::Value => model.observable(x),
            EstimatorKind::StandardPs => dot(&model.observable_grad(x), v),
            EstimatorKind::Malliavin => model.observable(x) * ito_acc,
            _ => dot(&model.observable_grad(x), v) + model.observable(x) * ito_acc,
        }
    }

    #[inline]
    pub fn evaluate_state<Mo: SdeModel<M> + ?Sized>(
        &self,
        model: &Mo,
        state: &AugmentedPathState<M>,
    ) -> f64 {
        self.evaluate(model, &state.x, &state.v, state.ito_acc)
    }
}

/// One path's estimator value and the number of timesteps it consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSample {
    pub value: f64,
    pub cost: u64,
}

/// Validates `estimator` and simulates one sample.
pub fn sample_path<const M: usize, Mo: SdeModel<M> + ?Sized, N: BrownianSource>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    policy: &StepPolicy,
    noise: &mut N,
) -> Result<EstimatorSample> {
    estimator.validate(params)?;
    let state = simulate_augmented(model, params, estimator, t_end, policy, noise)?;
    Ok(EstimatorSample {
        value: estimator.evaluate_state(model, &state),
        cost: state.steps.max(1),
    })
}

pub fn standard_ps_path<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    stream: &mut NoiseStream,
) -> Result<EstimatorSample> {
    sample_path(
        model,
        params,
        &Estimator::standard_ps(),
        t_end,
        policy,
        stream,
    )
}

pub fn malliavin_path<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    stream: &mut NoiseStream,
) -> Result<EstimatorSample> {
    sample_path(
        model,
        params,
        &Estimator::malliavin(),
        t_end,
        policy,
        stream,
    )
}

pub fn is_ps_theta_path<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    stream: &mut NoiseStream,
    spring: f64,
) -> Result<EstimatorSample> {
    sample_path(
        model,
        params,
        &Estimator::is_ps_theta(spring),
        t_end,
        policy,
        stream,
    )
}

pub fn is_ps_sigma_path<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    stream: &mut NoiseStream,
    spring: f64,
) -> Result<EstimatorSample> {
    sample_path(
        model,
        params,
        &Estimator::is_ps_sigma(spring),
        t_end,
        policy,
        stream,
    )
}

pub fn is_ps_x0_path<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    stream: &mut NoiseStream,
    spring: f64,
    direction: Vector<M>,
) -> Result<EstimatorSample> {
    sample_path(
        model,
        params,
        &Estimator::is_ps_x0(spring, direction),
        t_end,
        policy,
        stream,
    )
}

/// Parameter perturbed by the finite-difference oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdTarget<const M: usize> {
    Theta,
    Sigma,
    /// Initial state along a direction.
    X0(Vector<M>),
}

impl<const M: usize> FdTarget<M> {
    fn shifted(&self, params: &ModelParams<M>, delta: f64) -> ModelParams<M> {
        match *self {
            Self::Theta => params.with_theta(params.theta + delta),
            Self::Sigma => params.with_sigma(params.sigma + delta),
            Self::X0(dir) => params.with_x0(std::array::from_fn(|i| params.x0[i] + delta * dir[i])),
        }
    }

    /// Magnitude of the perturbed parameter, for the default step size.
    pub fn magnitude(&self, params: &ModelParams<M>) -> f64 {
        match self {
            Self::Theta => params.theta.abs(),
            Self::Sigma => params.sigma.abs(),
            Self::X0(_) => crate::linalg::norm(&params.x0),
        }
    }
}

/// Default central-difference step: 1% of the parameter magnitude, at least 1e-4.
pub fn default_fd_epsilon(magnitude: f64) -> f64 {
    (0.01 * magnitude.abs()).max(1e-4)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub variance: f64,
    pub n: u64,
    pub blowups: u64,
    pub cost: u64,
}

/// Central difference `(F(p + ε/2) − F(p − ε/2)) / ε` with common random numbers:
/// both perturbed runs of path `i` consume `NoiseStream::new(master_seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn fd_sensitivity<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_end: f64,
    policy: &StepPolicy,
    master_seed: u64,
    epsilon: f64,
    n_paths: u64,
    target: FdTarget<M>,
) -> Result<FdEstimate> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid("epsilon", format!("must be > 0, got {epsilon}")));
    }
    if n_paths < 2 {
        return Err(invalid("paths", "need at least 2 paths"));
    }
    let plus = target.shifted(params, 0.5 * epsilon);
    let minus = target.shifted(params, -0.5 * epsilon);
    for p in [&plus, &minus] {
        if !(p.sigma >= 0.0) {
            return Err(invalid("epsilon", "perturbation makes sigma negative"));
        }
    }
    let est = Estimator::value();
    let acc = parallel_accumulate(n_paths, FdAcc::default, |i, acc: &mut FdAcc| {
        let mut s = NoiseStream::new(master_seed, i);
        let hi = simulate_augmented(model, &plus, &est, t_end, policy, &mut s);
        s.reset();
        let lo = simulate_augmented(model, &minus, &est, t_end, policy, &mut s);
        match (hi, lo) {
            (Ok(a), Ok(b)) => {
                acc.stats
                    .push((model.observable(&a.x) - model.observable(&b.x)) / epsilon);
                acc.cost += a.steps + b.steps;
            }
            _ => acc.blowups += 1,
        }
    });
    if acc.blowups * 100 > n_paths {
        return Err(Error::TooManyBlowups {
            failed: acc.blowups as usize,
            total: n_paths as usize,
        });
    }
    Ok(FdEstimate {
        estimate: acc.stats.mean(),
        stderr: acc.stats.stderr(),
        variance: acc.stats.variance(),
        n: acc.stats.count(),
        blowups: acc.blowups,
        cost: acc.cost,
    })
}

#[derive(Debug, Default, Clone)]
struct FdAcc {
    stats: MCStats,
    blowups: u64,
    cost: u64,
}

impl crate::harness::Accumulator for FdAcc {
    fn merge(&mut self, other: Self) {
        self.stats.merge(&other.stats);
        self.blowups += other.blowups;
        self.cost += other.cost;
    }
}
