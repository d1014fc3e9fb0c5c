//! The experiment studies: variance growth in T, relaxation speed λ*, weak
//! convergence in σ, and a fourth-moment boundedness check.

use serde::{Deserialize, Serialize};

use super::{fit_loglinear, mc_run, mc_run_snapshots, FitResult, RunOptions, Transform};
use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind, DEFAULT_SPRING};
use crate::extrapolation::HorizonRule;
use crate::integrate::{derive_seed, StepPolicy};
use crate::linalg::{dot, Matrix, Vector};
use crate::mlmc::MlmcConfig;
use crate::models::{ModelParams, SdeModel, LORENZ_X0};

/// Per-path values above this magnitude are clamped in standard pathwise studies.
pub const STANDARD_PS_CLAMP: f64 = 1e12;

/// Which built-in model an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Lorenz,
    Ou,
}

/// Everything a study needs, loadable from JSON. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelName,
    pub theta: f64,
    pub sigma: f64,
    pub x0: Vec<f64>,
    /// OU mean-reversion speed.
    pub kappa: f64,
    /// Observed Lorenz component.
    pub component: usize,
    pub estimator: EstimatorKind,
    pub spring: f64,
    /// Initial-condition perturbation for `isps-x0`.
    pub direction: Vec<f64>,
    pub seed: u64,
    pub paths: u64,
    pub policy: StepPolicy,
    /// Single horizon for `simulate`/`sens`.
    pub t_end: f64,
    pub t_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub theta_grid: Vec<f64>,
    pub lambda_t_max: f64,
    pub lambda_window: usize,
    pub lambda_spacing: f64,
    pub horizon: HorizonRule,
    pub rr_order: usize,
    /// Horizon of the ODE reference time average.
    pub ode_t_end: f64,
    pub ode_h: f64,
    /// Overrides the ODE reference of a weak-convergence study.
    pub reference: Option<f64>,
    pub mlmc: MlmcConfig,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelName::Lorenz,
            theta: 28.0,
            sigma: 6.0,
            x0: LORENZ_X0.to_vec(),
            kappa: 1.0,
            component: 2,
            estimator: EstimatorKind::IsPsTheta,
            spring: DEFAULT_SPRING,
            direction: vec![0.0, 0.0, 1.0],
            seed: 0,
            paths: 100_000,
            policy: StepPolicy::Uniform { h: 2f64.powi(-9) },
            t_end: 10.0,
            t_grid: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            sigma_grid: vec![1.0, 2.0, 4.0, 8.0],
            theta_grid: vec![28.0],
            lambda_t_max: 20.0,
            lambda_window: 10,
            lambda_spacing: 0.25,
            horizon: HorizonRule::default(),
            rr_order: 2,
            ode_t_end: 300.0,
            ode_h: 1e-3,
            reference: None,
            mlmc: MlmcConfig::default(),
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, xs: &[f64]| -> Result<()> {
            if xs.is_empty() || xs.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                Err(invalid(
                    name,
                    "grid must be non-empty with positive entries",
                ))
            } else {
                Ok(())
            }
        };
        positive("t_grid", &self.t_grid)?;
        positive("sigma_grid", &self.sigma_grid)?;
        if self.theta_grid.is_empty() || self.theta_grid.iter().any(|t| !t.is_finite()) {
            return Err(invalid("theta_grid", "grid must be non-empty and finite"));
        }
        if self.paths < 2 {
            return Err(invalid("paths", "need at least 2 paths"));
        }
        if !(self.t_end > 0.0) {
            return Err(invalid("t_end", "must be positive"));
        }
        let m = match self.model {
            ModelName::Lorenz => 3,
            ModelName::Ou => 1,
        };
        if self.x0.len() != m {
            return Err(invalid(
                "x0",
                format!("expected {m} components, got {}", self.x0.len()),
            ));
        }
        if self.estimator == EstimatorKind::IsPsX0 && self.direction.len() != m {
            return Err(invalid(
                "direction",
                format!("expected {m} components, got {}", self.direction.len()),
            ));
        }
        Ok(())
    }

    /// Parameters of an `M`-dimensional model built from this config.
    pub fn params<const M: usize>(&self) -> Result<ModelParams<M>> {
        let x0: Vector<M> = self.x0.as_slice().try_into().map_err(|_| {
            invalid(
                "x0",
                format!("expected {M} components, got {}", self.x0.len()),
            )
        })?;
        ModelParams::new(self.theta, self.sigma, x0)
    }

    pub fn estimator_for<const M: usize>(&self) -> Result<Estimator<M>> {
        let mut e = Estimator::new(self.estimator, self.spring);
        if self.estimator == EstimatorKind::IsPsX0 {
            e.direction = self
                .direction
                .as_slice()
                .try_into()
                .map_err(|_| invalid("direction", format!("expected {M} components")))?;
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
    pub n: u64,
    pub blowups: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceStudy {
    pub rows: Vec<VarianceRow>,
    /// Log-variance on T for the standard estimator, log-log otherwise.
    pub fit: FitResult,
    pub transform: Transform,
    pub clamped: u64,
    pub total_cost: u64,
}

/// Estimator variance at every horizon of `t_grid` from one set of paths.
#[allow(clippy::too_many_arguments)]
pub fn variance_vs_t_study<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_grid: &[f64],
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
) -> Result<VarianceStudy> {
    if t_grid.len() < 4 {
        return Err(invalid("t_grid", "need at least 4 horizons"));
    }
    let standard = estimator.kind == EstimatorKind::StandardPs;
    let options = RunOptions {
        clamp: standard.then_some(STANDARD_PS_CLAMP),
        allow_blowups: standard,
    };
    let runs = mc_run_snapshots(
        model, params, estimator, t_grid, policy, n_paths, seed, options,
    )?;
    let transform = if standard {
        Transform::LogLin
    } else {
        Transform::LogLog
    };
    let points: Vec<(f64, f64)> = runs.iter().map(|r| (r.t, r.variance())).collect();
    let fit = fit_loglinear(&points, transform)?;
    Ok(VarianceStudy {
        rows: runs
            .iter()
            .map(|r| VarianceRow {
                t: r.t,
                mean: r.mean(),
                variance: r.variance(),
                stderr: r.stderr(),
                n: r.stats.count(),
                blowups: r.blowups,
            })
            .collect(),
        fit,
        transform,
        clamped: runs.iter().map(|r| r.clamped).max().unwrap_or(0),
        total_cost: runs.last().map_or(0, |r| r.cost),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub t: f64,
    pub mean: f64,
    /// Half the moving range over the trailing window; absent for the first `window − 1` points.
    pub envelope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaStar {
    pub rows: Vec<EnvelopeRow>,
    /// Regression of log envelope on t; `λ* = −slope`.
    pub fit: FitResult,
    pub lambda: f64,
    /// Envelope level below which the decay is lost in Monte Carlo noise.
    pub noise_floor: f64,
    /// Time span actually regressed.
    pub fit_range: (f64, f64),
    pub total_cost: u64,
}

/// Ratio of noise floor to the largest standard error of the means.
pub const NOISE_FLOOR_FACTOR: f64 = 3.0;

/// Fits `log envelope ~ t` where the envelope of `means` (half the moving
/// range over `window` trailing points) stays above `NOISE_FLOOR_FACTOR`
/// times the largest standard error. The fit stops at the first point below
/// the floor.
pub fn envelope_fit(
    times: &[f64],
    means: &[f64],
    stderrs: &[f64],
    window: usize,
) -> Result<LambdaStar> {
    if window < 3 {
        return Err(invalid("window", "need at least 3 grid points"));
    }
    if times.len() != means.len() || times.len() != stderrs.len() || times.len() < window + 2 {
        return Err(invalid("times", "grid too short for the envelope window"));
    }
    let noise_floor = NOISE_FLOOR_FACTOR * stderrs.iter().cloned().fold(0.0, f64::max);
    let mut rows = Vec::with_capacity(times.len());
    let mut points = Vec::new();
    let mut open = true;
    for i in 0..times.len() {
        let envelope = (i + 1 >= window).then(|| {
            let w = &means[i + 1 - window..=i];
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            0.5 * (hi - lo)
        });
        if let Some(e) = envelope {
            if open {
                if e <= 0.0 && noise_floor == 0.0 {
                    return Err(Error::DegenerateEnvelope { t: times[i] });
                }
                if e > noise_floor {
                    points.push((times[i], e));
                } else {
                    open = false;
                }
            }
        }
        rows.push(EnvelopeRow {
            t: times[i],
            mean: means[i],
            envelope,
        });
    }
    if points.len() < 3 {
        return Err(Error::DegenerateEnvelope {
            t: times[window - 1 + points.len()],
        });
    }
    let fit = fit_loglinear(&points, Transform::LogLin)?;
    Ok(LambdaStar {
        rows,
        lambda: -fit.slope,
        fit,
        noise_floor,
        fit_range: (points[0].0, points[points.len() - 1].0),
        total_cost: 0,
    })
}

/// Relaxation speed of `E[φ(X_t)]` towards its invariant value, from plain
/// Monte Carlo means on the grid `spacing, 2·spacing, …, t_max`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_star_estimate<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_max: f64,
    spacing: f64,
    window: usize,
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
) -> Result<LambdaStar> {
    if !(spacing > 0.0) || !(t_max > spacing) {
        return Err(invalid("spacing", "need 0 < spacing < t_max"));
    }
    let n = (t_max / spacing).floor() as usize;
    let times: Vec<f64> = (1..=n).map(|k| k as f64 * spacing).collect();
    let runs = mc_run_snapshots(
        model,
        params,
        &Estimator::value(),
        &times,
        policy,
        n_paths,
        seed,
        RunOptions::for_kind(EstimatorKind::Value),
    )?;
    let means: Vec<f64> = runs.iter().map(|r| r.mean()).collect();
    let ses: Vec<f64> = runs.iter().map(|r| r.stderr()).collect();
    let mut out = envelope_fit(&times, &means, &ses, window)?;
    out.total_cost = runs.last().map_or(0, |r| r.cost);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakRow {
    pub theta: f64,
    pub sigma: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub weak_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakStudy {
    pub rows: Vec<WeakRow>,
    /// Log-log fit of weak error on σ, one per θ.
    pub fits: Vec<FitResult>,
    pub references: Vec<f64>,
    pub total_cost: u64,
}

/// Estimates at every `(θ, σ)` with horizon `rule.horizon(σ)`, and the
/// error against `references[j]` (the deterministic value at `theta_grid[j]`).
#[allow(clippy::too_many_arguments)]
pub fn weak_convergence_study<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    theta_grid: &[f64],
    sigma_grid: &[f64],
    references: &[f64],
    rule: &HorizonRule,
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
) -> Result<WeakStudy> {
    if theta_grid.is_empty() || sigma_grid.is_empty() {
        return Err(invalid("grid", "theta and sigma grids must be non-empty"));
    }
    if references.len() != theta_grid.len() {
        return Err(invalid("reference", "need one reference value per theta"));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut total_cost = 0;
    for (j, (&theta, &reference)) in theta_grid.iter().zip(references).enumerate() {
        let mut errs = Vec::new();
        for (k, &sigma) in sigma_grid.iter().enumerate() {
            let p = params.with_theta(theta).with_sigma(sigma);
            let t = rule.horizon(sigma)?;
            let run_seed = derive_seed(seed, (j * sigma_grid.len() + k) as u64);
            let r = mc_run(model, &p, estimator, t, policy, n_paths, run_seed)?;
            total_cost += r.cost;
            let weak_error = (r.mean() - reference).abs();
            errs.push((sigma, weak_error));
            rows.push(WeakRow {
                theta,
                sigma,
                t,
                estimate: r.mean(),
                stderr: r.stderr(),
                weak_error,
            });
        }
        if errs.len() >= 2 {
            fits.push(fit_loglinear(&errs, Transform::LogLog)?);
        }
    }
    Ok(WeakStudy {
        rows,
        fits,
        references: references.to_vec(),
        total_cost,
    })
}

/// `‖x‖⁴` observed along a model's own dynamics.
struct FourthMoment<'a, Mo: ?Sized>(&'a Mo);

impl<const M: usize, Mo: SdeModel<M> + ?Sized> SdeModel<M> for FourthMoment<'_, Mo> {
    fn name(&self) -> &'static str {
        "fourth-moment"
    }
    fn drift(&self, x: &Vector<M>, theta: f64) -> Vector<M> {
        self.0.drift(x, theta)
    }
    fn drift_jacobian(&self, x: &Vector<M>, theta: f64) -> Matrix<M> {
        self.0.drift_jacobian(x, theta)
    }
    fn drift_dtheta(&self, x: &Vector<M>, theta: f64) -> Vector<M> {
        self.0.drift_dtheta(x, theta)
    }
    fn observable(&self, x: &Vector<M>) -> f64 {
        dot(x, x).powi(2)
    }
    fn observable_grad(&self, x: &Vector<M>) -> Vector<M> {
        let r2 = dot(x, x);
        x.map(|xi| 4.0 * r2 * xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub times: Vec<f64>,
    pub fourth_moment: Vec<f64>,
    /// Largest moment over the last third of the horizon divided by the
    /// largest over the middle third.
    pub ratio: f64,
    pub bounded: bool,
}

/// Empirical check that `E‖X_t‖⁴` settles: no growth from the middle to the
/// last third of `[0, t_max]` (ratio below 1.5).
pub fn moment_boundedness<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    t_max: f64,
    policy: &StepPolicy,
    n_paths: u64,
    seed: u64,
) -> Result<MomentCheck> {
    let n = 40;
    let times: Vec<f64> = (1..=n).map(|k| t_max * k as f64 / n as f64).collect();
    let runs = mc_run_snapshots(
        &FourthMoment(model),
        params,
        &Estimator::value(),
        &times,
        policy,
        n_paths,
        seed,
        RunOptions::for_kind(EstimatorKind::Value),
    )?;
    let m: Vec<f64> = runs.iter().map(|r| r.mean()).collect();
    let max_over = |lo: f64, hi: f64| {
        times
            .iter()
            .zip(&m)
            .filter(|(t, _)| **t > lo && **t <= hi)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let ratio = max_over(2.0 * t_max / 3.0, t_max) / max_over(t_max / 3.0, 2.0 * t_max / 3.0);
    Ok(MomentCheck {
        times,
        fourth_moment: m,
        ratio,
        bounded: ratio < 1.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Lorenz, OrnsteinUhlenbeck};

    #[test]
    fn envelope_of_exact_exponential() {
        let times: Vec<f64> = (1..=60).map(|k| 0.25 * k as f64).collect();
        let means: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let r = envelope_fit(&times, &means, &vec![0.0; 60], 10).unwrap();
        assert!((r.fit.slope + 2.0).abs() < 1e-9, "{}", r.fit.slope);
        assert!((r.lambda - 2.0).abs() < 1e-9);
        assert_eq!(r.rows[8].envelope, None);
        assert!(r.rows[9].envelope.is_some());
    }

    #[test]
    fn envelope_stops_at_noise_floor() {
        let times: Vec<f64> = (1..=80).map(|k| 0.25 * k as f64).collect();
        let means: Vec<f64> = times
            .iter()
            .enumerate()
            .map(|(i, t)| 5.0 * (-t).exp() + 0.01 * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let r = envelope_fit(&times, &means, &vec![0.01; 80], 10).unwrap();
        assert!((r.lambda - 1.0).abs() < 0.1, "{}", r.lambda);
        assert!(r.fit_range.1 < 8.0);
    }

    #[test]
    fn flat_means_are_degenerate() {
        let times: Vec<f64> = (1..=20).map(|k| k as f64).collect();
        let r = envelope_fit(&times, &[1.0; 20], &[0.0; 20], 5);
        assert!(matches!(r, Err(Error::DegenerateEnvelope { .. })));
        assert!(envelope_fit(&times, &[1.0; 20], &[0.0; 20], 2).is_err());
    }

    #[test]
    fn weak_error_vanishes_for_linear_model() {
        // E[X_T] of OU does not depend on σ under Euler either.
        let ou = OrnsteinUhlenbeck::new(1.0, 0.0).unwrap();
        let p = ou.params(1.0, 1.0).unwrap();
        let pol = StepPolicy::uniform(0.25).unwrap();
        let rule = HorizonRule {
            t_ref: 2.0,
            sigma_ref: 2.0,
            t_max: 2.0,
        };
        let exact = 0.75f64.powi(8);
        let w = weak_convergence_study(
            &ou,
            &p,
            &Estimator::value(),
            &[0.0],
            &[0.5, 1.0, 2.0],
            &[exact],
            &rule,
            &pol,
            40_000,
            3,
        )
        .unwrap();
        for r in &w.rows {
            assert_eq!(r.t, 2.0);
            assert!(r.weak_error < 4.0 * r.stderr, "{r:?}");
        }
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let c = ExperimentConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"sigma": 3.0, "estimator": "malliavin"}"#).unwrap();
        assert_eq!(partial.sigma, 3.0);
        assert_eq!(partial.estimator, EstimatorKind::Malliavin);
        assert_eq!(partial.paths, c.paths);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sigmaa": 3.0}"#).is_err());
        assert!(ExperimentConfig {
            t_grid: vec![],
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            sigma_grid: vec![1.0, -1.0],
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            x0: vec![1.0],
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(c.params::<3>().is_ok());
        assert!(c.params::<1>().is_err());
    }

    #[test]
    fn variance_study_needs_four_horizons() {
        let m = Lorenz::new();
        let p = ModelParams::new(28.0, 6.0, LORENZ_X0).unwrap();
        let pol = StepPolicy::uniform(2f64.powi(-7)).unwrap();
        assert!(variance_vs_t_study(
            &m,
            &p,
            &Estimator::malliavin(),
            &[1.0, 2.0, 3.0],
            &pol,
            10,
            0
        )
        .is_err());
        let v = variance_vs_t_study(
            &m,
            &p,
            &Estimator::malliavin(),
            &[0.5, 1.0, 1.5, 2.0],
            &pol,
            500,
            0,
        )
        .unwrap();
        assert_eq!(v.rows.len(), 4);
        assert_eq!(v.transform, Transform::LogLog);
        assert_eq!(v.total_cost, 500 * 256);
    }
}
