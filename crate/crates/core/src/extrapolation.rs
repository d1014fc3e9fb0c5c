//! Richardson–Romberg extrapolation in the volatility, and the deterministic
//! (ODE) reference values it approaches.
//!
//! For an estimator `F(σ)` with expansion `F(σ) = π + c₁σ + c₂σ² + …`, the
//! combination `Σ_k w_k F(σR/k)` cancels the terms up to `σ^{R−1}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::Estimator;
use crate::harness::{parallel_accumulate, Accumulator, MCStats};
use crate::integrate::{simulate_augmented, BrownianSource, NoiseStream, StepPolicy};
use crate::linalg::{all_finite, Vector};
use crate::models::{ModelParams, SdeModel};

pub const MAX_ORDER: usize = 8;

/// Burn-in discarded by [`ode_reference`].
pub const ODE_BURN_IN: f64 = 10.0;

/// `w_k = (−1)^{R−k} k^R / (k! (R−k)!)` for `k = 1..=R`.
pub fn rr_weights(order: usize) -> Result<Vec<f64>> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(invalid(
            "order",
            format!("must lie in 1..={MAX_ORDER}, got {order}"),
        ));
    }
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    Ok((1..=order)
        .map(|k| {
            let sign = if (order - k).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            sign * (k as f64).powi(order as i32) / (fact(k) * fact(order - k))
        })
        .collect())
}

/// Weights and volatility ladder of an order-`R` extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RRScheme {
    pub order: usize,
    /// Smallest volatility of the ladder.
    pub base_sigma: f64,
    pub weights: Vec<f64>,
    /// `σ_k = base_sigma·R/k`, decreasing, ending at `base_sigma`.
    pub sigmas: Vec<f64>,
}

impl RRScheme {
    pub fn new(order: usize, base_sigma: f64) -> Result<Self> {
        let weights = rr_weights(order)?;
        if !(base_sigma > 0.0) || !base_sigma.is_finite() {
            return Err(invalid("sigma", "base volatility must be positive"));
        }
        let sigmas = (1..=order)
            .map(|k| base_sigma * order as f64 / k as f64)
            .collect();
        Ok(Self {
            order,
            base_sigma,
            weights,
            sigmas,
        })
    }

    /// `Σ_k w_k·values[k]`.
    pub fn combine(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.order);
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// A Brownian source that can replay its increments from the start.
pub trait ReplayableSource: BrownianSource {
    fn rewind(&mut self);
}

impl ReplayableSource for NoiseStream {
    fn rewind(&mut self) {
        self.reset();
    }
}

/// One path's extrapolated sample: every rung of the ladder replays the same increments.
#[derive(Debug, Clone, PartialEq)]
pub struct RrSample {
    pub value: f64,
    /// Estimator value at each `σ_k`.
    pub rungs: Vec<f64>,
    pub cost: u64,
}

pub fn rr_sample<const M: usize, Mo: SdeModel<M> + ?Sized, N: ReplayableSource>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    scheme: &RRScheme,
    t_end: f64,
    policy: &StepPolicy,
    noise: &mut N,
) -> Result<RrSample> {
    let mut rungs = Vec::with_capacity(scheme.order);
    let mut cost = 0;
    for (k, &sigma) in scheme.sigmas.iter().enumerate() {
        if k > 0 {
            noise.rewind();
        }
        let p = params.with_sigma(sigma);
        let st = simulate_augmented(model, &p, estimator, t_end, policy, noise)?;
        rungs.push(estimator.evaluate_state(model, &st));
        cost += st.steps;
    }
    Ok(RrSample {
        value: scheme.combine(&rungs),
        rungs,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub order: usize,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
    /// Plain estimates at each rung (same paths).
    pub rungs: Vec<MCStats>,
    pub total_cost: u64,
    pub n: u64,
    pub blowups: u64,
}

#[derive(Debug, Clone, Default)]
struct RrAcc {
    combined: MCStats,
    rungs: Vec<MCStats>,
    cost: u64,
    failed: u64,
}

impl Accumulator for RrAcc {
    fn merge(&mut self, other: Self) {
        self.combined.merge(&other.combined);
        if self.rungs.is_empty() {
            self.rungs = other.rungs;
        } else {
            for (a, b) in self.rungs.iter_mut().zip(&other.rungs) {
                a.merge(b);
            }
        }
        self.cost += other.cost;
        self.failed += other.failed;
    }
}

/// Extrapolated estimate over `n_paths` paths; path `i` drives every rung
/// with `NoiseStream::new(master_seed, i)`. The volatility of `params` is
/// ignored in favour of the scheme's ladder.
#[allow(clippy::too_many_arguments)]
pub fn rr_estimate<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    scheme: &RRScheme,
    t_end: f64,
    policy: &StepPolicy,
    n_paths: u64,
    master_seed: u64,
) -> Result<RrEstimate> {
    if n_paths < 2 {
        return Err(invalid("paths", "need at least 2 paths"));
    }
    for &s in &scheme.sigmas {
        estimator.validate(&params.with_sigma(s))?;
    }
    let acc = parallel_accumulate(n_paths, RrAcc::default, |i, acc| {
        if acc.rungs.is_empty() {
            acc.rungs = vec![MCStats::new(); scheme.order];
        }
        let mut noise = NoiseStream::new(master_seed, i);
        match rr_sample(model, params, estimator, scheme, t_end, policy, &mut noise) {
            Ok(s) if s.value.is_finite() => {
                acc.combined.push(s.value);
                for (st, v) in acc.rungs.iter_mut().zip(&s.rungs) {
                    st.push(*v);
                }
                acc.cost += s.cost;
            }
            _ => acc.failed += 1,
        }
    });
    if acc.failed * 100 > n_paths {
        return Err(Error::TooManyBlowups {
            failed: acc.failed as usize,
            total: n_paths as usize,
        });
    }
    Ok(RrEstimate {
        estimate: acc.combined.mean(),
        stderr: acc.combined.stderr(),
        order: scheme.order,
        sigmas: scheme.sigmas.clone(),
        weights: scheme.weights.clone(),
        rungs: acc.rungs,
        total_cost: acc.cost,
        n: acc.combined.count(),
        blowups: acc.failed,
    })
}

/// Simulation horizon per volatility, `T(σ) = min(T_ref·(σ_ref/σ)², T_max)`:
/// convergence to the invariant measure slows like `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRule {
    pub t_ref: f64,
    pub sigma_ref: f64,
    pub t_max: f64,
}

impl Default for HorizonRule {
    fn default() -> Self {
        Self {
            t_ref: 2.0,
            sigma_ref: 15.0,
            t_max: 50.0,
        }
    }
}

impl HorizonRule {
    pub fn horizon(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(invalid("sigma", "horizon rule needs sigma > 0"));
        }
        if !(self.t_ref > 0.0 && self.sigma_ref > 0.0 && self.t_max > 0.0) {
            return Err(invalid(
                "horizon",
                "t_ref, sigma_ref and t_max must be positive",
            ));
        }
        Ok((self.t_ref * (self.sigma_ref / sigma).powi(2)).min(self.t_max))
    }
}

fn rk4_step<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    theta: f64,
    x: &Vector<M>,
    h: f64,
) -> Vector<M> {
    let at = |base: &Vector<M>, k: &Vector<M>, c: f64| -> Vector<M> {
        std::array::from_fn(|i| base[i] + c * k[i])
    };
    let k1 = model.drift(x, theta);
    let k2 = model.drift(&at(x, &k1, 0.5 * h), theta);
    let k3 = model.drift(&at(x, &k2, 0.5 * h), theta);
    let k4 = model.drift(&at(x, &k3, h), theta);
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Time average of the observable along the deterministic trajectory from
/// `x0`, over `[ODE_BURN_IN, t_end]`, integrated by classical RK4 with
/// trapezoidal quadrature.
pub fn ode_reference<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    theta: f64,
    x0: Vector<M>,
    t_end: f64,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(invalid("h", "step must be positive"));
    }
    if !(t_end > ODE_BURN_IN) || !t_end.is_finite() {
        return Err(invalid(
            "T",
            format!("must exceed the burn-in {ODE_BURN_IN}"),
        ));
    }
    let n = (t_end / h).round() as u64;
    let burn = (ODE_BURN_IN / h).round() as u64;
    let mut x = x0;
    // Weighted running mean, exact for a constant observable.
    let (mut mean, mut weight) = (0.0, 0.0);
    for k in 0..=n {
        if k >= burn {
            let w = if k == burn || k == n { 0.5 } else { 1.0 };
            weight += w;
            mean += w / weight * (model.observable(&x) - mean);
        }
        if k < n {
            x = rk4_step(model, theta, &x, h);
            if !all_finite(&x) {
                return Err(Error::NonFiniteState {
                    t: (k + 1) as f64 * h,
                });
            }
        }
    }
    Ok(mean)
}

/// Central difference in `θ` of [`ode_reference`], averaged over the given
/// initial states (a single chaotic trajectory is too short to resolve it).
pub fn ode_reference_sensitivity<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    theta: f64,
    initial_states: &[Vector<M>],
    t_end: f64,
    h: f64,
    epsilon: f64,
) -> Result<MCStats> {
    if initial_states.is_empty() {
        return Err(invalid("x0", "need at least one initial state"));
    }
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    initial_states
        .iter()
        .map(|x0| {
            let hi = ode_reference(model, theta + 0.5 * epsilon, *x0, t_end, h)?;
            let lo = ode_reference(model, theta - 0.5 * epsilon, *x0, t_end, h)?;
            Ok((hi - lo) / epsilon)
        })
        .collect()
}
