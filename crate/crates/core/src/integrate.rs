//! Brownian noise streams, timestep policies and the Euler–Maruyama kernels
//! for plain and augmented (state + variation + accumulator) systems.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind};
use crate::linalg::{all_finite, dot, norm, Vector};
use crate::models::{ModelParams, SdeModel};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent master seed for a named sub-experiment (an MLMC level, a σ value, ...).
pub fn derive_seed(master_seed: u64, salt: u64) -> u64 {
    mix64(master_seed ^ mix64(salt.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Source of Gaussian Brownian increments.
pub trait BrownianSource {
    /// Next increment for a step of length `h`: `N(0, h·I)`.
    fn increment<const M: usize>(&mut self, h: f64) -> Vector<M>;
}

/// Reproducible per-path Brownian stream keyed on `(master_seed, path_index)`.
///
/// The generator state is a 256-bit mix of both keys, so the increments of a
/// path never depend on which worker simulates it or in which order.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    master_seed: u64,
    path_index: u64,
    rng: Xoshiro256PlusPlus,
}

impl NoiseStream {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self {
            master_seed,
            path_index,
            rng: Xoshiro256PlusPlus::from_seed(Self::seed_bytes(master_seed, path_index)),
        }
    }

    fn seed_bytes(master_seed: u64, path_index: u64) -> [u8; 32] {
        let a = mix64(master_seed);
        let b = mix64(path_index ^ 0x6A09_E667_F3BC_C908);
        let mut out = [0u8; 32];
        for (k, chunk) in out.chunks_exact_mut(8).enumerate() {
            let k = k as u64;
            let word = mix64(a.wrapping_add(k.wrapping_mul(GOLDEN)))
                ^ mix64(b.wrapping_add(k.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)))
                    .rotate_left(17 * k as u32 + 1);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Rewinds to the first increment.
    pub fn reset(&mut self) {
        *self = Self::new(self.master_seed, self.path_index);
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl BrownianSource for NoiseStream {
    #[inline]
    fn increment<const M: usize>(&mut self, h: f64) -> Vector<M> {
        let s = h.sqrt();
        std::array::from_fn(|_| s * self.standard_normal())
    }
}

/// Uniform or drift-adaptive timestep selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StepPolicy {
    Uniform {
        h: f64,
    },
    /// `h(x) = clamp(δ / max(1, ‖f(x)‖), δ·2⁻¹⁰, δ)`.
    Adaptive {
        delta: f64,
    },
}

impl StepPolicy {
    pub fn uniform(h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(invalid("h", format!("must be > 0, got {h}")));
        }
        Ok(Self::Uniform { h })
    }

    pub fn adaptive(delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(invalid("delta", format!("must be > 0, got {delta}")));
        }
        Ok(Self::Adaptive { delta })
    }

    pub fn h_min(&self) -> f64 {
        match *self {
            Self::Uniform { h } => h,
            Self::Adaptive { delta } => delta * 2f64.powi(-10),
        }
    }

    pub fn h_max(&self) -> f64 {
        match *self {
            Self::Uniform { h } => h,
            Self::Adaptive { delta } => delta,
        }
    }

    /// Nominal (untruncated) step at state `x`.
    #[inline]
    pub fn step_at<const M: usize, Mo: SdeModel<M> + ?Sized>(
        &self,
        x: &Vector<M>,
        model: &Mo,
        params: &ModelParams<M>,
    ) -> f64 {
        match *self {
            Self::Uniform { h } => h,
            Self::Adaptive { .. } => adaptive_step_size(x, model, params, self),
        }
    }

    /// Step count of a uniform grid on `[0, t_end]`, or `None` in adaptive mode.
    pub fn uniform_steps(&self, t_end: f64) -> Option<u64> {
        match *self {
            Self::Uniform { h } => Some(uniform_step_count(t_end, h)),
            Self::Adaptive { .. } => None,
        }
    }
}

/// `⌈T/h⌉`, treating ratios within rounding noise of an integer as exact.
pub fn uniform_step_count(t_end: f64, h: f64) -> u64 {
    let r = t_end / h;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * n.max(1.0) {
        n as u64
    } else {
        r.ceil() as u64
    }
}

pub fn adaptive_step_size<const M: usize, Mo: SdeModel<M> + ?Sized>(
    x: &Vector<M>,
    model: &Mo,
    params: &ModelParams<M>,
    policy: &StepPolicy,
) -> f64 {
    let delta = policy.h_max();
    let f = model.drift(x, params.theta);
    (delta / norm(&f).max(1.0)).clamp(policy.h_min(), delta)
}

/// One Euler–Maruyama step `x + f(θ;x)·h + σ·dW`.
#[inline]
pub fn em_step<const M: usize, Mo: SdeModel<M> + ?Sized>(
    x: &Vector<M>,
    h: f64,
    dw: &Vector<M>,
    model: &Mo,
    params: &ModelParams<M>,
) -> Vector<M> {
    let f = model.drift(x, params.theta);
    std::array::from_fn(|i| x[i] + f[i] * h + params.sigma * dw[i])
}

/// Solution state, variation and accumulators advanced jointly along one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedPathState<const M: usize> {
    pub t: f64,
    pub x: Vector<M>,
    /// Variation process; its meaning depends on the estimator kind.
    pub v: Vector<M>,
    /// Running Itô sum `Σ⟨ψ(state_n), ΔW_n⟩` with left-point integrand.
    pub ito_acc: f64,
    /// Log Radon–Nikodym weight; stays 0 for single-path estimators.
    pub log_rn: f64,
    pub steps: u64,
}

impl<const M: usize> AugmentedPathState<M> {
    pub fn initial(x0: Vector<M>, v0: Vector<M>) -> Self {
        Self {
            t: 0.0,
            x: x0,
            v: v0,
            ito_acc: 0.0,
            log_rn: 0.0,
            steps: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.x)
            && all_finite(&self.v)
            && self.ito_acc.is_finite()
            && self.log_rn.is_finite()
    }
}

/// Advances the variation and Itô accumulator of `estimator` by one step using
/// the pre-step state `x`. `dw` is the increment of the Brownian motion under
/// which `x` solves the unmodified SDE.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_variation<const M: usize, Mo: SdeModel<M> + ?Sized>(
    estimator: &Estimator<M>,
    model: &Mo,
    params: &ModelParams<M>,
    x: &Vector<M>,
    v: &mut Vector<M>,
    ito_acc: &mut f64,
    h: f64,
    dw: &Vector<M>,
) {
    let theta = params.theta;
    let s = estimator.spring;
    match estimator.kind {
        EstimatorKind::Value => {}
        EstimatorKind::StandardPs => {
            let g = model.drift_dtheta(x, theta);
            let jv = model.jacobian_times(x, theta, v);
            for i in 0..M {
                v[i] += (g[i] + jv[i]) * h;
            }
        }
        EstimatorKind::Malliavin => {
            let g = model.drift_dtheta(x, theta);
            *ito_acc += dot(&g, dw) / params.sigma;
        }
        EstimatorKind::IsPsTheta => {
            *ito_acc += s / params.sigma * dot(v, dw);
            let g = model.drift_dtheta(x, theta);
            let jv = model.jacobian_times(x, theta, v);
            for i in 0..M {
                v[i] += (g[i] + jv[i] - s * v[i]) * h;
            }
        }
        EstimatorKind::IsPsSigma => {
            *ito_acc += s / params.sigma * dot(v, dw);
            let jv = model.jacobian_times(x, theta, v);
            for i in 0..M {
                v[i] += (jv[i] - s * v[i]) * h + dw[i];
            }
        }
        EstimatorKind::IsPsX0 => {
            *ito_acc += s / params.sigma * dot(v, dw);
            let jv = model.jacobian_times(x, theta, v);
            for i in 0..M {
                v[i] += (jv[i] - s * v[i]) * h;
            }
        }
    }
}

#[inline]
fn augmented_step<const M: usize, Mo: SdeModel<M> + ?Sized>(
    state: &mut AugmentedPathState<M>,
    estimator: &Estimator<M>,
    model: &Mo,
    params: &ModelParams<M>,
    h: f64,
    dw: &Vector<M>,
) -> Result<()> {
    let x = state.x;
    advance_variation(
        estimator,
        model,
        params,
        &x,
        &mut state.v,
        &mut state.ito_acc,
        h,
        dw,
    );
    state.x = em_step(&x, h, dw, model, params);
    state.t += h;
    state.steps += 1;
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t: state.t })
    }
}

/// Advances `state` to `t_target` under `policy`, truncating the last step to land exactly.
fn advance_to<const M: usize, Mo: SdeModel<M> + ?Sized, N: BrownianSource>(
    state: &mut AugmentedPathState<M>,
    estimator: &Estimator<M>,
    model: &Mo,
    params: &ModelParams<M>,
    t_target: f64,
    policy: &StepPolicy,
    noise: &mut N,
) -> Result<()> {
    match *policy {
        StepPolicy::Uniform { h } => {
            // Grid times are n·h, so off-grid targets truncate one step and rejoin the grid.
            let tol = 1e-9 * h;
            while t_target - state.t > tol {
                let k = (state.t / h + 1e-9).floor() + 1.0;
                let mut next = (k * h).min(t_target);
                if t_target - next <= tol {
                    next = t_target;
                }
                let step = next - state.t;
                let dw = noise.increment::<M>(step);
                augmented_step(state, estimator, model, params, step, &dw)?;
                state.t = next;
            }
        }
        StepPolicy::Adaptive { .. } => {
            let eps = policy.h_min() * 1e-9;
            while t_target - state.t > eps {
                let step = policy
                    .step_at(&state.x, model, params)
                    .min(t_target - state.t);
                let dw = noise.increment::<M>(step);
                augmented_step(state, estimator, model, params, step, &dw)?;
            }
            state.t = t_target;
        }
    }
    Ok(())
}

/// Simulates state, variation and accumulators from `t = 0` to `t_end`.
///
/// The spring of `estimator` is used as given (including zero); callers that
/// need `S > 0` validate before reaching here.
pub fn simulate_augmented<const M: usize, Mo: SdeModel<M> + ?Sized, N: BrownianSource>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    policy: &StepPolicy,
    noise: &mut N,
) -> Result<AugmentedPathState<M>> {
    simulate_augmented_snapshots(model, params, estimator, &[t_end], policy, noise, |_, _| {})
}

/// Like [`simulate_augmented`] but reports the state at every time in the
/// increasing grid `times`, ending at its last entry. A state reported at
/// `times[k]` is identical to a run that stops at `times[k]` whenever the
/// snapshot times lie on the step grid.
pub fn simulate_augmented_snapshots<const M: usize, Mo: SdeModel<M> + ?Sized, N: BrownianSource>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    times: &[f64],
    policy: &StepPolicy,
    noise: &mut N,
    mut on_snapshot: impl FnMut(usize, &AugmentedPathState<M>),
) -> Result<AugmentedPathState<M>> {
    validate_times(times)?;
    let mut state = AugmentedPathState::initial(params.x0, estimator.initial_variation());
    for (k, &t) in times.iter().enumerate() {
        advance_to(&mut state, estimator, model, params, t, policy, noise)?;
        on_snapshot(k, &state);
    }
    Ok(state)
}

pub(crate) fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(invalid("T", "time grid is empty"));
    }
    let mut prev = 0.0;
    for &t in times {
        if !(t > prev) || !t.is_finite() {
            return Err(invalid(
                "T",
                "times must be positive, finite and strictly increasing",
            ));
        }
        prev = t;
    }
    Ok(())
}
