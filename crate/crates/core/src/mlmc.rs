//! Multilevel Monte Carlo with a spring-coupled change of measure between the
//! fine and coarse paths of each level.
//!
//! Under the simulation measure P both paths carry an extra drift pulling them
//! towards each other, `S(other − self)`. Each path solves the *original* SDE
//! with respect to its own reconstructed Brownian motion
//! `dW^Q = dW^P + (S/σ)(other − self) h`, and the discrete Girsanov weight
//! `exp(−⟨u, dW^P⟩ − ½|u|²h)` with `u = (S/σ)(other − self)` undoes the spring
//! exactly for the Euler scheme. Estimator accumulators consume `dW^Q`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{Estimator, EstimatorKind};
use crate::harness::{fit_loglinear, parallel_accumulate, Accumulator, MCStats, Transform};
use crate::integrate::{
    advance_variation, derive_seed, em_step, simulate_augmented, AugmentedPathState,
    BrownianSource, NoiseStream, StepPolicy,
};
use crate::linalg::{dot, sub, Vector};
use crate::models::{ModelParams, SdeModel};

/// Fine and coarse path of one MLMC level, advanced together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledLevelState<const M: usize> {
    pub fine: AugmentedPathState<M>,
    pub coarse: AugmentedPathState<M>,
}

impl<const M: usize> CoupledLevelState<M> {
    pub fn initial(x0: Vector<M>, v0: Vector<M>) -> Self {
        Self {
            fine: AugmentedPathState::initial(x0, v0),
            coarse: AugmentedPathState::initial(x0, v0),
        }
    }

    pub fn t(&self) -> f64 {
        self.coarse.t
    }
}

/// Girsanov log-weight increment of one Euler step in which `self_y` was
/// pushed towards `other_y` by the spring while driven by `dw_p`.
pub fn rn_weight_update<const M: usize>(
    log_rn: f64,
    self_y: &Vector<M>,
    other_y: &Vector<M>,
    dw_p: &Vector<M>,
    h: f64,
    spring: f64,
    sigma: f64,
) -> Result<f64> {
    let u = spring_shift(self_y, other_y, spring, sigma)?;
    Ok(log_rn - dot(&u, dw_p) - 0.5 * dot(&u, &u) * h)
}

/// Brownian increment under which `self_y` follows the unmodified SDE.
pub fn reconstruct_q_increment<const M: usize>(
    dw_p: &Vector<M>,
    self_y: &Vector<M>,
    other_y: &Vector<M>,
    h: f64,
    spring: f64,
    sigma: f64,
) -> Result<Vector<M>> {
    let u = spring_shift(self_y, other_y, spring, sigma)?;
    Ok(std::array::from_fn(|i| dw_p[i] + u[i] * h))
}

/// `u = (S/σ)(other − self)`.
fn spring_shift<const M: usize>(
    self_y: &Vector<M>,
    other_y: &Vector<M>,
    spring: f64,
    sigma: f64,
) -> Result<Vector<M>> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "change of measure needs sigma > 0"));
    }
    let d = sub(other_y, self_y);
    let k = spring / sigma;
    Ok(d.map(|x| k * x))
}

/// One Euler step of a single path under the spring, updating variation,
/// Itô accumulator and log-weight from the reconstructed increment.
#[allow(clippy::too_many_arguments)]
fn spring_step<const M: usize, Mo: SdeModel<M> + ?Sized>(
    state: &mut AugmentedPathState<M>,
    other: &Vector<M>,
    estimator: &Estimator<M>,
    model: &Mo,
    params: &ModelParams<M>,
    spring: f64,
    h: f64,
    dw_p: &Vector<M>,
) -> Result<()> {
    let x = state.x;
    let dwq = reconstruct_q_increment(dw_p, &x, other, h, spring, params.sigma)?;
    state.log_rn = rn_weight_update(state.log_rn, &x, other, dw_p, h, spring, params.sigma)?;
    advance_variation(
        estimator,
        model,
        params,
        &x,
        &mut state.v,
        &mut state.ito_acc,
        h,
        &dwq,
    );
    state.x = em_step(&x, h, &dwq, model, params);
    state.t += h;
    state.steps += 1;
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t: state.t })
    }
}

/// Advances the fine path by two half-steps (`dw1`, `dw2`) and the coarse path
/// by one step of `h_c` with `dw1 + dw2`.
///
/// Spring displacements use left-endpoint values, with the partner's value
/// frozen at the start of the coarse step.
#[allow(clippy::too_many_arguments)]
pub fn coupled_step<const M: usize, Mo: SdeModel<M> + ?Sized>(
    state: &mut CoupledLevelState<M>,
    h_c: f64,
    dw1: &Vector<M>,
    dw2: &Vector<M>,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    spring: f64,
) -> Result<()> {
    coupled_step_observed(
        state,
        h_c,
        dw1,
        dw2,
        model,
        params,
        estimator,
        spring,
        &mut (),
    )
}

#[allow(clippy::too_many_arguments)]
fn coupled_step_observed<const M: usize, Mo: SdeModel<M> + ?Sized, O: CouplingObserver>(
    state: &mut CoupledLevelState<M>,
    h_c: f64,
    dw1: &Vector<M>,
    dw2: &Vector<M>,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    spring: f64,
    observer: &mut O,
) -> Result<()> {
    let h_f = 0.5 * h_c;
    let fine0 = state.fine.x;
    let coarse0 = state.coarse.x;
    spring_step(
        &mut state.fine,
        &coarse0,
        estimator,
        model,
        params,
        spring,
        h_f,
        dw1,
    )?;
    spring_step(
        &mut state.fine,
        &coarse0,
        estimator,
        model,
        params,
        spring,
        h_f,
        dw2,
    )?;
    let dw: Vector<M> = std::array::from_fn(|i| dw1[i] + dw2[i]);
    observer.observe(dw1, dw2, &dw);
    spring_step(
        &mut state.coarse,
        &fine0,
        estimator,
        model,
        params,
        spring,
        h_c,
        &dw,
    )
}

/// How fine and coarse paths of a level are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmcConfig {
    /// Target root-mean-square error ε.
    pub target_rmse: f64,
    /// Level-0 step; level ℓ uses `h0·2^−ℓ`.
    pub h0: f64,
    /// Coupling spring between fine and coarse paths.
    pub spring: f64,
    /// Disable to couple by shared noise only (no spring, unit weights).
    pub change_of_measure: bool,
    pub max_levels: usize,
    pub n_init: u64,
}

impl Default for MlmcConfig {
    fn default() -> Self {
        Self {
            target_rmse: 0.05,
            h0: 2f64.powi(-6),
            spring: crate::estimators::DEFAULT_SPRING,
            change_of_measure: true,
            max_levels: 10,
            n_init: 1000,
        }
    }
}

impl MlmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rmse > 0.0) || !self.target_rmse.is_finite() {
            return Err(invalid("eps", "target RMSE must be positive"));
        }
        if !(self.h0 > 0.0) || !self.h0.is_finite() {
            return Err(invalid("h0", "level-0 step must be positive"));
        }
        if !(1..=24).contains(&self.max_levels) {
            return Err(invalid("max_levels", "must lie in 1..=24"));
        }
        if !(self.spring >= 0.0) || !self.spring.is_finite() {
            return Err(invalid("spring", "must be finite and non-negative"));
        }
        // An explicit Euler spring step overshoots once S·h ≥ 1 and the paths decouple.
        if self.change_of_measure && self.spring * self.h0 >= 1.0 {
            return Err(invalid(
                "spring",
                format!("S·h0 = {} must be below 1", self.spring * self.h0),
            ));
        }
        if self.n_init < 2 {
            return Err(invalid(
                "n_init",
                "need at least 2 warm-up samples per level",
            ));
        }
        Ok(())
    }

    fn coupling_spring(&self) -> f64 {
        if self.change_of_measure {
            self.spring
        } else {
            0.0
        }
    }

    /// Number of level-0 steps to reach `t_end`; `t_end` must lie on the level-0 grid.
    pub fn base_steps(&self, t_end: f64) -> Result<u64> {
        let n = (t_end / self.h0).round();
        if !(t_end > 0.0) || n < 1.0 || (n * self.h0 - t_end).abs() > 1e-9 * t_end {
            return Err(invalid(
                "T",
                format!("{t_end} is not a positive multiple of h0 = {}", self.h0),
            ));
        }
        Ok(n as u64)
    }

    /// Timesteps of one sample on `level` (fine plus coarse).
    pub fn level_cost(&self, level: usize, t_end: f64) -> Result<u64> {
        let n0 = self.base_steps(t_end)?;
        Ok(if level == 0 {
            n0
        } else {
            3 * (n0 << (level - 1))
        })
    }
}

/// Observer of the Brownian increments consumed by a coupled level.
pub trait CouplingObserver {
    fn observe<const M: usize>(&mut self, dw1: &Vector<M>, dw2: &Vector<M>, coarse: &Vector<M>);
}

impl CouplingObserver for () {
    #[inline]
    fn observe<const M: usize>(&mut self, _: &Vector<M>, _: &Vector<M>, _: &Vector<M>) {}
}

/// One sample of level `level` and the full coupled state it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSample {
    /// `φ̃(fine)·e^{log_rn_fine} − φ̃(coarse)·e^{log_rn_coarse}` (plain estimator on level 0).
    pub value: f64,
    pub fine: f64,
    pub coarse: f64,
    pub log_rn_fine: f64,
    pub log_rn_coarse: f64,
    pub cost: u64,
}

/// Draws one sample of level `level` from `noise`.
#[allow(clippy::too_many_arguments)]
pub fn level_sample<const M: usize, Mo: SdeModel<M> + ?Sized>(
    level: usize,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    config: &MlmcConfig,
    noise: &mut NoiseStream,
) -> Result<LevelSample> {
    level_sample_observed(
        level,
        model,
        params,
        estimator,
        t_end,
        config,
        noise,
        &mut (),
    )
}

/// [`level_sample`] reporting every `(dW1, dW2, coarse increment)` triple to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn level_sample_observed<const M: usize, Mo: SdeModel<M> + ?Sized, O: CouplingObserver>(
    level: usize,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    config: &MlmcConfig,
    noise: &mut NoiseStream,
    observer: &mut O,
) -> Result<LevelSample> {
    if estimator.kind == EstimatorKind::StandardPs {
        return Err(Error::UnsupportedKind(
            "standard pathwise estimator is not multileveled",
        ));
    }
    let n0 = config.base_steps(t_end)?;
    if level == 0 {
        let policy = StepPolicy::uniform(config.h0)?;
        let st = simulate_augmented(model, params, estimator, t_end, &policy, noise)?;
        let value = estimator.evaluate_state(model, &st);
        return Ok(LevelSample {
            value,
            fine: value,
            coarse: 0.0,
            log_rn_fine: 0.0,
            log_rn_coarse: 0.0,
            cost: st.steps,
        });
    }
    let coarse_steps = n0 << (level - 1);
    let h_c = t_end / coarse_steps as f64;
    let h_f = 0.5 * h_c;
    let spring = config.coupling_spring();
    let mut state = CoupledLevelState::initial(params.x0, estimator.initial_variation());
    for _ in 0..coarse_steps {
        let dw1 = noise.increment::<M>(h_f);
        let dw2 = noise.increment::<M>(h_f);
        coupled_step_observed(
            &mut state, h_c, &dw1, &dw2, model, params, estimator, spring, observer,
        )?;
    }
    let fine = estimator.evaluate_state(model, &state.fine);
    let coarse = estimator.evaluate_state(model, &state.coarse);
    Ok(LevelSample {
        value: fine * state.fine.log_rn.exp() - coarse * state.coarse.log_rn.exp(),
        fine,
        coarse,
        log_rn_fine: state.fine.log_rn,
        log_rn_coarse: state.coarse.log_rn,
        cost: state.fine.steps + state.coarse.steps,
    })
}

/// Statistics of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelResult {
    pub level: usize,
    pub n_samples: u64,
    pub mean: f64,
    /// Sample variance `V_ℓ` of the level difference.
    pub variance: f64,
    /// Timesteps per sample `C_ℓ`.
    pub cost: u64,
    /// Samples that went non-finite and were discarded.
    pub blowups: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LevelAcc {
    stats: MCStats,
    failed: u64,
}

impl Accumulator for LevelAcc {
    fn merge(&mut self, other: Self) {
        self.stats.merge(&other.stats);
        self.failed += other.failed;
    }
}

/// Level statistics over sample indices `first..first + n`, sample `i` drawing
/// from `NoiseStream::new(derive_seed(seed, level), i)`.
#[allow(clippy::too_many_arguments)]
fn level_batch<const M: usize, Mo: SdeModel<M> + ?Sized>(
    level: usize,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    config: &MlmcConfig,
    seed: u64,
    first: u64,
    n: u64,
) -> Result<LevelAcc> {
    let level_seed = derive_seed(seed, level as u64);
    // Surface configuration errors once rather than as per-path failures.
    config.base_steps(t_end)?;
    if estimator.kind == EstimatorKind::StandardPs {
        return Err(Error::UnsupportedKind(
            "standard pathwise estimator is not multileveled",
        ));
    }
    if level > 0 && !(params.sigma > 0.0) {
        return Err(invalid("sigma", "change of measure needs sigma > 0"));
    }
    Ok(parallel_accumulate(n, LevelAcc::default, |i, acc| {
        let mut noise = NoiseStream::new(level_seed, first + i);
        match level_sample(level, model, params, estimator, t_end, config, &mut noise) {
            Ok(s) if s.value.is_finite() => acc.stats.push(s.value),
            _ => acc.failed += 1,
        }
    }))
}

fn check_blowups(acc: &LevelAcc) -> Result<()> {
    let total = acc.stats.count() + acc.failed;
    if acc.failed * 100 > total {
        return Err(Error::TooManyBlowups {
            failed: acc.failed as usize,
            total: total as usize,
        });
    }
    Ok(())
}

/// Estimates `(mean, V_ℓ, C_ℓ)` of one level from `n` samples.
#[allow(clippy::too_many_arguments)]
pub fn level_statistics<const M: usize, Mo: SdeModel<M> + ?Sized>(
    level: usize,
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    config: &MlmcConfig,
    n: u64,
    seed: u64,
) -> Result<LevelResult> {
    config.validate()?;
    estimator.validate(params)?;
    if n < 2 {
        return Err(invalid("paths", "need at least 2 samples"));
    }
    let acc = level_batch(level, model, params, estimator, t_end, config, seed, 0, n)?;
    check_blowups(&acc)?;
    Ok(LevelResult {
        level,
        n_samples: acc.stats.count(),
        mean: acc.stats.mean(),
        variance: acc.stats.variance(),
        cost: config.level_cost(level, t_end)?,
        blowups: acc.failed,
    })
}

/// Outcome of [`mlmc_driver`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MlmcReport {
    pub estimate: f64,
    /// `sqrt(Σ V_ℓ / N_ℓ)`.
    pub stderr: f64,
    pub levels: Vec<LevelResult>,
    /// Total timesteps over all levels.
    pub total_cost: u64,
    /// Fitted weak rate: `|E[level ℓ]| ∝ 2^{−αℓ}`.
    pub alpha: f64,
    /// Fitted variance rate: `V_ℓ ∝ 2^{−βℓ}`.
    pub beta: f64,
}

/// Decay rate `r` of `y_ℓ ∝ 2^{−rℓ}` over levels `ℓ ≥ 1`, or `None` with fewer than two usable levels.
fn level_rate(levels: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|(l, y)| *l >= 1 && *y > 0.0)
        .map(|&(l, y)| (l as f64, y.log2()))
        .collect();
    fit_loglinear(&pts, Transform::LinLin)
        .ok()
        .map(|f| -f.slope)
}

/// Standard adaptive MLMC: warm up each level with `n_init` samples, allocate
/// `N_ℓ ∝ √(V_ℓ/C_ℓ)` so that `Σ V_ℓ/N_ℓ ≤ ε²/2`, and add levels until the
/// extrapolated bias `|E[level L]|/(2^α − 1)` is below `ε/√2`.
pub fn mlmc_driver<const M: usize, Mo: SdeModel<M> + ?Sized>(
    model: &Mo,
    params: &ModelParams<M>,
    estimator: &Estimator<M>,
    t_end: f64,
    config: &MlmcConfig,
    seed: u64,
) -> Result<MlmcReport> {
    config.validate()?;
    estimator.validate(params)?;
    let eps = config.target_rmse;
    let mut n_levels = config.max_levels.min(2) + 1;
    let mut accs: Vec<LevelAcc> = Vec::new();
    let mut extra: Vec<u64> = vec![config.n_init; n_levels];
    let costs: Vec<f64> = (0..=config.max_levels)
        .map(|l| config.level_cost(l, t_end).map(|c| c as f64))
        .collect::<Result<_>>()?;

    loop {
        for l in 0..n_levels {
            if l == accs.len() {
                accs.push(LevelAcc::default());
            }
            if extra[l] > 0 {
                let done = accs[l].stats.count() + accs[l].failed;
                let batch = level_batch(
                    l, model, params, estimator, t_end, config, seed, done, extra[l],
                )?;
                accs[l].merge(batch);
                check_blowups(&accs[l])?;
                extra[l] = 0;
            }
        }

        // Optimal allocation for the current set of levels.
        let var: Vec<f64> = accs.iter().map(|a| a.stats.variance()).collect();
        let budget: f64 = (0..n_levels).map(|l| (var[l] * costs[l]).sqrt()).sum();
        let mut pending = false;
        for l in 0..n_levels {
            let target = (2.0 / (eps * eps) * (var[l] / costs[l]).sqrt() * budget).ceil() as u64;
            let have = accs[l].stats.count();
            extra[l] = target.saturating_sub(have);
            pending |= extra[l] > 0;
        }
        if pending {
            continue;
        }

        let means: Vec<(usize, f64)> = accs
            .iter()
            .enumerate()
            .map(|(l, a)| (l, a.stats.mean().abs()))
            .collect();
        let alpha = level_rate(&means).unwrap_or(0.5).max(0.5);
        let last = accs[n_levels - 1].stats.mean().abs();
        if last / (2f64.powf(alpha) - 1.0) <= eps / 2f64.sqrt() {
            break;
        }
        if n_levels > config.max_levels {
            return Err(Error::MaxLevelsExceeded {
                max_levels: config.max_levels,
            });
        }
        n_levels += 1;
        extra.push(config.n_init);
    }

    let levels: Vec<LevelResult> = accs
        .iter()
        .enumerate()
        .map(|(l, a)| LevelResult {
            level: l,
            n_samples: a.stats.count(),
            mean: a.stats.mean(),
            variance: a.stats.variance(),
            cost: costs[l] as u64,
            blowups: a.failed,
        })
        .collect();
    let means: Vec<(usize, f64)> = levels.iter().map(|r| (r.level, r.mean.abs())).collect();
    let vars: Vec<(usize, f64)> = levels.iter().map(|r| (r.level, r.variance)).collect();
    Ok(MlmcReport {
        estimate: levels.iter().map(|r| r.mean).sum(),
        stderr: levels
            .iter()
            .map(|r| r.variance / r.n_samples as f64)
            .sum::<f64>()
            .sqrt(),
        total_cost: levels
            .iter()
            .map(|r| (r.n_samples + r.blowups) * r.cost)
            .sum(),
        alpha: level_rate(&means).unwrap_or(f64::NAN),
        beta: level_rate(&vars).unwrap_or(f64::NAN),
        levels,
    })
}
