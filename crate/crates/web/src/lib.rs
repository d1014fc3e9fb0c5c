//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function returning a flat
//! `Vec<f64>`, so the logic is testable natively.

use wasm_bindgen::prelude::*;

use chaosens::extrapolation::{rr_estimate, RRScheme};
use chaosens::harness::{mc_run_snapshots, RunOptions, STANDARD_PS_CLAMP};
use chaosens::integrate::{em_step, BrownianSource};
use chaosens::{Estimator, EstimatorKind, Lorenz, ModelParams, NoiseStream, StepPolicy, LORENZ_X0};

/// Hard cap on the work one call may request, in path-steps.
pub const MAX_WORK: f64 = 2e8;

fn lorenz_params(theta: f64, sigma: f64) -> Result<ModelParams<3>, String> {
    ModelParams::new(theta, sigma, LORENZ_X0).map_err(|e| e.to_string())
}

fn check_work(paths: u32, t_end: f64, h: f64) -> Result<(), String> {
    let work = paths as f64 * t_end / h;
    if work.is_nan() || work > MAX_WORK {
        return Err(format!(
            "request of {work:.1e} path-steps exceeds the demo limit of {MAX_WORK:.0e}"
        ));
    }
    Ok(())
}

/// One Euler–Maruyama path of the stochastic Lorenz system, flattened as
/// `[x0, y0, z0, x1, y1, z1, …]`.
pub fn trajectory(
    theta: f64,
    sigma: f64,
    t_end: f64,
    h: f64,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let p = lorenz_params(theta, sigma)?;
    let policy = StepPolicy::uniform(h).map_err(|e| e.to_string())?;
    let n = policy
        .uniform_steps(t_end)
        .ok_or("t_end must be positive")?;
    check_work(1, t_end, h)?;
    let model = Lorenz::new();
    let mut noise = NoiseStream::new(seed, 0);
    let mut x = p.x0;
    let mut out = Vec::with_capacity(3 * (n as usize + 1));
    out.extend_from_slice(&x);
    for _ in 0..n {
        let dw = noise.increment::<3>(h);
        x = em_step(&x, h, &dw, &model, &p);
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
        out.extend_from_slice(&x);
    }
    Ok(out)
}

/// Sample variance of an estimator at each horizon `spacing, 2·spacing, …, t_max`,
/// flattened as `[T, variance, mean, …]`.
pub fn variance_curve(
    estimator: &str,
    sigma: f64,
    spring: f64,
    t_max: f64,
    spacing: f64,
    paths: u32,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let kind: EstimatorKind = estimator
        .parse()
        .map_err(|e: chaosens::Error| e.to_string())?;
    if !matches!(
        kind,
        EstimatorKind::StandardPs | EstimatorKind::Malliavin | EstimatorKind::IsPsTheta
    ) {
        return Err(format!("{kind} is not a θ-sensitivity estimator"));
    }
    if !(spacing > 0.0 && t_max >= spacing) {
        return Err("need 0 < spacing ≤ t_max".into());
    }
    let h = 2f64.powi(-8);
    check_work(paths, t_max, h)?;
    let times: Vec<f64> = (1..=(t_max / spacing).floor() as usize)
        .map(|k| k as f64 * spacing)
        .collect();
    let p = lorenz_params(28.0, sigma)?;
    let policy = StepPolicy::uniform(h).map_err(|e| e.to_string())?;
    let mut opts = RunOptions::for_kind(kind);
    if kind == EstimatorKind::StandardPs {
        opts.clamp = Some(STANDARD_PS_CLAMP);
    }
    let runs = mc_run_snapshots(
        &Lorenz::new(),
        &p,
        &Estimator::new(kind, spring),
        &times,
        &policy,
        paths as u64,
        seed,
        opts,
    )
    .map_err(|e| e.to_string())?;
    Ok(runs
        .iter()
        .flat_map(|r| [r.t, r.variance(), r.mean()])
        .collect())
}

/// Richardson–Romberg θ-sensitivity at volatilities `k·σ_base`, flattened as
/// `[estimate, stderr, σ_1, w_1, mean_1, σ_2, w_2, mean_2, …]`.
pub fn rr_demo(
    order: u32,
    base_sigma: f64,
    t_end: f64,
    paths: u32,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let scheme = RRScheme::new(order as usize, base_sigma).map_err(|e| e.to_string())?;
    let h = 2f64.powi(-8);
    check_work(paths * order, t_end, h)?;
    let policy = StepPolicy::uniform(h).map_err(|e| e.to_string())?;
    let p = lorenz_params(28.0, base_sigma)?;
    let r = rr_estimate(
        &Lorenz::new(),
        &p,
        &Estimator::is_ps_theta(10.0),
        &scheme,
        t_end,
        &policy,
        paths as u64,
        seed,
    )
    .map_err(|e| e.to_string())?;
    let mut out = vec![r.estimate, r.stderr];
    for ((s, w), st) in r.sigmas.iter().zip(&r.weights).zip(&r.rungs) {
        out.extend([*s, *w, st.mean()]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = trajectory)]
pub fn trajectory_js(
    theta: f64,
    sigma: f64,
    t_end: f64,
    h: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    trajectory(theta, sigma, t_end, h, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = varianceCurve)]
pub fn variance_curve_js(
    estimator: &str,
    sigma: f64,
    spring: f64,
    t_max: f64,
    spacing: f64,
    paths: u32,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    variance_curve(estimator, sigma, spring, t_max, spacing, paths, seed as u64)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rrEstimate)]
pub fn rr_demo_js(
    order: u32,
    base_sigma: f64,
    t_end: f64,
    paths: u32,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    rr_demo(order, base_sigma, t_end, paths, seed as u64).map_err(|e| JsError::new(&e))
}
