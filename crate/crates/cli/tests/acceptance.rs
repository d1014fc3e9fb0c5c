//! Desk-scale acceptance suite. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test --test acceptance -- 3 7` runs a subset.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chaosens::estimators::{fd_sensitivity, FdTarget, DEFAULT_SPRING};
use chaosens::extrapolation::{ode_reference, rr_estimate, rr_weights, HorizonRule, RRScheme};
use chaosens::harness::{
    combined_stderr, fit_loglinear, lambda_star_estimate, mc_run, parallel_accumulate,
    variance_vs_t_study, weak_convergence_study, Transform,
};
use chaosens::integrate::derive_seed;
use chaosens::linalg::Vector;
use chaosens::mlmc::{
    level_sample_observed, level_statistics, mlmc_driver, CouplingObserver, MlmcConfig,
};
use chaosens::{
    Estimator, Lorenz, MCStats, ModelParams, NoiseStream, OrnsteinUhlenbeck, StepPolicy, LORENZ_X0,
};

type Outcome = anyhow::Result<(bool, String)>;

const N: u64 = 100_000;

fn h(k: i32) -> f64 {
    2f64.powi(-k)
}

fn lorenz(sigma: f64) -> ModelParams<3> {
    ModelParams::new(28.0, sigma, LORENZ_X0).unwrap()
}

fn uniform(k: i32) -> StepPolicy {
    StepPolicy::uniform(h(k)).unwrap()
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn in_band(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn timed(ok: bool, started: Instant, limit: Duration) -> (bool, String) {
    let el = started.elapsed();
    (
        ok && el <= limit,
        format!("{:.0}s/{}s", el.as_secs_f64(), limit.as_secs()),
    )
}

fn c1() -> Outcome {
    let model = OrnsteinUhlenbeck::new(1.0, 0.0)?;
    let p = model.params(0.5, 1.0)?;
    let pol = uniform(8);
    let target_mu = 1.0 - (-1.0f64).exp();
    let cases: [(&str, Estimator<1>, f64, f64); 5] = [
        ("standard", Estimator::standard_ps(), target_mu, 2.0 * h(8)),
        ("malliavin", Estimator::malliavin(), target_mu, 2.0 * h(8)),
        (
            "isps-theta",
            Estimator::is_ps_theta(DEFAULT_SPRING),
            target_mu,
            2.0 * h(8),
        ),
        (
            "isps-sigma",
            Estimator::is_ps_sigma(DEFAULT_SPRING),
            0.0,
            0.0,
        ),
        (
            "isps-x0",
            Estimator::is_ps_x0(DEFAULT_SPRING, [1.0]),
            (-1.0f64).exp(),
            0.0,
        ),
    ];
    let mut ok = true;
    let mut msg = Vec::new();
    for (name, est, target, bias) in cases {
        let t0 = Instant::now();
        let r = mc_run(&model, &p, &est, 1.0, &pol, N, 11)?;
        let (pass, time) = timed(
            within(r.mean(), target, 3.0 * r.stderr() + bias),
            t0,
            Duration::from_secs(60),
        );
        ok &= pass;
        msg.push(format!(
            "{name} {:.5}±{:.5} vs {target:.5} ({time})",
            r.mean(),
            r.stderr()
        ));
    }
    Ok((ok, msg.join("; ")))
}

fn c2() -> Outcome {
    let t0 = Instant::now();
    let grid = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
    let v = variance_vs_t_study(
        &Lorenz::new(),
        &lorenz(6.0),
        &Estimator::standard_ps(),
        &grid,
        &uniform(9),
        N,
        21,
    )?;
    let ok = in_band(v.fit.slope, 2.4, 4.4) && v.fit.r_squared > 0.95;
    let (ok, time) = timed(ok, t0, Duration::from_secs(300));
    Ok((
        ok,
        format!(
            "ln-variance slope {:.3} (r² {:.3}, {} clamped) {time}",
            v.fit.slope, v.fit.r_squared, v.clamped
        ),
    ))
}

/// Malliavin and IsPsTheta over T = 2..20, shared by criteria 3 and 4.
struct LinearStudies {
    malliavin: chaosens::harness::VarianceStudy,
    isps: chaosens::harness::VarianceStudy,
    elapsed: Duration,
}

fn linear_studies() -> anyhow::Result<LinearStudies> {
    let t0 = Instant::now();
    let grid: Vec<f64> = (1..=10).map(|k| 2.0 * k as f64).collect();
    let (m, p, pol) = (Lorenz::new(), lorenz(6.0), uniform(9));
    let malliavin = variance_vs_t_study(&m, &p, &Estimator::malliavin(), &grid, &pol, N, 31)?;
    let isps = variance_vs_t_study(&m, &p, &Estimator::is_ps_theta(10.0), &grid, &pol, N, 32)?;
    Ok(LinearStudies {
        malliavin,
        isps,
        elapsed: t0.elapsed(),
    })
}

fn c3(s: &LinearStudies) -> Outcome {
    let (a, b) = (&s.malliavin.fit, &s.isps.fit);
    let smaller = s
        .isps
        .rows
        .iter()
        .zip(&s.malliavin.rows)
        .all(|(i, m)| i.variance < m.variance);
    let ok = in_band(a.slope, 0.7, 1.3) && in_band(b.slope, 0.7, 1.3) && smaller;
    let limit = Duration::from_secs(600);
    let ratio: Vec<String> = s
        .isps
        .rows
        .iter()
        .zip(&s.malliavin.rows)
        .map(|(i, m)| format!("{:.2}", i.variance / m.variance))
        .collect();
    Ok((
        ok && s.elapsed <= limit,
        format!(
            "slopes malliavin {:.3} (r² {:.3}), isps-theta {:.3} (r² {:.3}); var ratio isps/malliavin [{}] {:.0}s/600s",
            a.slope,
            a.r_squared,
            b.slope,
            b.r_squared,
            ratio.join(","),
            s.elapsed.as_secs_f64()
        ),
    ))
}

fn c4(s: &LinearStudies) -> Outcome {
    let pick = |v: &chaosens::harness::VarianceStudy| {
        *v.rows.iter().find(|r| r.t == 10.0).expect("T=10 in grid")
    };
    let (a, b) = (pick(&s.malliavin), pick(&s.isps));
    let se = combined_stderr(a.stderr, b.stderr);
    Ok((
        (a.mean - b.mean).abs() < 3.0 * se,
        format!(
            "malliavin {:.4}±{:.4}, isps-theta {:.4}±{:.4} at T=10",
            a.mean, a.stderr, b.mean, b.stderr
        ),
    ))
}

fn c5() -> Outcome {
    let t0 = Instant::now();
    let (m, p, pol) = (Lorenz::new(), lorenz(6.0), uniform(9));
    let n = 2 * N;
    let is = mc_run(&m, &p, &Estimator::is_ps_sigma(10.0), 10.0, &pol, n, 51)?;
    let fd = fd_sensitivity(&m, &p, 10.0, &pol, 51, 0.2, n, FdTarget::Sigma)?;
    let agree = (is.mean() - fd.estimate).abs() < 3.0 * combined_stderr(is.stderr(), fd.stderr);
    let band = |x: f64| in_band(x, 0.1268 - 0.05, 0.1274 + 0.05);
    let (ok, time) = timed(
        agree && band(is.mean()) && band(fd.estimate),
        t0,
        Duration::from_secs(300),
    );
    Ok((
        ok,
        format!(
            "isps-sigma {:.4}±{:.4}, crn-fd {:.4}±{:.4}; agree={agree} {time}",
            is.mean(),
            is.stderr(),
            fd.estimate,
            fd.stderr
        ),
    ))
}

fn c6() -> Outcome {
    let grid: Vec<f64> = (1..=10).map(|k| 2.0 * k as f64).collect();
    let est = Estimator::is_ps_x0(10.0, [0.0, 0.0, 1.0]);
    let v = variance_vs_t_study(
        &Lorenz::new(),
        &lorenz(6.0),
        &est,
        &grid,
        &uniform(9),
        N,
        61,
    )?;
    let at10 = v.rows.iter().find(|r| r.t == 10.0).expect("T=10 in grid");
    let ok = at10.mean.abs() < 3.0 * at10.stderr && v.fit.slope.abs() < 0.3;
    Ok((
        ok,
        format!(
            "mean at T=10 {:.4}±{:.4}; variance log-log slope {:.3}",
            at10.mean, at10.stderr, v.fit.slope
        ),
    ))
}

/// Records whether every coarse increment was the exact sum of its two fine increments.
#[derive(Default)]
struct IncrementCheck {
    steps: u64,
    mismatches: u64,
}

impl CouplingObserver for IncrementCheck {
    fn observe<const M: usize>(&mut self, dw1: &Vector<M>, dw2: &Vector<M>, coarse: &Vector<M>) {
        self.steps += 1;
        if (0..M).any(|i| (dw1[i] + dw2[i]).to_bits() != coarse[i].to_bits()) {
            self.mismatches += 1;
        }
    }
}

impl chaosens::harness::Accumulator for IncrementCheck {
    fn merge(&mut self, other: Self) {
        self.steps += other.steps;
        self.mismatches += other.mismatches;
    }
}

fn c7() -> Outcome {
    let (m, p) = (Lorenz::new(), lorenz(6.0));
    let cfg = MlmcConfig::default();
    let est = Estimator::is_ps_theta(10.0);
    let seed = derive_seed(71, 2);
    let (w, check) = parallel_accumulate(
        N,
        || (MCStats::new(), IncrementCheck::default()),
        |i, (w, check)| {
            let mut s = NoiseStream::new(seed, i);
            if let Ok(x) = level_sample_observed(2, &m, &p, &est, 5.0, &cfg, &mut s, check) {
                w.push(x.log_rn_fine.exp());
            }
        },
    );
    let mean_one = (w.mean() - 1.0).abs() <= 4.0 * w.stderr();
    let exact = check.mismatches == 0 && check.steps > 0;
    Ok((
        mean_one && exact,
        format!(
            "E[w_fine] {:.4}±{:.4} over {} samples; {} coupled steps, {} increment mismatches",
            w.mean(),
            w.stderr(),
            w.count(),
            check.steps,
            check.mismatches
        ),
    ))
}

fn c8() -> Outcome {
    let t0 = Instant::now();
    let (m, p) = (Lorenz::new(), lorenz(6.0));
    let est = Estimator::is_ps_theta(10.0);
    let cfg = MlmcConfig::default();
    let n = 20_000;
    let mut vs = Vec::new();
    for l in 1..=4 {
        vs.push((
            l as f64,
            level_statistics(l, &m, &p, &est, 10.0, &cfg, n, 81)?
                .variance
                .log2(),
        ));
    }
    let level_fit = fit_loglinear(&vs, Transform::LinLin)?;
    let mut vt = Vec::new();
    for t in [4.0, 8.0, 12.0, 16.0] {
        vt.push((
            t,
            level_statistics(1, &m, &p, &est, t, &cfg, n, 82)?.variance,
        ));
    }
    let t_fit = fit_loglinear(&vt, Transform::LogLog)?;
    let plain = MlmcConfig {
        change_of_measure: false,
        ..cfg
    };
    let v0 = level_statistics(0, &m, &p, &est, 16.0, &plain, n, 83)?.variance;
    let v1 = level_statistics(1, &m, &p, &est, 16.0, &plain, n, 83)?.variance;
    let ok =
        in_band(level_fit.slope, -2.6, -1.4) && in_band(t_fit.slope, 1.5, 2.5) && v1 / v0 > 1.0;
    let (ok, time) = timed(ok, t0, Duration::from_secs(900));
    let lv: Vec<String> = vs
        .iter()
        .map(|(_, y)| format!("{:.2e}", y.exp2()))
        .collect();
    let tv: Vec<String> = vt.iter().map(|(_, y)| format!("{y:.2e}")).collect();
    Ok((
        ok,
        format!(
            "log2 V_l slope {:.3} (V_1..4 [{}]); V_1 vs T slope {:.3} ([{}]); no-CoM V1/V0 at T=16 {:.3} {time}",
            level_fit.slope,
            lv.join(","),
            t_fit.slope,
            tv.join(","),
            v1 / v0
        ),
    ))
}

fn c9() -> Outcome {
    let ou = OrnsteinUhlenbeck::new(1.0, 0.0)?;
    let p = ou.params(0.5, 1.0)?;
    let cfg = MlmcConfig {
        target_rmse: 0.01,
        h0: h(4),
        ..MlmcConfig::default()
    };
    let r = mlmc_driver(&ou, &p, &Estimator::malliavin(), 1.0, &cfg, 91)?;
    let exact = 1.0 - (-1.0f64).exp();
    let ou_ok = (r.estimate - exact).abs() < 3.0 * cfg.target_rmse;

    let (m, lp) = (Lorenz::new(), lorenz(6.0));
    let est = Estimator::is_ps_theta(10.0);
    let lcfg = MlmcConfig::default();
    let (mut tele, mut var) = (0.0, 0.0);
    for l in 0..=3 {
        let s = level_statistics(l, &m, &lp, &est, 2.0, &lcfg, N, 92)?;
        tele += s.mean;
        var += s.variance / s.n_samples as f64;
    }
    let fine = mc_run(
        &m,
        &lp,
        &est,
        2.0,
        &StepPolicy::uniform(lcfg.h0 / 8.0)?,
        N,
        93,
    )?;
    let se = combined_stderr(var.sqrt(), fine.stderr());
    let tele_ok = (tele - fine.mean()).abs() < 3.0 * se;
    Ok((
        ou_ok && tele_ok,
        format!(
            "OU mlmc {:.5} vs {exact:.5} ({} levels); Lorenz telescoped {:.4}±{:.4} vs fine {:.4}±{:.4}",
            r.estimate,
            r.levels.len(),
            tele,
            var.sqrt(),
            fine.mean(),
            fine.stderr()
        ),
    ))
}

fn c10() -> Outcome {
    let exact = [vec![1.0], vec![-1.0, 2.0], vec![0.5, -4.0, 4.5]];
    let mut ok = true;
    for (r, w) in exact.iter().enumerate() {
        ok &= rr_weights(r + 1)? == *w;
    }
    let mut worst: f64 = 0.0;
    for r in 1..=8 {
        let w = rr_weights(r)?;
        let sum: f64 = w.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        for j in 1..r {
            let m: f64 = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * ((k + 1) as f64).powi(-(j as i32)))
                .sum();
            worst = worst.max(m.abs());
        }
    }
    Ok((
        ok && worst < 1e-12,
        format!("R=1..3 exact: {ok}; worst order-condition residual {worst:.2e}"),
    ))
}

fn c11() -> Outcome {
    let t0 = Instant::now();
    let (m, pol) = (Lorenz::new(), uniform(9));
    let est = Estimator::is_ps_theta(10.0);
    let scheme = RRScheme::new(2, 15.0)?;
    let rr = rr_estimate(&m, &lorenz(15.0), &est, &scheme, 2.0, &pol, N, 111)?;
    let t_plain = HorizonRule::default().horizon(6.0)?;
    let plain = mc_run(&m, &lorenz(6.0), &est, t_plain, &pol, N, 112)?;
    let reference = 0.981;
    let ok = within(rr.estimate, 0.978, 0.05)
        && (plain.mean() - reference).abs() > (rr.estimate - reference).abs();
    let (ok, time) = timed(ok, t0, Duration::from_secs(300));
    Ok((
        ok,
        format!(
            "RR2 {:.4}±{:.4}; plain σ=6 at T={t_plain} {:.4}±{:.4}; reference {reference} {time}",
            rr.estimate,
            rr.stderr,
            plain.mean(),
            plain.stderr()
        ),
    ))
}

fn c12() -> Outcome {
    let (m, pol) = (Lorenz::new(), uniform(9));
    let mut pts = Vec::new();
    let mut shown = Vec::new();
    for (k, sigma) in [2.0, 4.0, 6.0, 8.0].into_iter().enumerate() {
        let l = lambda_star_estimate(&m, &lorenz(sigma), 20.0, 0.25, 10, &pol, N, 120 + k as u64)?;
        pts.push((sigma * sigma, l.lambda));
        shown.push(format!(
            "σ={sigma}: {:.3}±{:.3}",
            l.lambda, l.fit.slope_stderr
        ));
    }
    let f = fit_loglinear(&pts, Transform::LinLin)?;
    let ok = f.r_squared > 0.9 && f.intercept.abs() < 2.0 * f.intercept_stderr;
    Ok((
        ok,
        format!(
            "λ* [{}]; on σ²: slope {:.4}, intercept {:.3}±{:.3}, r² {:.3}",
            shown.join(", "),
            f.slope,
            f.intercept,
            f.intercept_stderr,
            f.r_squared
        ),
    ))
}

fn c13() -> Outcome {
    let m = Lorenz::new();
    let reference = ode_reference(&m, 28.0, LORENZ_X0, 3000.0, 1e-3)?;
    let w = weak_convergence_study(
        &m,
        &lorenz(1.0),
        &Estimator::value(),
        &[28.0],
        &[1.0, 2.0, 4.0, 8.0],
        &[reference],
        &HorizonRule::default(),
        &uniform(10),
        N,
        131,
    )?;
    let f = w.fits[0];
    let errs: Vec<String> = w
        .rows
        .iter()
        .map(|r| format!("{:.3}", r.weak_error))
        .collect();
    Ok((
        in_band(f.slope, 0.6, 1.4),
        format!(
            "ODE reference {reference:.4}; weak errors [{}]; log-log slope {:.3} (r² {:.3})",
            errs.join(","),
            f.slope,
            f.r_squared
        ),
    ))
}

fn c14() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_chaosens");
    let runs: [&[&str]; 7] = [
        &["simulate", "--t-grid", "1,2"],
        &["sens", "--T", "2", "--estimator", "malliavin"],
        &["variance-study", "--t-grid", "1,2,3,4"],
        &["lambda-star", "--t-max", "4"],
        &[
            "weak-sigma",
            "--sigma-grid",
            "4,8,16",
            "--t-max",
            "3",
            "--reference",
            "0.98",
        ],
        &["mlmc", "--eps", "0.5", "--T", "1"],
        &["rr", "--T", "1", "--sigma", "15", "--per-sigma"],
    ];
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for args in runs {
        for d in &dirs {
            let out = Command::new(bin)
                .args(["--seed", "1234", "--paths", "2000", "--out"])
                .arg(d.path())
                .args(args)
                .output()?;
            anyhow::ensure!(
                out.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }
    let mut files = 0;
    let mut differing = Vec::new();
    for entry in std::fs::read_dir(dirs[0].path())? {
        let name = entry?.file_name();
        files += 1;
        if std::fs::read(dirs[0].path().join(&name))? != std::fs::read(dirs[1].path().join(&name))?
        {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    Ok((
        differing.is_empty() && files == 13,
        format!(
            "{files} files compared over {} commands; differing: {differing:?}",
            runs.len()
        ),
    ))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |k: usize| wanted.is_empty() || wanted.contains(&k);
    let mut failures = 0;
    let mut report = |k: usize, outcome: Outcome| {
        let line = match outcome {
            Ok((true, msg)) => format!("criterion {k}: PASS — {msg}"),
            Ok((false, msg)) => {
                failures += 1;
                format!("criterion {k}: FAIL — {msg}")
            }
            Err(e) => {
                failures += 1;
                format!("criterion {k}: FAIL — error: {e:#}")
            }
        };
        println!("{line}");
    };
    let simple: [(usize, fn() -> Outcome); 2] = [(1, c1), (2, c2)];
    for (k, f) in simple {
        if run(k) {
            report(k, f());
        }
    }
    if run(3) || run(4) {
        match linear_studies() {
            Ok(s) => {
                if run(3) {
                    report(3, c3(&s));
                }
                if run(4) {
                    report(4, c4(&s));
                }
            }
            Err(e) => {
                for k in [3, 4].into_iter().filter(|&k| run(k)) {
                    report(k, Err(anyhow::anyhow!("{e:#}")));
                }
            }
        }
    }
    let rest: [(usize, fn() -> Outcome); 10] = [
        (5, c5),
        (6, c6),
        (7, c7),
        (8, c8),
        (9, c9),
        (10, c10),
        (11, c11),
        (12, c12),
        (13, c13),
        (14, c14),
    ];
    for (k, f) in rest {
        if run(k) {
            report(k, f());
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
