use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Coordinate transform applied before an ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    LinLin,
    /// `ln y` against `x`.
    LogLin,
    /// `ln y` against `ln x`.
    LogLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub n: usize,
}

pub fn fit_loglinear(points: &[(f64, f64)], transform: Transform) -> Result<FitResult> {
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(x, y) in points {
        let (tx, ty) = match transform {
            Transform::LinLin => (x, y),
            Transform::LogLin => (x, positive_log("y", y)?),
            Transform::LogLog => (positive_log("x", x)?, positive_log("y", y)?),
        };
        if !tx.is_finite() || !ty.is_finite() {
            return Err(invalid("points", "non-finite coordinate"));
        }
        xs.push(tx);
        ys.push(ty);
    }
    least_squares(&xs, &ys)
}

fn positive_log(name: &'static str, v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v.ln())
    } else {
        Err(invalid(
            name,
            format!("log transform needs positive values, got {v}"),
        ))
    }
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::DegenerateFit);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * nf {
        return Err(Error::DegenerateFit);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let (slope_stderr, intercept_stderr) = if n > 2 {
        let s2 = sse / (nf - 2.0);
        ((s2 / sxx).sqrt(), (s2 * (1.0 / nf + mx * mx / sxx)).sqrt())
    } else {
        (0.0, 0.0)
    };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        intercept_stderr,
        n,
    })
}
