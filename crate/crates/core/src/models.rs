//! SDE models `dX = f(θ; X) dt + σ dW` with the analytic derivatives the
//! sensitivity estimators consume.
//!
//! A model supplies the drift `f`, its Jacobian `∂f/∂x`, the parameter
//! direction `γ = ∂f/∂θ`, and an observable `φ` with gradient. The observable
//! is a caller contract: it must be differentiable with polynomial growth,
//! which is not checked at runtime.
//!
//! Models are immutable values and are shared freely across worker threads.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, Vector};

/// Drift parameter, additive volatility and initial state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<const M: usize> {
    pub theta: f64,
    pub sigma: f64,
    #[serde(with = "vector_serde")]
    pub x0: Vector<M>,
}

impl<const M: usize> ModelParams<M> {
    /// Validates `sigma >= 0` and finite inputs. `sigma = 0` is only useful for
    /// deterministic reference runs; estimators reject it separately.
    pub fn new(theta: f64, sigma: f64, x0: Vector<M>) -> Result<Self> {
        if !theta.is_finite() {
            return Err(invalid("theta", "must be finite"));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(
                "sigma",
                format!("must be finite and >= 0, got {sigma}"),
            ));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0", "must be finite"));
        }
        Ok(Self { theta, sigma, x0 })
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_x0(mut self, x0: Vector<M>) -> Self {
        self.x0 = x0;
        self
    }

    pub(crate) fn require_positive_sigma(&self) -> Result<()> {
        if self.sigma > 0.0 {
            Ok(())
        } else {
            Err(invalid("sigma", "estimators require sigma > 0"))
        }
    }
}

/// An `M`-dimensional SDE model with additive noise.
pub trait SdeModel<const M: usize>: Sync {
    fn name(&self) -> &'static str;

    fn drift(&self, x: &Vector<M>, theta: f64) -> Vector<M>;

    /// `∂f/∂x`, row `i` holding the gradient of drift component `i`.
    fn drift_jacobian(&self, x: &Vector<M>, theta: f64) -> Matrix<M>;

    /// The perturbation direction `γ(x) = ∂f/∂θ`.
    fn drift_dtheta(&self, x: &Vector<M>, theta: f64) -> Vector<M>;

    fn observable(&self, x: &Vector<M>) -> f64;

    fn observable_grad(&self, x: &Vector<M>) -> Vector<M>;

    #[inline]
    fn jacobian_times(&self, x: &Vector<M>, theta: f64, v: &Vector<M>) -> Vector<M> {
        crate::linalg::matvec(&self.drift_jacobian(x, theta), v)
    }
}

/// Initial condition used throughout the Lorenz experiments.
pub const LORENZ_X0: Vector<3> = [-2.4, -3.7, 14.98];

/// Stochastic Lorenz system with `θ` in the Rayleigh-number slot.
///
/// The observable is one coordinate of the state, the third (`x³`) by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz {
    component: usize,
}

impl Default for Lorenz {
    fn default() -> Self {
        Self { component: 2 }
    }
}

impl Lorenz {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lorenz with observable `φ(x) = x[component]`.
    pub fn observing(component: usize) -> Result<Self> {
        if component >= 3 {
            return Err(invalid("component", "must be 0, 1 or 2"));
        }
        Ok(Self { component })
    }

    pub fn component(&self) -> usize {
        self.component
    }
}

pub fn lorenz_drift(x: &Vector<3>, theta: f64) -> Vector<3> {
    [
        10.0 * (x[1] - x[0]),
        x[0] * (theta - x[2]) - x[1],
        x[0] * x[1] - (8.0 / 3.0) * x[2],
    ]
}

pub fn lorenz_jacobian(x: &Vector<3>, theta: f64) -> Matrix<3> {
    [
        [-10.0, 10.0, 0.0],
        [theta - x[2], -1.0, -x[0]],
        [x[1], x[0], -8.0 / 3.0],
    ]
}

pub fn lorenz_dtheta(x: &Vector<3>) -> Vector<3> {
    [0.0, x[0], 0.0]
}

impl SdeModel<3> for Lorenz {
    fn name(&self) -> &'static str {
        "lorenz"
    }

    #[inline]
    fn drift(&self, x: &Vector<3>, theta: f64) -> Vector<3> {
        lorenz_drift(x, theta)
    }

    #[inline]
    fn drift_jacobian(&self, x: &Vector<3>, theta: f64) -> Matrix<3> {
        lorenz_jacobian(x, theta)
    }

    #[inline]
    fn drift_dtheta(&self, x: &Vector<3>, _theta: f64) -> Vector<3> {
        lorenz_dtheta(x)
    }

    #[inline]
    fn observable(&self, x: &Vector<3>) -> f64 {
        x[self.component]
    }

    #[inline]
    fn observable_grad(&self, _x: &Vector<3>) -> Vector<3> {
        let mut g = [0.0; 3];
        g[self.component] = 1.0;
        g
    }

    #[inline]
    fn jacobian_times(&self, x: &Vector<3>, theta: f64, v: &Vector<3>) -> Vector<3> {
        [
            10.0 * (v[1] - v[0]),
            (theta - x[2]) * v[0] - v[1] - x[0] * v[2],
            x[1] * v[0] + x[0] * v[1] - (8.0 / 3.0) * v[2],
        ]
    }
}

/// Ornstein–Uhlenbeck test model `dX = κ(θ − X) dt + σ dW`, `φ(x) = x`.
///
/// The drift parameter `θ` is the long-run mean `μ`, so `γ(x) = κ`. All
/// sensitivities of `E[X_T]` are known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrnsteinUhlenbeck {
    pub kappa: f64,
    pub mu: f64,
}

impl OrnsteinUhlenbeck {
    pub fn new(kappa: f64, mu: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(invalid(
                "kappa",
                format!("must be > 0 for mean reversion, got {kappa}"),
            ));
        }
        if !mu.is_finite() {
            return Err(invalid("mu", "must be finite"));
        }
        Ok(Self { kappa, mu })
    }

    /// Parameters with `θ = μ`.
    pub fn params(&self, sigma: f64, x0: f64) -> Result<ModelParams<1>> {
        ModelParams::new(self.mu, sigma, [x0])
    }

    pub fn mean(&self, x0: f64, t: f64) -> f64 {
        self.mu + (x0 - self.mu) * (-self.kappa * t).exp()
    }

    pub fn dmean_dmu(&self, t: f64) -> f64 {
        1.0 - (-self.kappa * t).exp()
    }

    pub fn dmean_dx0(&self, t: f64) -> f64 {
        (-self.kappa * t).exp()
    }

    pub fn dmean_dsigma(&self, _t: f64) -> f64 {
        0.0
    }
}

/// Convenience constructor mirroring `ou_model(kappa, mu)`.
pub fn ou_model(kappa: f64, mu: f64) -> Result<OrnsteinUhlenbeck> {
    OrnsteinUhlenbeck::new(kappa, mu)
}

impl SdeModel<1> for OrnsteinUhlenbeck {
    fn name(&self) -> &'static str {
        "ou"
    }

    #[inline]
    fn drift(&self, x: &Vector<1>, theta: f64) -> Vector<1> {
        [self.kappa * (theta - x[0])]
    }

    #[inline]
    fn drift_jacobian(&self, _x: &Vector<1>, _theta: f64) -> Matrix<1> {
        [[-self.kappa]]
    }

    #[inline]
    fn drift_dtheta(&self, _x: &Vector<1>, _theta: f64) -> Vector<1> {
        [self.kappa]
    }

    #[inline]
    fn observable(&self, x: &Vector<1>) -> f64 {
        x[0]
    }

    #[inline]
    fn observable_grad(&self, _x: &Vector<1>) -> Vector<1> {
        [1.0]
    }
}

mod vector_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const M: usize>(v: &[f64; M], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const M: usize>(
        d: D,
    ) -> Result<[f64; M], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let len = v.len();
        v.try_into()
            .map_err(|_| D::Error::custom(format!("expected {M} components, got {len}")))
    }
}
