//! Parameter sensitivities of chaotic SDEs `dX = f(θ; X) dt + σ dW`.
//!
//! The crate provides the standard pathwise estimator (whose variance grows
//! exponentially in time for chaotic drifts), the Malliavin weight estimator,
//! and the spring-coupled pathwise estimator that keeps the variation process
//! contractive and undoes the spring by a Girsanov weight. On top of those it
//! offers multilevel Monte Carlo with change of measure between fine and
//! coarse paths, and Richardson–Romberg extrapolation in the volatility to
//! approach the deterministic (ODE) limit.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod extrapolation;
pub mod harness;
pub mod integrate;
pub mod linalg;
pub mod mlmc;
pub mod models;

pub use error::{Error, Result};
pub use estimators::{Estimator, EstimatorKind, EstimatorSample};
pub use harness::{FitResult, MCStats};
pub use integrate::{NoiseStream, StepPolicy};
pub use models::{Lorenz, ModelParams, OrnsteinUhlenbeck, SdeModel, LORENZ_X0};
