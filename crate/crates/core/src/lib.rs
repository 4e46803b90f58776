//! Numerical laboratory for anisotropic phase retrieval.
//!
//! The model is `y = <x, w*>^2` with `x ~ N(0, Q)`, `Q = diag(lambda_i)`,
//! `lambda_i ∝ i^{-a}` and `tr Q = 1`, trained on the quartic population
//! loss `E[((x.w)^2 - (x.w*)^2)^2]`. The crate provides
//!
//! * [`spectrum`]: power-law spectra, teacher sampling, tail masses;
//! * [`model`]: closed-form loss, gradient, Hessian action, critical points;
//! * [`stats`]: the moment hierarchy `u^(k)`, `s^(k)`, MSE and the phase clock;
//! * [`dynamics`]: population gradient descent, online SGD and a truncated
//!   moment-hierarchy integrator;
//! * [`volterra`]: escape-phase kernels, the dispersion relation and a
//!   product-trapezoid Volterra solver;
//! * [`phases`]: stopping-time detection and the time-to-accuracy predictor;
//! * [`scaling`]: spectral mixing curves and log-log exponent fits;
//! * [`experiment`]: the config-driven runner writing CSV + JSON artifacts.

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod phases;
pub(crate) mod rng;
pub mod scaling;
pub mod spectrum;
pub mod stats;
pub mod volterra;

pub use error::{Error, Result};
pub use spectrum::{Normalization, Spectrum, Teacher};
pub use stats::{StatRecord, Trajectory};
