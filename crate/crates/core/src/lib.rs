//! Monte Carlo gradient estimation for `∇θ E_{p(x;θ)}[f(x)]`.
//!
//! The crate provides three families of estimators over a small catalogue of
//! parametric measures:
//!
//! - score-function (likelihood ratio / REINFORCE), with optional baselines,
//! - pathwise (explicit sampling paths and implicit CDF-based paths), plus the
//!   Gaussian-specific Bonnet/Price forms and two Gamma hybrids,
//! - measure-valued (weak derivative) estimators, optionally coupled.
//!
//! Variance reduction (control variates, delta-method controls, coupling) lives
//! in [`variance_reduction`]; ground-truth gradients and the gradcheck harness
//! live in [`oracle`]. The [`blr`] module is a variational Bayesian logistic
//! regression case study, and [`cli`] drives reproducible experiments.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`). The oracle,
//! logistic-regression and experiment layers run in `f64`; the aliases at the
//! crate root name the `f64` instantiations.



pub mod blr;
pub mod cli;
pub mod costs;
pub mod error;
pub mod estimators;
pub mod measures;
pub mod moments;
pub mod oracle;

pub mod real;
pub mod rng;
pub mod special;
pub mod variance_reduction;

mod text;

pub use error::{Error, Result};
pub use estimators::{Baseline, EstimatorConfig, EstimatorId};
pub use real::Real;
pub use rng::RngStream;

/// `f64` measure.
pub type Measure = measures::Measure<f64>;
/// `f32` measure.
pub type Measure32 = measures::Measure<f32>;
/// `f64` standard cost.
pub type StandardCost = costs::StandardCost<f64>;
/// `f64` gradient estimate.
pub type GradientEstimate = estimators::GradientEstimate<f64>;
/// `f32` gradient estimate.
pub type GradientEstimate32 = estimators::GradientEstimate<f32>;
/// `f64` weak-derivative triple.
pub type WeakDerivativeTriple = measures::WeakDerivativeTriple<f64>;
/// `f64` control variate.
pub type ControlVariate = variance_reduction::ControlVariate<f64>;
