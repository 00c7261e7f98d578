//! Parametric estimation from measurement-error-contaminated samples by
//! minimizing the convolutional maximum mean discrepancy (convMMD).
//!
//! Observations are `x̃ = x + u` with latent `x ~ p` and noise `u` from a known
//! law. Comparing the noisy sample to a model `q_θ` pushed through the same
//! noise gives a discrepancy whose minimizer is consistent for the latent
//! parameter, without deconvolving anything.
//!
//! | module | contents |
//! |---|---|
//! | [`kernels`] | Gaussian kernels, multi-scale median heuristic, convolved bandwidth |
//! | [`noise`] | homoscedastic and hierarchical noise laws |
//! | [`sums`] | exact and grid-binned kernel sums |
//! | [`mmd`] | MMD² estimators, the convMMD objective and analytic bounds |
//! | [`models`] | mixture, errors-in-variables linear and logistic models with scores |
//! | [`optim`] | score-function gradient estimation and the SGD fit |
//! | [`asymptotics`] | sandwich covariance and confidence intervals |
//! | [`baselines`] | EM, least squares and logistic MLE that ignore the noise |

pub mod asymptotics;
pub mod baselines;
pub mod data;
pub mod error;
pub mod kernels;
pub mod mmd;
pub mod models;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod sums;

pub use data::Dataset;
pub use error::{Error, Result};
pub use kernels::KernelMixture;
pub use models::{Model, ParamVector};
pub use noise::{CoordNoise, NoiseModel, ScaleLaw};
pub use sums::{Backend, KernelSums};
