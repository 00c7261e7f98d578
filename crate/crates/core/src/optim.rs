//! Score-function gradient estimation of the convMMD objective and the SGD loop.
//!
//! For a batch of clean draws `y_j ~ q_θ` with scores `S_j` and noisy copies
//! `ỹ_j`, the gradient estimate is
//!
//! ```text
//! f_j = (1/(M−1)) Σ_{l≠j} k(ỹ_j, ỹ_l) − (1/N) Σ_i k(ỹ_j, x̃_i)
//! Ĵ   = (2/M) Σ_j f_j S_j
//! ```

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{em_gmm, logistic_mle, ols};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelMixture;
use crate::mmd::simulate_noisy;
use crate::models::{Model, ModelBatch, ParamVector};
use crate::noise::NoiseModel;
use crate::rng::rng_from_seed;
use crate::sums::{Backend, Field, KernelSums};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "kebab-case")]
pub enum LearningRate {
    Constant { eta: f64 },
    /// `η_t = η₀ / (1 + t/T₀)`.
    InverseDecay { eta0: f64, t0: f64 },
}

impl LearningRate {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LearningRate::Constant { eta } => eta,
            LearningRate::InverseDecay { eta0, t0 } => eta0 / (1.0 + t as f64 / t0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRate::Constant { eta } => eta.is_finite() && eta > 0.0,
            LearningRate::InverseDecay { eta0, t0 } => {
                eta0.is_finite() && eta0 > 0.0 && t0.is_finite() && t0 > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                name: "learning_rate",
                reason: format!("must be positive, got {self:?}"),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    /// Adaptive moment estimates.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_iter: usize,
    pub learning_rate: LearningRate,
    pub batch_m: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub record_every: usize,
    /// Rescale gradients whose norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Parameter indices held at their initial values.
    #[serde(default)]
    pub fixed: Vec<usize>,
    #[serde(default)]
    pub backend: Backend,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_iter: 2000,
            learning_rate: LearningRate::Constant { eta: 0.01 },
            batch_m: 1000,
            seed: 0,
            optimizer: Optimizer::Sgd,
            record_every: 10,
            clip_norm: None,
            fixed: Vec::new(),
            backend: Backend::Exact,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        self.learning_rate.validate()?;
        if self.batch_m < 2 {
            return Err(Error::TooFewSamples {
                need: 2,
                got: self.batch_m,
            });
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument {
                name: "record_every",
                reason: "must be at least 1".into(),
            });
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument {
                    name: "clip_norm",
                    reason: format!("must be positive, got {c}"),
                });
            }
        }
        if let Some(&i) = self.fixed.iter().find(|&&i| i >= model.n_params()) {
            return Err(Error::InvalidArgument {
                name: "fixed",
                reason: format!("index {i} out of range for {} parameters", model.n_params()),
            });
        }
        Ok(())
    }

    /// Indices that move during fitting: not user-fixed and not a reference logit.
    pub fn free_indices(&self, model: &Model) -> Vec<usize> {
        let pinned = model.reference_logits();
        (0..model.n_params())
            .filter(|i| !self.fixed.contains(i) && !pinned.contains(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ParamVector,
    pub init_theta: ParamVector,
    /// `(iteration, objective estimate)`.
    pub loss_trace: Vec<(usize, f64)>,
    pub grad_norm_trace: Vec<(usize, f64)>,
    pub config: FitConfig,
    /// Excluded from serialization so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// One gradient estimate and the objective value from the same batch.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub objective: f64,
    /// The `f_j` weights.
    pub weights: Vec<f64>,
}

/// Observed data with its kernel field and self-term precomputed.
pub struct ConvMmdProblem<'a> {
    model: &'a Model,
    data: &'a Dataset,
    noise: &'a NoiseModel,
    sums: KernelSums,
    data_field: Field,
    data_self: f64,
}

impl<'a> ConvMmdProblem<'a> {
    pub fn new(
        model: &'a Model,
        data: &'a Dataset,
        noise: &'a NoiseModel,
        kernel: &KernelMixture,
        backend: Backend,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for got in [data.dim(), noise.dim(), kernel.dim()] {
            if got != model.data_dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.data_dim(),
                    got,
                });
            }
        }
        let sums = KernelSums::new(kernel.clone(), backend, &[data])?;
        let data_field = sums.uniform_field(data, 1.0 / data.len() as f64)?;
        let data_self = sums.self_sums(data)?.mean_all;
        Ok(Self {
            model,
            data,
            noise,
            sums,
            data_field,
            data_self,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn noise(&self) -> &NoiseModel {
        self.noise
    }

    pub fn sums(&self) -> &KernelSums {
        &self.sums
    }

    /// `(1/N²) Σ_i Σ_j k(x̃_i, x̃_j)`.
    pub fn data_self_term(&self) -> f64 {
        self.data_self
    }

    /// Draws a noisy model batch with scores.
    pub fn simulate<R: Rng + ?Sized>(&self, theta: &ParamVector, m: usize, rng: &mut R) -> Result<ModelBatch> {
        simulate_noisy(self.model, theta, self.noise, m, rng)
    }

    /// `(1/N) Σ_i k(t, x̃_i)` at each target.
    pub fn data_means(&self, targets: &Dataset) -> Result<Vec<f64>> {
        self.sums.eval(&self.data_field, targets)
    }

    /// Gradient estimate from a given batch.
    pub fn gradient_from_batch(&self, batch: &ModelBatch) -> Result<GradientEstimate> {
        let m = batch.len();
        if m < 2 {
            return Err(Error::TooFewSamples { need: 2, got: m });
        }
        let p = self.model.n_params();
        let own = self.sums.self_sums(&batch.draws)?;
        let cross = self.data_means(&batch.draws)?;
        let mut gradient = vec![0.0; p];
        let mut weights = Vec::with_capacity(m);
        for j in 0..m {
            let f = own.loo_means[j] - cross[j];
            weights.push(f);
            for (g, s) in gradient.iter_mut().zip(batch.score(j)) {
                *g += f * s;
            }
        }
        let scale = 2.0 / m as f64;
        gradient.iter_mut().for_each(|g| *g *= scale);
        let mean_cross = cross.iter().sum::<f64>() / m as f64;
        Ok(GradientEstimate {
            gradient,
            objective: self.data_self + own.mean_all - 2.0 * mean_cross,
            weights,
        })
    }

    pub fn gradient<R: Rng + ?Sized>(&self, theta: &ParamVector, m: usize, rng: &mut R) -> Result<GradientEstimate> {
        let batch = self.simulate(theta, m, rng)?;
        self.gradient_from_batch(&batch)
    }

    /// Objective estimate `L_N(θ)` from `M` fresh draws.
    pub fn objective<R: Rng + ?Sized>(&self, theta: &ParamVector, m: usize, rng: &mut R) -> Result<f64> {
        Ok(self.gradient(theta, m, rng)?.objective)
    }
}

/// Single gradient estimate with the exact kernel backend.
pub fn estimate_gradient<R: Rng + ?Sized>(
    model: &Model,
    theta: &ParamVector,
    noisy_data: &Dataset,
    noise: &NoiseModel,
    kernel: &KernelMixture,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let problem = ConvMmdProblem::new(model, noisy_data, noise, kernel, Backend::Exact)?;
    Ok(problem.gradient(theta, m, rng)?.gradient)
}

/// Runs `n_iter` gradient steps from `init`; the generator is seeded from `config.seed`.
pub fn fit(
    model: &Model,
    noisy_data: &Dataset,
    noise: &NoiseModel,
    kernel: &KernelMixture,
    config: &FitConfig,
    init: &ParamVector,
) -> Result<FitResult> {
    let problem = ConvMmdProblem::new(model, noisy_data, noise, kernel, config.backend)?;
    fit_problem(&problem, config, init)
}

pub fn fit_problem(problem: &ConvMmdProblem<'_>, config: &FitConfig, init: &ParamVector) -> Result<FitResult> {
    let model = problem.model();
    model.validate_params(init)?;
    config.validate(model)?;
    let start = Instant::now();
    let free = config.free_indices(model);
    let mut rng = rng_from_seed(config.seed);
    let mut theta = init.clone();
    let mut loss_trace = Vec::new();
    let mut grad_norm_trace = Vec::new();
    let p = model.n_params();
    let (mut m1, mut m2) = (vec![0.0; p], vec![0.0; p]);
    for t in 0..config.n_iter {
        let est = problem.gradient(&theta, config.batch_m, &mut rng)?;
        let mut g = vec![0.0; p];
        for &i in &free {
            g[i] = est.gradient[i];
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t % config.record_every == 0 {
            loss_trace.push((t, est.objective));
            grad_norm_trace.push((t, norm));
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                last_finite: theta.0,
            });
        }
        if let Some(c) = config.clip_norm {
            if norm > c {
                g.iter_mut().for_each(|v| *v *= c / norm);
            }
        }
        let eta = config.learning_rate.at(t);
        let mut next = theta.clone();
        match config.optimizer {
            Optimizer::Sgd => {
                for &i in &free {
                    next.0[i] -= eta * g[i];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = (t + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                for &i in &free {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                    next.0[i] -= eta * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite {
                iteration: t,
                last_finite: theta.0,
            });
        }
        theta = next;
    }
    Ok(FitResult {
        theta_hat: theta,
        init_theta: init.clone(),
        loss_trace,
        grad_norm_trace,
        config: config.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

const WARM_EM_ITER: usize = 100;
const WARM_EM_TOL: f64 = 1e-3;

/// Naive noise-ignoring fit used as the starting point.
pub fn warm_start(model: &Model, noisy_data: &Dataset, seed: u64) -> Result<ParamVector> {
    if noisy_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if noisy_data.dim() != model.data_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.data_dim(),
            got: noisy_data.dim(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let k = model.components();
    let mut em = |col: usize| -> Result<Vec<f64>> {
        let d = Dataset::from_column(&noisy_data.column(col));
        Ok(em_gmm(&d, k, WARM_EM_ITER, WARM_EM_TOL, &mut rng)?.mixture.to_block())
    };
    let v = match *model {
        Model::Gmm { .. } => em(0)?,
        Model::LinearEiv { .. } => {
            let f = ols(&noisy_data.column(0), &noisy_data.column(1))?;
            let mut v = vec![f.alpha, f.beta, f.residual_sd.max(1e-6).ln()];
            v.extend(em(0)?);
            v
        }
        Model::LogisticEiv { features, .. } => {
            let feats: Vec<usize> = (0..features).collect();
            let x = noisy_data.select_columns(&feats)?;
            let mut v = logistic_mle(&x, &noisy_data.column(features), 100, 1e-8)?;
            for f in 0..features {
                v.extend(em(f)?);
            }
            v
        }
    };
    let theta = ParamVector(v);
    model.validate_params(&theta)?;
    Ok(theta)
}
