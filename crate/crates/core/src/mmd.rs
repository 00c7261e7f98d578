//! MMD² estimators, the convMMD objective and the analytic bounds.
//!
//! Every estimator has an exact form taking a [`KernelMixture`] and a `_with`
//! form taking [`KernelSums`], which may use the grid backend.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_positive, Error, Result};
use crate::kernels::KernelMixture;
use crate::models::{Model, ModelBatch, ParamVector};
use crate::noise::NoiseModel;
use crate::sums::KernelSums;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Biased,
    Unbiased,
}

/// An MMD² value with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub n_x: usize,
    pub n_y: usize,
    pub bound_k: f64,
}

impl MmdEstimate {
    /// Biased values are nonnegative up to rounding; U-statistics are ≥ −4K.
    pub fn in_range(&self) -> bool {
        match self.kind {
            EstimatorKind::Biased => self.value >= -1e-12,
            EstimatorKind::Unbiased => self.value >= -4.0 * self.bound_k,
        }
    }
}

fn check_pair(xs: &Dataset, ys: &Dataset, sums: &KernelSums) -> Result<()> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyDataset);
    }
    xs.check_dim(ys)?;
    if xs.dim() != sums.kernel().dim() {
        return Err(Error::DimensionMismatch {
            expected: sums.kernel().dim(),
            got: xs.dim(),
        });
    }
    Ok(())
}

/// V-statistic with self-pairs included; accepts unequal sizes.
pub fn mmd2_biased(xs: &Dataset, ys: &Dataset, kernel: &KernelMixture) -> Result<f64> {
    mmd2_biased_with(xs, ys, &KernelSums::exact(kernel.clone()))
}

pub fn mmd2_biased_with(xs: &Dataset, ys: &Dataset, sums: &KernelSums) -> Result<f64> {
    check_pair(xs, ys, sums)?;
    let kxx = sums.self_sums(xs)?.mean_all;
    let kyy = sums.self_sums(ys)?.mean_all;
    let kxy = sums.mean_cross(xs, ys)?;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Paired U-statistic `(1/(N(N−1))) Σ_{i≠j} h(z_i, z_j)` with `z_i = (x_i, y_i)`.
pub fn mmd2_unbiased(xs: &Dataset, ys: &Dataset, kernel: &KernelMixture) -> Result<f64> {
    mmd2_unbiased_with(xs, ys, &KernelSums::exact(kernel.clone()))
}

pub fn mmd2_unbiased_with(xs: &Dataset, ys: &Dataset, sums: &KernelSums) -> Result<f64> {
    check_pair(xs, ys, sums)?;
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::UnequalSizes(n, ys.len()));
    }
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    if !sums.is_grid() {
        // direct termwise sum, so identical pairs cancel exactly
        let k = sums.kernel();
        let mut total = 0.0;
        for i in 0..n {
            let (xi, yi) = (xs.row(i), ys.row(i));
            for j in 0..n {
                if i != j {
                    let (xj, yj) = (xs.row(j), ys.row(j));
                    total += k.eval(xi, xj) + k.eval(yi, yj) - k.eval(xi, yj) - k.eval(yi, xj);
                }
            }
        }
        return Ok(total / (n * (n - 1)) as f64);
    }
    let nn = n as f64;
    let off_x: f64 = sums.self_sums(xs)?.loo_means.iter().sum::<f64>() * (nn - 1.0);
    let off_y: f64 = sums.self_sums(ys)?.loo_means.iter().sum::<f64>() * (nn - 1.0);
    let cross_all = sums.mean_cross(xs, ys)? * nn * nn;
    let cross_diag: f64 = (0..n).map(|i| sums.pair(xs.row(i), ys.row(i))).sum();
    Ok((off_x + off_y - 2.0 * (cross_all - cross_diag)) / (nn * (nn - 1.0)))
}

/// Either estimator wrapped in an [`MmdEstimate`].
pub fn mmd2(xs: &Dataset, ys: &Dataset, sums: &KernelSums, kind: EstimatorKind) -> Result<MmdEstimate> {
    let value = match kind {
        EstimatorKind::Biased => mmd2_biased_with(xs, ys, sums)?,
        EstimatorKind::Unbiased => mmd2_unbiased_with(xs, ys, sums)?,
    };
    Ok(MmdEstimate {
        value,
        kind,
        n_x: xs.len(),
        n_y: ys.len(),
        bound_k: sums.kernel().bound_k(),
    })
}

/// `M` draws from `q_θ` with fresh noise added, plus the clean draws' scores.
pub fn simulate_noisy<R: Rng + ?Sized>(
    model: &Model,
    theta: &ParamVector,
    noise: &NoiseModel,
    m: usize,
    rng: &mut R,
) -> Result<ModelBatch> {
    if noise.dim() != model.data_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.data_dim(),
            got: noise.dim(),
        });
    }
    let mut batch = model.sample_batch(theta, m, rng)?;
    noise.perturb(&mut batch.draws, rng)?;
    Ok(batch)
}

/// Monte Carlo estimate of `L_N(θ)`: biased MMD² between the noisy data and
/// `M` noisy model draws.
pub fn convmmd_objective<R: Rng + ?Sized>(
    noisy_data: &Dataset,
    model: &Model,
    theta: &ParamVector,
    noise: &NoiseModel,
    kernel: &KernelMixture,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    convmmd_objective_with(noisy_data, model, theta, noise, &KernelSums::exact(kernel.clone()), m, rng)
}

pub fn convmmd_objective_with<R: Rng + ?Sized>(
    noisy_data: &Dataset,
    model: &Model,
    theta: &ParamVector,
    noise: &NoiseModel,
    sums: &KernelSums,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    if m < 2 {
        return Err(Error::TooFewSamples { need: 2, got: m });
    }
    let mut sim = model.sample_latent(theta, m, rng)?;
    noise.perturb(&mut sim, rng)?;
    mmd2_biased_with(noisy_data, &sim, sums)
}

fn check_level(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            name: "gamma",
            reason: format!("must lie in (0, 1), got {gamma}"),
        })
    }
}

/// High-probability bound on `|convMMD − estimate|`:
/// `sqrt(16K/N) · (1 + sqrt(log(2/γ) / 4))`.
pub fn deviation_bound(bound_k: f64, n: usize, gamma: f64) -> Result<f64> {
    check_positive("K", bound_k)?;
    check_level(gamma)?;
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    Ok((16.0 * bound_k / n as f64).sqrt() * (1.0 + (0.25 * (2.0 / gamma).ln()).sqrt()))
}

/// Additive second-moment inflation of the U-statistic caused by noise:
/// `(2/(N(N−1))) [32 L² Eα + 8K sqrt(32 L² Eα)]`.
pub fn variance_inflation_bound(lipschitz: f64, bound_k: f64, n: usize, mean_alpha: f64) -> Result<f64> {
    check_positive("L_k", lipschitz)?;
    check_positive("K", bound_k)?;
    if !(mean_alpha.is_finite() && mean_alpha >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "mean_alpha",
            reason: format!("must be nonnegative, got {mean_alpha}"),
        });
    }
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let a = 32.0 * lipschitz * lipschitz * mean_alpha;
    let nn = n as f64;
    Ok(2.0 / (nn * (nn - 1.0)) * (a + 8.0 * bound_k * a.sqrt()))
}

/// Bound on `|MMD²(p, q) − convMMD²(p, q)|`: `4 L sqrt(2 Eα)`.
pub fn noise_shift_bound(lipschitz: f64, mean_alpha: f64) -> Result<f64> {
    for (name, v) in [("L_k", lipschitz), ("mean_alpha", mean_alpha)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidArgument {
                name,
                reason: format!("must be nonnegative, got {v}"),
            });
        }
    }
    Ok(4.0 * lipschitz * (2.0 * mean_alpha).sqrt())
}
