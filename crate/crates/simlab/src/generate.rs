//! Synthetic data for each design.
//!
//! Replication `rep` of setting `s` draws latent data from the stream
//! `role_seed(derive_seed(seed, s), rep, Data)` and noise from the matching
//! `Noise` stream, so clean data does not depend on the noise configuration.

use convmmd::rng::{derive_seed, rng_from_seed, role_seed, Role};
use convmmd::{Dataset, Model, ParamVector};

use crate::config::{Design, ExperimentSpec, ResolvedTruth};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub clean: Dataset,
    pub noisy: Dataset,
}

impl Generated {
    /// The injected noise, `noisy − clean`.
    pub fn noise(&self) -> Dataset {
        let values = self
            .noisy
            .as_slice()
            .iter()
            .zip(self.clean.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        Dataset::new(self.clean.dim(), values).expect("same shape")
    }
}

/// Seed of sweep setting `index`.
pub fn setting_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, index as u64)
}

pub(crate) fn base_seed(spec: &ExperimentSpec) -> Result<u64> {
    spec.seed
        .ok_or_else(|| SimError::config("seed is not set; resolve it before running"))
}

/// Model and parameter vector that generate the clean data of `spec`.
pub fn truth_model(spec: &ExperimentSpec) -> Result<(Model, ParamVector)> {
    let truth = spec.truth()?;
    let model = match &truth {
        ResolvedTruth::Gmm(m) => Model::gmm(m.components()),
        ResolvedTruth::Eivr { x, .. } => Model::LinearEiv {
            components: x.components(),
        },
        ResolvedTruth::Logistic { beta, features, .. } => Model::LogisticEiv {
            features: beta.len(),
            components: features[0].components(),
        },
        ResolvedTruth::Normal { .. } => Model::gmm(1),
    };
    let natural = truth
        .natural()
        .ok_or_else(|| SimError::config("invalid truth"))?;
    let theta = model.from_natural(&natural)?;
    Ok((model, theta))
}

/// Clean and noisy data for setting seed `seed`, size `n`, replication `rep`.
pub fn generate_with(spec: &ExperimentSpec, n: usize, seed: u64, rep: usize) -> Result<Generated> {
    let (model, theta) = truth_model(spec)?;
    let noise = spec.noise_model()?;
    let mut rng = rng_from_seed(role_seed(seed, rep as u64, Role::Data));
    let clean = model.sample_latent(&theta, n, &mut rng)?;
    let mut noisy = clean.clone();
    noise.perturb(&mut noisy, &mut rng_from_seed(role_seed(seed, rep as u64, Role::Noise)))?;
    Ok(Generated { clean, noisy })
}

/// Clean held-out sample for predictive metrics.
pub fn generate_holdout(spec: &ExperimentSpec, n: usize, seed: u64, rep: usize) -> Result<Dataset> {
    let (model, theta) = truth_model(spec)?;
    let mut rng = rng_from_seed(role_seed(seed, rep as u64, Role::Holdout));
    Ok(model.sample_latent(&theta, n, &mut rng)?)
}

fn gen_design(spec: &ExperimentSpec, rep: usize, design: Design) -> Result<Generated> {
    if spec.design != design {
        return Err(SimError::config(format!(
            "expected design `{}`, got `{}`",
            design.name(),
            spec.design.name()
        )));
    }
    generate_with(spec, spec.n, setting_seed(base_seed(spec)?, 0), rep)
}

/// Mixture draws plus the configured noise.
pub fn gen_gmm_data(spec: &ExperimentSpec, rep: usize) -> Result<Generated> {
    gen_design(spec, rep, Design::Gmm)
}

/// `(x, y)` pairs with `y = α + βx + ε`; noise on both coordinates.
pub fn gen_eivr_data(spec: &ExperimentSpec, rep: usize) -> Result<Generated> {
    gen_design(spec, rep, Design::Eivr)
}

/// Features and Bernoulli responses; only features are noised.
pub fn gen_logistic_data(spec: &ExperimentSpec, rep: usize) -> Result<Generated> {
    gen_design(spec, rep, Design::Logistic)
}

/// Normal draws for the scale-estimation experiment.
pub fn gen_clt_data(spec: &ExperimentSpec, rep: usize) -> Result<Generated> {
    gen_design(spec, rep, Design::Clt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NoiseBlock, NoiseFamily};
    use crate::metrics::{mean, sample_variance};
    use convmmd::baselines::ols;

    fn spec(design: Design, n: usize) -> ExperimentSpec {
        let mut s = ExperimentSpec::new(design, n, 1);
        s.seed = Some(11);
        s
    }

    fn se(xs: &[f64]) -> f64 {
        (sample_variance(xs) / xs.len() as f64).sqrt()
    }

    #[test]
    fn no_noise_means_noisy_equals_clean() {
        let g = gen_gmm_data(&spec(Design::Gmm, 200), 0).unwrap();
        assert_eq!(g.clean, g.noisy);
    }

    #[test]
    fn gmm_mean_and_noise_variance() {
        let mut s = spec(Design::Gmm, 100_000);
        let g = gen_gmm_data(&s, 0).unwrap();
        let x = g.clean.column(0);
        assert!((mean(&x) - 1.1695).abs() < 4.0 * se(&x));
        s.noise = vec![NoiseBlock::gaussian("x", 1.258)];
        let g2 = gen_gmm_data(&s, 0).unwrap();
        assert_eq!(g.clean, g2.clean);
        let v_noisy = sample_variance(&g2.noisy.column(0));
        let v_clean = sample_variance(&x);
        assert!((v_noisy / (v_clean + 1.582564) - 1.0).abs() < 0.05);
    }

    #[test]
    fn eivr_examples() {
        let g = gen_eivr_data(&spec(Design::Eivr, 20_000), 0).unwrap();
        let (x, y) = (g.clean.column(0), g.clean.column(1));
        let fit = ols(&x, &y).unwrap();
        assert!((fit.alpha - 1.5).abs() < 0.1);
        assert!((fit.beta - 1.0).abs() < 0.03);

        let mut s = spec(Design::Eivr, 100_000);
        s.noise = vec![NoiseBlock {
            law: Some(crate::config::LawKind::HierarchicalUniform),
            lo: Some(1.0),
            hi: Some(1.5),
            ..NoiseBlock::new("all", NoiseFamily::Gaussian)
        }];
        let g = gen_eivr_data(&s, 0).unwrap();
        let (x, y) = (g.clean.column(0), g.clean.column(1));
        assert!((mean(&x) - 2.85).abs() < 4.0 * se(&x));
        assert!((mean(&y) - 4.35).abs() < 4.0 * se(&y));
        let alpha = (1.5f64.powi(3) - 1.0) / 1.5;
        let vy = sample_variance(&g.noisy.column(1));
        assert!((vy / (sample_variance(&y) + alpha) - 1.0).abs() < 0.05);
        let vx = sample_variance(&g.noisy.column(0));
        assert!((vx / (sample_variance(&x) + alpha) - 1.0).abs() < 0.05);
    }

    #[test]
    fn logistic_noise_and_responses() {
        let mut s = spec(Design::Logistic, 100_000);
        s.noise = vec![
            NoiseBlock {
                rate: Some(3.0),
                multiplier: Some(0.5),
                ..NoiseBlock::new("x1", NoiseFamily::CenteredPoisson)
            },
            NoiseBlock::gaussian("x2", 0.8),
        ];
        let g = gen_logistic_data(&s, 0).unwrap();
        let u = g.noise();
        assert!((sample_variance(&u.column(0)) / 0.75 - 1.0).abs() < 0.05);
        assert!((sample_variance(&u.column(1)) / 0.64 - 1.0).abs() < 0.05);
        assert_eq!(g.clean.column(2), g.noisy.column(2));
        assert!(g.clean.column(2).iter().all(|&r| r == 0.0 || r == 1.0));
    }

    #[test]
    fn zero_slopes_give_sigmoid_alpha_response_rate() {
        let mut s = spec(Design::Logistic, 50_000);
        s.truth.beta = Some(vec![0.0, 0.0]);
        let g = gen_logistic_data(&s, 0).unwrap();
        let r = g.clean.column(2);
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((mean(&r) - p).abs() < 4.0 * (p * (1.0 - p) / r.len() as f64).sqrt());
    }

    #[test]
    fn deterministic_and_distinct_across_reps() {
        let s = spec(Design::Clt, 100);
        assert_eq!(gen_clt_data(&s, 3).unwrap(), gen_clt_data(&s, 3).unwrap());
        assert_ne!(gen_clt_data(&s, 3).unwrap(), gen_clt_data(&s, 4).unwrap());
        assert!(gen_gmm_data(&s, 0).is_err());
    }
}
