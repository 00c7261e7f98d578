//! Experiment specifications.
//!
//! An [`ExperimentSpec`] is read from TOML: flat top-level keys, optional
//! `[truth]`, `[fit]`, `[kernel]` and `[covariance]` tables, and one
//! `[[noise]]` block per noisy coordinate. Every section has design-specific
//! defaults, so a minimal spec is just `design`, `n` and `replications`.

use convmmd::models::{Mixture, NaturalParams};
use convmmd::noise::hierarchical_uniform;
use convmmd::optim::{FitConfig, LearningRate, Optimizer};
use convmmd::{Backend, CoordNoise, Dataset, KernelMixture, Model, NoiseModel, ScaleLaw};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::metrics::DensityGrid;

pub const MIN_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    Gmm,
    Eivr,
    Logistic,
    Clt,
    Equivalence,
    Bounds,
}

impl Design {
    pub const ALL: [Design; 6] = [
        Design::Gmm,
        Design::Eivr,
        Design::Logistic,
        Design::Clt,
        Design::Equivalence,
        Design::Bounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::Gmm => "gmm",
            Design::Eivr => "eivr",
            Design::Logistic => "logistic",
            Design::Clt => "clt",
            Design::Equivalence => "equivalence",
            Design::Bounds => "bounds",
        }
    }

    /// Methods fitted when the spec lists none.
    pub fn default_methods(self) -> Vec<Method> {
        match self {
            Design::Gmm => vec![Method::Convmmd, Method::NaiveGmm],
            Design::Eivr => vec![Method::Convmmd, Method::Ols],
            Design::Logistic => vec![Method::Convmmd, Method::NaiveGlm],
            Design::Clt => vec![Method::Convmmd],
            Design::Equivalence | Design::Bounds => vec![],
        }
    }

    /// Model coordinates, in data column order.
    pub fn coordinates(self, features: usize) -> Vec<String> {
        match self {
            Design::Eivr => vec!["x".into(), "y".into()],
            Design::Logistic => {
                let mut v: Vec<String> = (1..=features).map(|f| format!("x{f}")).collect();
                v.push("r".into());
                v
            }
            _ => vec!["x".into()],
        }
    }

    pub fn fits_models(self) -> bool {
        matches!(self, Design::Gmm | Design::Eivr | Design::Logistic | Design::Clt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Convmmd,
    NaiveGmm,
    Ols,
    NaiveGlm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Convmmd => "convmmd",
            Method::NaiveGmm => "naive-gmm",
            Method::Ols => "ols",
            Method::NaiveGlm => "naive-glm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    None,
    Gaussian,
    Uniform,
    Laplace,
    StudentT,
    CenteredPoisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    Fixed,
    HierarchicalUniform,
}

/// One `[[noise]]` block. `coord = "all"` applies it to every coordinate that
/// can carry noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub coord: String,
    pub family: NoiseFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<LawKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

impl NoiseBlock {
    pub fn new(coord: &str, family: NoiseFamily) -> Self {
        Self {
            coord: coord.into(),
            family,
            law: None,
            scale: None,
            half_width: None,
            lo: None,
            hi: None,
            multiplier: None,
            dof: None,
            rate: None,
        }
    }

    pub fn gaussian(coord: &str, scale: f64) -> Self {
        Self {
            scale: Some(scale),
            ..Self::new(coord, NoiseFamily::Gaussian)
        }
    }

    fn need(&self, key: &str, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| {
            SimError::config(format!(
                "noise block for `{}` ({:?}) needs `{key}`",
                self.coord, self.family
            ))
        })
    }

    fn law(&self, fixed_key: &str, fixed: Option<f64>) -> Result<ScaleLaw> {
        Ok(match self.law.unwrap_or(LawKind::Fixed) {
            LawKind::Fixed => ScaleLaw::fixed(self.need(fixed_key, fixed)?),
            LawKind::HierarchicalUniform => hierarchical_uniform(
                self.need("lo", self.lo)?,
                self.need("hi", self.hi)?,
                self.multiplier.unwrap_or(1.0),
            ),
        })
    }

    pub fn to_coord_noise(&self) -> Result<CoordNoise> {
        let noise = match self.family {
            NoiseFamily::None => CoordNoise::None,
            NoiseFamily::Gaussian => CoordNoise::Gaussian {
                scale: self.law("scale", self.scale)?,
            },
            NoiseFamily::Uniform => CoordNoise::Uniform {
                half_width: self.law("half_width", self.half_width)?,
            },
            NoiseFamily::Laplace => CoordNoise::Laplace {
                scale: self.law("scale", self.scale)?,
            },
            NoiseFamily::StudentT => CoordNoise::StudentT {
                dof: self.dof.unwrap_or(3.0),
                scale: self.law("scale", self.scale)?,
            },
            NoiseFamily::CenteredPoisson => CoordNoise::CenteredPoisson {
                rate: self.need("rate", self.rate)?,
                multiplier: self.multiplier.unwrap_or(1.0),
            },
        };
        noise
            .validate()
            .map_err(|e| SimError::config(format!("noise block for `{}`: {e}", self.coord)))?;
        Ok(noise)
    }
}

/// Build a noise model over `coords`. Coordinates in `noiseless` may not
/// carry noise; `scale_overrides` replace a coordinate's scale law with
/// per-row scales.
pub fn build_noise_model(
    blocks: &[NoiseBlock],
    coords: &[String],
    noiseless: &[usize],
) -> Result<NoiseModel> {
    let mut out = vec![CoordNoise::None; coords.len()];
    let mut seen = vec![false; coords.len()];
    for b in blocks {
        let targets: Vec<usize> = if b.coord == "all" {
            (0..coords.len()).filter(|i| !noiseless.contains(i)).collect()
        } else {
            let i = coords.iter().position(|c| *c == b.coord).ok_or_else(|| {
                SimError::config(format!(
                    "noise block names unknown coordinate `{}`; valid coordinates: {}",
                    b.coord,
                    coords.join(", ")
                ))
            })?;
            if noiseless.contains(&i) && b.family != NoiseFamily::None {
                return Err(SimError::config(format!(
                    "coordinate `{}` is observed without noise",
                    b.coord
                )));
            }
            vec![i]
        };
        let noise = b.to_coord_noise()?;
        for i in targets {
            if seen[i] {
                return Err(SimError::config(format!(
                    "coordinate `{}` has more than one noise block",
                    coords[i]
                )));
            }
            seen[i] = true;
            out[i] = noise.clone();
        }
    }
    Ok(NoiseModel::new(out)?)
}

/// Replace the scale law of coordinate `j` by fixed per-row scales.
pub fn with_empirical_scales(noise: &CoordNoise, scales: Vec<f64>) -> Result<CoordNoise> {
    let law = ScaleLaw::Empirical { scales };
    let out = match noise {
        CoordNoise::None | CoordNoise::Gaussian { .. } => CoordNoise::Gaussian { scale: law },
        CoordNoise::Uniform { .. } => CoordNoise::Uniform { half_width: law },
        CoordNoise::Laplace { .. } => CoordNoise::Laplace { scale: law },
        CoordNoise::StudentT { dof, .. } => CoordNoise::StudentT {
            dof: *dof,
            scale: law,
        },
        CoordNoise::CenteredPoisson { .. } => {
            return Err(SimError::config(
                "per-row scales are not supported for centered-poisson noise",
            ))
        }
    };
    out.validate()?;
    Ok(out)
}

/// A univariate Gaussian mixture in a spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl MixtureSpec {
    pub fn to_mixture(&self) -> Result<Mixture> {
        Ok(Mixture::new(
            self.weights.clone(),
            self.means.clone(),
            self.sds.clone(),
        )?)
    }
}

/// Truth parameters; unset keys take the design default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    /// Mixture of the gmm design, or of the latent covariate for eivr.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sds: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_reg: Option<f64>,
    /// Location and scale of the normal law used by clt, equivalence and bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Latent law of each logistic feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<MixtureSpec>>,
}

/// Truth after defaults and validation.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedTruth {
    Gmm(Mixture),
    Eivr {
        alpha: f64,
        beta: f64,
        sigma_reg: f64,
        x: Mixture,
    },
    Logistic {
        alpha: f64,
        beta: Vec<f64>,
        features: Vec<Mixture>,
    },
    Normal {
        mean: f64,
        sigma: f64,
    },
}

impl ResolvedTruth {
    pub fn natural(&self) -> Option<NaturalParams> {
        Some(match self {
            ResolvedTruth::Gmm(m) => NaturalParams::Gmm { mixture: m.clone() },
            ResolvedTruth::Eivr {
                alpha,
                beta,
                sigma_reg,
                x,
            } => NaturalParams::LinearEiv {
                alpha: *alpha,
                beta: *beta,
                sigma_reg: *sigma_reg,
                x: x.clone(),
            },
            ResolvedTruth::Logistic {
                alpha,
                beta,
                features,
            } => NaturalParams::LogisticEiv {
                alpha: *alpha,
                beta: beta.clone(),
                features: features.clone(),
            },
            ResolvedTruth::Normal { mean, sigma } => NaturalParams::Gmm {
                mixture: Mixture::new(vec![1.0], vec![*mean], vec![*sigma]).ok()?,
            },
        })
    }
}

fn default_age() -> MixtureSpec {
    MixtureSpec {
        weights: vec![0.5, 0.5],
        means: vec![-0.8, 0.8],
        sds: vec![0.6, 0.6],
    }
}

fn default_income() -> MixtureSpec {
    // mean 0, variance 1
    let sd = (1.0f64 - 0.7 * 0.45 * 0.45 - 0.3 * 1.05 * 1.05).sqrt();
    MixtureSpec {
        weights: vec![0.7, 0.3],
        means: vec![-0.45, 1.05],
        sds: vec![sd, sd],
    }
}

impl Truth {
    pub fn resolve(&self, design: Design) -> Result<ResolvedTruth> {
        let positive = |name: &str, v: f64| -> Result<f64> {
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(SimError::config(format!("truth.{name} must be positive, got {v}")))
            }
        };
        let mixture = |w: [f64; 3], m: [f64; 3], s: [f64; 3], k: usize| -> Result<Mixture> {
            MixtureSpec {
                weights: self.weights.clone().unwrap_or_else(|| w[..k].to_vec()),
                means: self.means.clone().unwrap_or_else(|| m[..k].to_vec()),
                sds: self.sds.clone().unwrap_or_else(|| s[..k].to_vec()),
            }
            .to_mixture()
            .map_err(|e| SimError::config(format!("truth mixture: {e}")))
        };
        Ok(match design {
            Design::Gmm => ResolvedTruth::Gmm(mixture(
                [0.23, 0.33, 0.44],
                [-3.72, 0.11, 4.52],
                [1.0, 1.0, 1.0],
                3,
            )?),
            Design::Eivr => {
                let beta = self.beta.clone().unwrap_or_else(|| vec![1.0]);
                if beta.len() != 1 {
                    return Err(SimError::config("truth.beta must have one entry for eivr"));
                }
                ResolvedTruth::Eivr {
                    alpha: self.alpha.unwrap_or(1.5),
                    beta: beta[0],
                    sigma_reg: positive("sigma_reg", self.sigma_reg.unwrap_or(1.0))?,
                    x: mixture([0.3, 0.7, 0.0], [2.5, 3.0, 0.0], [1.0, 1.0, 0.0], 2)?,
                }
            }
            Design::Logistic => {
                let beta = self.beta.clone().unwrap_or_else(|| vec![0.8, 1.2]);
                let features = self
                    .features
                    .clone()
                    .unwrap_or_else(|| vec![default_age(), default_income()]);
                if beta.len() != features.len() || beta.is_empty() {
                    return Err(SimError::config(format!(
                        "truth.beta has {} entries but {} feature laws are given",
                        beta.len(),
                        features.len()
                    )));
                }
                let features = features
                    .iter()
                    .map(|f| f.to_mixture())
                    .collect::<Result<Vec<_>>>()?;
                if features.windows(2).any(|w| w[0].components() != w[1].components()) {
                    return Err(SimError::config(
                        "all logistic feature laws need the same number of components",
                    ));
                }
                ResolvedTruth::Logistic {
                    alpha: self.alpha.unwrap_or(0.5),
                    beta,
                    features,
                }
            }
            Design::Clt | Design::Equivalence | Design::Bounds => ResolvedTruth::Normal {
                mean: self.mean.unwrap_or(0.0),
                sigma: positive("sigma", self.sigma.unwrap_or(2.0))?,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    InverseDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    /// Decay horizon of the inverse-decay schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Start from the naive fit (default) instead of the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<bool>,
}

impl FitSection {
    pub fn to_fit_config(
        &self,
        default_n_iter: usize,
        default_m: usize,
        seed: u64,
        backend: Backend,
        fixed: Vec<usize>,
    ) -> Result<FitConfig> {
        let eta = self.learning_rate.unwrap_or(0.01);
        let learning_rate = match self.schedule.unwrap_or(Schedule::Constant) {
            Schedule::Constant => LearningRate::Constant { eta },
            Schedule::InverseDecay => LearningRate::InverseDecay {
                eta0: eta,
                t0: self.t0.unwrap_or(500.0),
            },
        };
        let optimizer = match self.optimizer.unwrap_or(OptimizerKind::Sgd) {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::adam(),
        };
        Ok(FitConfig {
            n_iter: self.n_iter.unwrap_or(default_n_iter),
            learning_rate,
            batch_m: self.batch_m.unwrap_or(default_m),
            seed,
            optimizer,
            record_every: self.record_every.unwrap_or(1),
            clip_norm: self.clip_norm,
            fixed,
            backend,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    #[default]
    MedianMultiscale,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Exact,
    Grid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub mode: KernelMode,
    /// One bandwidth for every coordinate, or one per coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,
    /// Grid points per smallest bandwidth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
}

impl KernelSection {
    pub fn fixed(bandwidth: f64) -> Self {
        Self {
            mode: KernelMode::Fixed,
            bandwidths: Some(vec![bandwidth]),
            ..Self::default()
        }
    }

    /// Kernel for `data` (the observed noisy sample).
    pub fn kernel_for(&self, data: &Dataset, seed: u64) -> Result<KernelMixture> {
        match self.mode {
            KernelMode::MedianMultiscale => Ok(KernelMixture::median_multiscale(data, seed)?),
            KernelMode::Fixed => {
                let bw = self.fixed_bandwidths(data.dim())?;
                Ok(KernelMixture::single(&bw)?)
            }
        }
    }

    pub fn fixed_bandwidths(&self, dim: usize) -> Result<Vec<f64>> {
        let bw = self
            .bandwidths
            .as_ref()
            .ok_or_else(|| SimError::config("kernel.mode = \"fixed\" needs kernel.bandwidths"))?;
        match bw.len() {
            1 => Ok(vec![bw[0]; dim]),
            n if n == dim => Ok(bw.clone()),
            n => Err(SimError::config(format!(
                "kernel.bandwidths has {n} entries; expected 1 or {dim}"
            ))),
        }
    }

    pub fn backend(&self, default: Backend) -> Backend {
        match (self.backend, self.resolution) {
            (Some(BackendKind::Exact), _) => Backend::Exact,
            (_, Some(r)) => Backend::grid(r),
            (Some(BackendKind::Grid), None) => match default {
                Backend::Exact => Backend::grid(Backend::FIT_RESOLUTION),
                g => g,
            },
            (None, None) => default,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

impl CovarianceSection {
    pub fn level(&self) -> f64 {
        self.level.unwrap_or(0.95)
    }

    pub fn batches(&self) -> usize {
        self.batches
            .unwrap_or(convmmd::asymptotics::DEFAULT_BATCHES)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub design: Design,
    pub n: usize,
    pub replications: usize,
    /// Base seed; unset means the caller draws one and records it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
    /// Mixture components of the fitted model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// Sample sizes to sweep; defaults to `[n]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
    /// Location shifts of the second sample (equivalence design).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetas: Option<Vec<f64>>,
    /// Gaussian noise variances to sweep (bounds design).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2_grid: Option<Vec<f64>>,
    /// Confidence parameter of the deviation bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Clean held-out sample size for the Brier score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_grid: Option<DensityGrid>,
    #[serde(default)]
    pub truth: Truth,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub covariance: CovarianceSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseBlock>,
}

impl ExperimentSpec {
    pub fn new(design: Design, n: usize, replications: usize) -> Self {
        Self {
            design,
            n,
            replications,
            seed: None,
            methods: vec![],
            components: None,
            n_grid: None,
            thetas: None,
            tau2_grid: None,
            gamma: None,
            holdout_n: None,
            density_grid: None,
            truth: Truth::default(),
            fit: FitSection::default(),
            kernel: KernelSection::default(),
            covariance: CovarianceSection::default(),
            noise: vec![],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SimError::config(e.to_string()))
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            self.design.default_methods()
        } else {
            self.methods.clone()
        }
    }

    pub fn n_grid(&self) -> Vec<usize> {
        self.n_grid.clone().unwrap_or_else(|| vec![self.n])
    }

    pub fn truth(&self) -> Result<ResolvedTruth> {
        self.truth.resolve(self.design)
    }

    /// The fitted model family.
    pub fn model(&self) -> Result<Model> {
        let truth = self.truth()?;
        let model = match (&truth, self.design) {
            (ResolvedTruth::Gmm(m), _) => Model::gmm(self.components.unwrap_or(m.components())),
            (ResolvedTruth::Eivr { x, .. }, _) => Model::LinearEiv {
                components: self.components.unwrap_or(x.components()),
            },
            (ResolvedTruth::Logistic { beta, features, .. }, _) => Model::LogisticEiv {
                features: beta.len(),
                components: self.components.unwrap_or(features[0].components()),
            },
            (ResolvedTruth::Normal { .. }, _) => Model::gmm(1),
        };
        if model.components() == 0 {
            return Err(SimError::config("components must be at least 1"));
        }
        Ok(model)
    }

    pub fn coordinates(&self) -> Result<Vec<String>> {
        let features = match self.truth()? {
            ResolvedTruth::Logistic { beta, .. } => beta.len(),
            _ => 1,
        };
        Ok(self.design.coordinates(features))
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let coords = self.coordinates()?;
        let noiseless = if self.design == Design::Logistic {
            vec![coords.len() - 1]
        } else {
            vec![]
        };
        build_noise_model(&self.noise, &coords, &noiseless)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(SimError::config(format!("n must be at least {MIN_N}, got {}", self.n)));
        }
        if self.replications == 0 {
            return Err(SimError::config("replications must be at least 1"));
        }
        if let Some(g) = &self.n_grid {
            if g.is_empty() || g.iter().any(|&n| n < MIN_N) {
                return Err(SimError::config(format!(
                    "n_grid must be nonempty with every entry at least {MIN_N}"
                )));
            }
        }
        let allowed = self.design.default_methods();
        for m in &self.methods {
            if !allowed.contains(m) {
                let names: Vec<_> = allowed.iter().map(|m| m.name()).collect();
                return Err(SimError::config(format!(
                    "method `{}` does not apply to design `{}`; valid methods: {}",
                    m.name(),
                    self.design.name(),
                    if names.is_empty() { "none".into() } else { names.join(", ") }
                )));
            }
        }
        self.truth()?;
        self.model()?;
        let noise = self.noise_model()?;
        match self.design {
            Design::Equivalence => {
                if self.thetas.as_ref().is_some_and(Vec::is_empty) {
                    return Err(SimError::config("thetas must be nonempty"));
                }
                gaussian_tau(&noise)?;
                self.kernel.fixed_bandwidths(1)?;
            }
            Design::Bounds => {
                if let Some(t) = &self.tau2_grid {
                    if t.is_empty() || t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(SimError::config(
                            "tau2_grid must be nonempty with nonnegative entries",
                        ));
                    }
                }
                self.kernel.fixed_bandwidths(1)?;
            }
            _ => {}
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(SimError::config(format!("gamma must lie in (0, 1), got {g}")));
            }
        }
        let level = self.covariance.level();
        if !(0.0..1.0).contains(&level) {
            return Err(SimError::config(format!(
                "covariance.level must lie in [0, 1), got {level}"
            )));
        }
        if let Some(lr) = self.fit.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(SimError::config(format!(
                    "fit.learning_rate must be positive, got {lr}"
                )));
            }
        }
        if self.fit.n_iter == Some(0) {
            return Err(SimError::config("fit.n_iter must be at least 1"));
        }
        if self.fit.batch_m.is_some_and(|m| m < 2) {
            return Err(SimError::config("fit.batch_m must be at least 2"));
        }
        Ok(())
    }
}

/// Scale of a fixed Gaussian noise law on the single coordinate.
pub fn gaussian_tau(noise: &NoiseModel) -> Result<f64> {
    match noise.coords() {
        [CoordNoise::None] => Ok(0.0),
        [CoordNoise::Gaussian {
            scale: ScaleLaw::Fixed { scale },
        }] => Ok(*scale),
        _ => Err(SimError::config(
            "this design needs fixed-scale gaussian noise (or none) on coordinate `x`",
        )),
    }
}
