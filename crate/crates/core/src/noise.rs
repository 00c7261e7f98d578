//! Measurement-error laws.
//!
//! Each coordinate carries its own zero-mean noise family. Families with a
//! scale parameter take a [`ScaleLaw`]: either a fixed scale or a scale drawn
//! afresh for every observation (the heteroscedastic case).

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, StudentT};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Distribution of the per-observation scale φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum ScaleLaw {
    Fixed { scale: f64 },
    /// `φ = multiplier · U(lo, hi)`.
    HierarchicalUniform { lo: f64, hi: f64, multiplier: f64 },
    /// φ resampled uniformly from known per-observation scales.
    Empirical { scales: Vec<f64> },
}

impl ScaleLaw {
    pub fn fixed(scale: f64) -> Self {
        ScaleLaw::Fixed { scale }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNoise(m));
        match self {
            ScaleLaw::Fixed { scale } if !(scale.is_finite() && *scale > 0.0) => {
                bad(format!("scale must be positive, got {scale}"))
            }
            ScaleLaw::HierarchicalUniform { lo, hi, multiplier } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && hi >= lo) {
                    bad(format!("need 0 < lo <= hi, got lo={lo} hi={hi}"))
                } else if !(multiplier.is_finite() && *multiplier > 0.0) {
                    bad(format!("multiplier must be positive, got {multiplier}"))
                } else {
                    Ok(())
                }
            }
            ScaleLaw::Empirical { scales } => {
                if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    bad("empirical scales must be a nonempty list of positive values".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScaleLaw::Fixed { scale } => *scale,
            ScaleLaw::HierarchicalUniform { lo, hi, multiplier } => {
                if hi > lo {
                    multiplier * rng.random_range(*lo..*hi)
                } else {
                    multiplier * lo
                }
            }
            ScaleLaw::Empirical { scales } => scales[rng.random_range(0..scales.len())],
        }
    }

    /// `E[φ²]`.
    pub fn second_moment(&self) -> f64 {
        match self {
            ScaleLaw::Fixed { scale } => scale * scale,
            ScaleLaw::HierarchicalUniform { lo, hi, multiplier } => {
                let m2 = multiplier * multiplier;
                if hi > lo {
                    m2 * (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo))
                } else {
                    m2 * lo * lo
                }
            }
            ScaleLaw::Empirical { scales } => {
                scales.iter().map(|s| s * s).sum::<f64>() / scales.len() as f64
            }
        }
    }

    fn fixed_scale(&self) -> Option<f64> {
        match self {
            ScaleLaw::Fixed { scale } => Some(*scale),
            _ => None,
        }
    }
}

/// Noise family for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum CoordNoise {
    None,
    /// `N(0, φ²)`.
    Gaussian { scale: ScaleLaw },
    /// `U(-φ, φ)`.
    Uniform { half_width: ScaleLaw },
    /// `Laplace(0, φ)`.
    Laplace { scale: ScaleLaw },
    /// `φ · t(dof)`; only `dof = 3` is accepted.
    StudentT { dof: f64, scale: ScaleLaw },
    /// `multiplier · (Poisson(rate) - rate)`.
    CenteredPoisson { rate: f64, multiplier: f64 },
}

impl CoordNoise {
    pub fn validate(&self) -> Result<()> {
        match self {
            CoordNoise::None => Ok(()),
            CoordNoise::Gaussian { scale } | CoordNoise::Laplace { scale } => scale.validate(),
            CoordNoise::Uniform { half_width } => half_width.validate(),
            CoordNoise::StudentT { dof, scale } => {
                if *dof != 3.0 {
                    return Err(Error::InvalidNoise(format!(
                        "student-t noise requires dof = 3, got {dof}"
                    )));
                }
                scale.validate()
            }
            CoordNoise::CenteredPoisson { rate, multiplier } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    Err(Error::InvalidNoise(format!("rate must be positive, got {rate}")))
                } else if !(multiplier.is_finite() && *multiplier > 0.0) {
                    Err(Error::InvalidNoise(format!(
                        "multiplier must be positive, got {multiplier}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, CoordNoise::None)
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CoordNoise::None => 0.0,
            CoordNoise::Gaussian { scale } => {
                let phi = scale.sample(rng);
                phi * rng.sample::<f64, _>(StandardNormal)
            }
            CoordNoise::Uniform { half_width } => {
                let a = half_width.sample(rng);
                rng.random_range(-a..a)
            }
            CoordNoise::Laplace { scale } => {
                let b = scale.sample(rng);
                // inverse cdf on a symmetric uniform
                let u: f64 = rng.random::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            CoordNoise::StudentT { dof, scale } => {
                let s = scale.sample(rng);
                let t = StudentT::new(*dof).expect("validated dof");
                s * t.sample(rng)
            }
            CoordNoise::CenteredPoisson { rate, multiplier } => {
                let p = Poisson::new(*rate).expect("validated rate");
                let k: f64 = p.sample(rng);
                multiplier * (k - rate)
            }
        }
    }

    /// `E_φ[α(φ)]`, the expected conditional second moment.
    pub fn mean_alpha(&self) -> f64 {
        match self {
            CoordNoise::None => 0.0,
            CoordNoise::Gaussian { scale } => scale.second_moment(),
            CoordNoise::Uniform { half_width } => half_width.second_moment() / 3.0,
            CoordNoise::Laplace { scale } => 2.0 * scale.second_moment(),
            CoordNoise::StudentT { dof, scale } => dof / (dof - 2.0) * scale.second_moment(),
            CoordNoise::CenteredPoisson { rate, multiplier } => multiplier * multiplier * rate,
        }
    }

    /// Characteristic function at `t` for the fixed-scale analytic families.
    pub fn characteristic_function(&self, t: f64) -> Result<Complex64> {
        let unsupported = |what: &str| Err(Error::Unsupported(what.to_string()));
        let value = match self {
            CoordNoise::None => 1.0,
            CoordNoise::Gaussian { scale } => match scale.fixed_scale() {
                Some(phi) => (-0.5 * phi * phi * t * t).exp(),
                None => return unsupported("heteroscedastic gaussian noise"),
            },
            CoordNoise::Uniform { half_width } => match half_width.fixed_scale() {
                Some(a) => {
                    let x = a * t;
                    if x == 0.0 {
                        1.0
                    } else {
                        x.sin() / x
                    }
                }
                None => return unsupported("heteroscedastic uniform noise"),
            },
            CoordNoise::Laplace { scale } => match scale.fixed_scale() {
                Some(b) => 1.0 / (1.0 + b * b * t * t),
                None => return unsupported("heteroscedastic laplace noise"),
            },
            CoordNoise::StudentT { .. } => return unsupported("student-t noise"),
            CoordNoise::CenteredPoisson { .. } => return unsupported("centered poisson noise"),
        };
        Ok(Complex64::new(value, 0.0))
    }
}

/// Independent noise laws, one per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CoordNoise>", into = "Vec<CoordNoise>")]
pub struct NoiseModel {
    coords: Vec<CoordNoise>,
}

impl TryFrom<Vec<CoordNoise>> for NoiseModel {
    type Error = Error;
    fn try_from(coords: Vec<CoordNoise>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<NoiseModel> for Vec<CoordNoise> {
    fn from(m: NoiseModel) -> Self {
        m.coords
    }
}

impl NoiseModel {
    pub fn new(coords: Vec<CoordNoise>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidNoise("need at least one coordinate".into()));
        }
        for c in &coords {
            c.validate()?;
        }
        Ok(Self { coords })
    }

    /// No measurement error on any of `dim` coordinates.
    pub fn none(dim: usize) -> Self {
        Self {
            coords: vec![CoordNoise::None; dim.max(1)],
        }
    }

    /// The same family on each of `dim` coordinates (drawn independently).
    pub fn repeated(family: CoordNoise, dim: usize) -> Result<Self> {
        Self::new(vec![family; dim])
    }

    pub fn gaussian(scale: f64) -> Result<Self> {
        Self::new(vec![CoordNoise::Gaussian {
            scale: ScaleLaw::fixed(scale),
        }])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[CoordNoise] {
        &self.coords
    }

    pub fn is_none(&self) -> bool {
        self.coords.iter().all(CoordNoise::is_none)
    }

    /// Fills one row with a fresh draw (a new φ per coordinate).
    #[inline]
    pub fn sample_row<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.coords) {
            *o = c.sample(rng);
        }
    }

    /// Adds a fresh noise draw to every row of `data` in place.
    pub fn perturb<R: Rng + ?Sized>(&self, data: &mut Dataset, rng: &mut R) -> Result<()> {
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        if self.is_none() {
            return Ok(());
        }
        for i in 0..data.len() {
            for (v, c) in data.row_mut(i).iter_mut().zip(&self.coords) {
                *v += c.sample(rng);
            }
        }
        Ok(())
    }

    pub fn mean_alpha(&self) -> Vec<f64> {
        self.coords.iter().map(CoordNoise::mean_alpha).collect()
    }

    pub fn characteristic_function(&self, t: f64) -> Result<Vec<Complex64>> {
        self.coords
            .iter()
            .map(|c| c.characteristic_function(t))
            .collect()
    }
}

/// `n` independent rows of noise.
pub fn sample_noise<R: Rng + ?Sized>(model: &NoiseModel, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let d = model.dim();
    let mut values = vec![0.0; n * d];
    if !model.is_none() {
        for row in values.chunks_exact_mut(d) {
            model.sample_row(rng, row);
        }
    }
    Dataset::new(d, values)
}

/// Shorthand for [`ScaleLaw::HierarchicalUniform`].
pub fn hierarchical_uniform(lo: f64, hi: f64, multiplier: f64) -> ScaleLaw {
    ScaleLaw::HierarchicalUniform { lo, hi, multiplier }
}
