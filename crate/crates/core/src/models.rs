//! Latent parametric families `q_θ` with sampling, log-density and score.
//!
//! Parameters live in an unconstrained space: mixture weights are a softmax
//! of logits and scales are exponentials of log-scales, so plain gradient
//! steps never leave the parameter space. Scores are gradients with respect
//! to these unconstrained coordinates.
//!
//! Parameter layouts (`K` mixture components, `p` features):
//!
//! | family | layout |
//! |---|---|
//! | `Gmm` | `logit_1..K, mean_1..K, log_sd_1..K` |
//! | `LinearEiv` | `alpha, beta, log_sigma_reg,` GMM block for `x` |
//! | `LogisticEiv` | `alpha, beta_1..p,` one GMM block per feature |
//!
//! Data coordinates: `Gmm` is `(x)`, `LinearEiv` is `(x, y)`, and
//! `LogisticEiv` is `(x_1, …, x_p, r)` with a binary response `r`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Unconstrained parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Model family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Model {
    /// Univariate `K`-component Gaussian mixture.
    Gmm { components: usize },
    /// `y = α + βx + ε`, `ε ~ N(0, σ_reg²)`, `x` from a `K`-component mixture.
    LinearEiv { components: usize },
    /// `r ~ Bernoulli(sigmoid(α + βᵀx))`, each feature from its own mixture.
    LogisticEiv { features: usize, components: usize },
}

/// Mixture parameters on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || sds.len() != k {
            return Err(Error::InvalidParams(
                "weights, means and sds need the same nonzero length".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParams("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("weights sum to {total}")));
        }
        if sds.iter().any(|s| !(s.is_finite() && *s > 0.0)) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParams("invalid means or sds".into()));
        }
        Ok(Self { weights, means, sds })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Components reordered by ascending weight (label-switching convention).
    pub fn sorted_by_weight(&self) -> Mixture {
        let mut idx: Vec<usize> = (0..self.components()).collect();
        idx.sort_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]));
        Mixture {
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
            means: idx.iter().map(|&i| self.means[i]).collect(),
            sds: idx.iter().map(|&i| self.sds[i]).collect(),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| {
                let z = (x - m) / s;
                w * (-0.5 * z * z - LN_SQRT_2PI).exp() / s
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| w * (s * s + (m - mu) * (m - mu)))
            .sum()
    }

    /// Unconstrained block `(logits, means, log_sds)`; the last logit is 0.
    pub fn to_block(&self) -> Vec<f64> {
        let k = self.components();
        let last = self.weights[k - 1].ln();
        let mut out = Vec::with_capacity(3 * k);
        out.extend(self.weights.iter().map(|w| w.ln() - last));
        out.extend_from_slice(&self.means);
        out.extend(self.sds.iter().map(|s| s.ln()));
        out
    }

    pub fn from_block(block: &[f64]) -> Mixture {
        let v = GmmView::new(block);
        Mixture {
            weights: v.weights,
            means: v.means.to_vec(),
            sds: v.sds,
        }
    }
}

/// Natural-scale parameters for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum NaturalParams {
    Gmm {
        mixture: Mixture,
    },
    LinearEiv {
        alpha: f64,
        beta: f64,
        sigma_reg: f64,
        x: Mixture,
    },
    LogisticEiv {
        alpha: f64,
        beta: Vec<f64>,
        features: Vec<Mixture>,
    },
}

/// Draws and their scores, both row-major.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub draws: Dataset,
    scores: Vec<f64>,
    n_params: usize,
}

impl ModelBatch {
    pub fn score(&self, j: usize) -> &[f64] {
        &self.scores[j * self.n_params..(j + 1) * self.n_params]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Borrowed view of one mixture block with derived natural parameters.
struct GmmView<'a> {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: &'a [f64],
    sds: Vec<f64>,
    log_sds: &'a [f64],
}

impl<'a> GmmView<'a> {
    fn new(block: &'a [f64]) -> Self {
        let k = block.len() / 3;
        let logits = &block[..k];
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        let log_weights: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        let log_sds = &block[2 * k..3 * k];
        Self {
            log_weights,
            weights,
            means: &block[k..2 * k],
            sds: log_sds.iter().map(|l| l.exp()).collect(),
            log_sds,
        }
    }

    fn k(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let mut acc = 0.0;
        let mut comp = self.k() - 1;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        self.means[comp] + self.sds[comp] * z
    }

    /// Log-density at `x`; writes the block score into `score` when given.
    fn log_pdf(&self, x: f64, score: Option<&mut [f64]>) -> f64 {
        let k = self.k();
        let mut comp_lp = [0.0f64; 16];
        let mut heap;
        let lp: &mut [f64] = if k <= 16 {
            &mut comp_lp[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for c in 0..k {
            let z = (x - self.means[c]) / self.sds[c];
            lp[c] = self.log_weights[c] - LN_SQRT_2PI - self.log_sds[c] - 0.5 * z * z;
        }
        let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total = mx + lp.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        if let Some(s) = score {
            for c in 0..k {
                let r = (lp[c] - total).exp();
                let z = (x - self.means[c]) / self.sds[c];
                s[c] = r - self.weights[c];
                s[k + c] = r * z / self.sds[c];
                s[2 * k + c] = r * (z * z - 1.0);
            }
        }
        total
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Model {
    pub fn gmm(components: usize) -> Self {
        Model::Gmm { components }
    }

    pub fn components(&self) -> usize {
        match *self {
            Model::Gmm { components }
            | Model::LinearEiv { components }
            | Model::LogisticEiv { components, .. } => components,
        }
    }

    pub fn n_params(&self) -> usize {
        let k = self.components();
        match *self {
            Model::Gmm { .. } => 3 * k,
            Model::LinearEiv { .. } => 3 + 3 * k,
            Model::LogisticEiv { features, .. } => 1 + features + 3 * k * features,
        }
    }

    /// Dimension of one observation.
    pub fn data_dim(&self) -> usize {
        match *self {
            Model::Gmm { .. } => 1,
            Model::LinearEiv { .. } => 2,
            Model::LogisticEiv { features, .. } => features + 1,
        }
    }

    /// Names of the data coordinates.
    pub fn coordinate_names(&self) -> Vec<String> {
        match *self {
            Model::Gmm { .. } => vec!["x".into()],
            Model::LinearEiv { .. } => vec!["x".into(), "y".into()],
            Model::LogisticEiv { features, .. } => {
                let mut v: Vec<String> = (1..=features).map(|f| format!("x{f}")).collect();
                v.push("r".into());
                v
            }
        }
    }

    /// Coordinates that never receive measurement error.
    pub fn noiseless_coordinates(&self) -> Vec<usize> {
        match *self {
            Model::LogisticEiv { features, .. } => vec![features],
            _ => vec![],
        }
    }

    /// Offsets of the mixture blocks within the parameter vector.
    fn gmm_offsets(&self) -> Vec<usize> {
        let k = self.components();
        match *self {
            Model::Gmm { .. } => vec![0],
            Model::LinearEiv { .. } => vec![3],
            Model::LogisticEiv { features, .. } => {
                (0..features).map(|f| 1 + features + 3 * k * f).collect()
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let k = self.components();
        let block = |prefix: &str| -> Vec<String> {
            let mut v = Vec::with_capacity(3 * k);
            for name in ["logit", "mean", "log_sd"] {
                for c in 1..=k {
                    v.push(format!("{prefix}{name}[{c}]"));
                }
            }
            v
        };
        match *self {
            Model::Gmm { .. } => block(""),
            Model::LinearEiv { .. } => {
                let mut v = vec!["alpha".into(), "beta".into(), "log_sigma_reg".into()];
                v.extend(block("x."));
                v
            }
            Model::LogisticEiv { features, .. } => {
                let mut v = vec!["alpha".to_string()];
                v.extend((1..=features).map(|f| format!("beta[{f}]")));
                for f in 1..=features {
                    v.extend(block(&format!("x{f}.")));
                }
                v
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| n == name)
    }

    /// The last logit of every mixture block. Softmax is invariant to a common
    /// shift of the logits, so pinning one per block removes a flat direction.
    pub fn reference_logits(&self) -> Vec<usize> {
        let k = self.components();
        self.gmm_offsets().iter().map(|o| o + k - 1).collect()
    }

    pub fn validate_params(&self, theta: &ParamVector) -> Result<()> {
        if self.components() == 0 {
            return Err(Error::InvalidParams("need at least one component".into()));
        }
        if let Model::LogisticEiv { features: 0, .. } = self {
            return Err(Error::InvalidParams("need at least one feature".into()));
        }
        if theta.len() != self.n_params() {
            return Err(Error::InvalidParams(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        if !theta.is_finite() {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    fn check_point(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim(),
                got: y.len(),
            });
        }
        if let Model::LogisticEiv { features, .. } = *self {
            let r = y[features];
            if r != 0.0 && r != 1.0 {
                return Err(Error::InvalidResponse(r));
            }
        }
        Ok(())
    }

    /// Draws from `q_θ`.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        theta: &ParamVector,
        m: usize,
        rng: &mut R,
    ) -> Result<Dataset> {
        Ok(self.sample_with_scores(theta, m, rng, false)?.draws)
    }

    /// Draws from `q_θ` together with their scores `∇_θ log q_θ(y_j)`.
    ///
    /// Random numbers are consumed in a θ-independent pattern, so two calls
    /// with cloned generators give common random numbers.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        theta: &ParamVector,
        m: usize,
        rng: &mut R,
    ) -> Result<ModelBatch> {
        self.sample_with_scores(theta, m, rng, true)
    }

    fn sample_with_scores<R: Rng + ?Sized>(
        &self,
        theta: &ParamVector,
        m: usize,
        rng: &mut R,
        with_scores: bool,
    ) -> Result<ModelBatch> {
        self.validate_params(theta)?;
        if m == 0 {
            return Err(Error::TooFewSamples { need: 1, got: 0 });
        }
        let th = theta.as_slice();
        let p = self.n_params();
        let dim = self.data_dim();
        let mut draws = vec![0.0; m * dim];
        let mut scores = if with_scores { vec![0.0; m * p] } else { Vec::new() };
        match *self {
            Model::Gmm { components: k } => {
                let g = GmmView::new(&th[..3 * k]);
                for j in 0..m {
                    let x = g.sample(rng);
                    draws[j] = x;
                    if with_scores {
                        g.log_pdf(x, Some(&mut scores[j * p..(j + 1) * p]));
                    }
                }
            }
            Model::LinearEiv { components: k } => {
                let (alpha, beta, sigma) = (th[0], th[1], th[2].exp());
                let g = GmmView::new(&th[3..3 + 3 * k]);
                for j in 0..m {
                    let x = g.sample(rng);
                    let eps: f64 = rng.sample(StandardNormal);
                    let y = alpha + beta * x + sigma * eps;
                    draws[2 * j] = x;
                    draws[2 * j + 1] = y;
                    if with_scores {
                        let s = &mut scores[j * p..(j + 1) * p];
                        let resid = (y - alpha - beta * x) / sigma;
                        s[0] = resid / sigma;
                        s[1] = x * resid / sigma;
                        s[2] = resid * resid - 1.0;
                        g.log_pdf(x, Some(&mut s[3..]));
                    }
                }
            }
            Model::LogisticEiv {
                features,
                components: k,
            } => {
                let offsets = self.gmm_offsets();
                let views: Vec<GmmView> = offsets
                    .iter()
                    .map(|&o| GmmView::new(&th[o..o + 3 * k]))
                    .collect();
                for j in 0..m {
                    let row = &mut draws[j * dim..(j + 1) * dim];
                    let mut eta = th[0];
                    for f in 0..features {
                        let x = views[f].sample(rng);
                        row[f] = x;
                        eta += th[1 + f] * x;
                    }
                    let u: f64 = rng.random();
                    let prob = sigmoid(eta);
                    let r = if u < prob { 1.0 } else { 0.0 };
                    row[features] = r;
                    if with_scores {
                        let s = &mut scores[j * p..(j + 1) * p];
                        s[0] = r - prob;
                        for f in 0..features {
                            s[1 + f] = (r - prob) * row[f];
                            let o = offsets[f];
                            views[f].log_pdf(row[f], Some(&mut s[o..o + 3 * k]));
                        }
                    }
                }
            }
        }
        Ok(ModelBatch {
            draws: Dataset::new(dim, draws)?,
            scores,
            n_params: if with_scores { p } else { 0 },
        })
    }

    pub fn log_density(&self, theta: &ParamVector, y: &[f64]) -> Result<f64> {
        self.eval(theta, y, None)
    }

    pub fn score(&self, theta: &ParamVector, y: &[f64]) -> Result<Vec<f64>> {
        let mut s = vec![0.0; self.n_params()];
        self.eval(theta, y, Some(&mut s))?;
        Ok(s)
    }

    fn eval(&self, theta: &ParamVector, y: &[f64], mut score: Option<&mut [f64]>) -> Result<f64> {
        self.validate_params(theta)?;
        self.check_point(y)?;
        let th = theta.as_slice();
        match *self {
            Model::Gmm { components: k } => {
                Ok(GmmView::new(&th[..3 * k]).log_pdf(y[0], score))
            }
            Model::LinearEiv { components: k } => {
                let (alpha, beta, log_sigma) = (th[0], th[1], th[2]);
                let sigma = log_sigma.exp();
                let (x, yv) = (y[0], y[1]);
                let resid = (yv - alpha - beta * x) / sigma;
                let reg = -LN_SQRT_2PI - log_sigma - 0.5 * resid * resid;
                let g = GmmView::new(&th[3..3 + 3 * k]);
                let lp = match score.as_deref_mut() {
                    Some(s) => {
                        s[0] = resid / sigma;
                        s[1] = x * resid / sigma;
                        s[2] = resid * resid - 1.0;
                        g.log_pdf(x, Some(&mut s[3..]))
                    }
                    None => g.log_pdf(x, None),
                };
                Ok(reg + lp)
            }
            Model::LogisticEiv {
                features,
                components: k,
            } => {
                let offsets = self.gmm_offsets();
                let r = y[features];
                let eta = th[0] + (0..features).map(|f| th[1 + f] * y[f]).sum::<f64>();
                let mut total = if r == 1.0 {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                };
                let prob = sigmoid(eta);
                if let Some(s) = score.as_deref_mut() {
                    s[0] = r - prob;
                    for f in 0..features {
                        s[1 + f] = (r - prob) * y[f];
                    }
                }
                for (f, &o) in offsets.iter().enumerate() {
                    let g = GmmView::new(&th[o..o + 3 * k]);
                    total += match score.as_deref_mut() {
                        Some(s) => g.log_pdf(y[f], Some(&mut s[o..o + 3 * k])),
                        None => g.log_pdf(y[f], None),
                    };
                }
                Ok(total)
            }
        }
    }

    /// Natural-scale view of `θ`.
    pub fn natural(&self, theta: &ParamVector) -> Result<NaturalParams> {
        self.validate_params(theta)?;
        let th = theta.as_slice();
        let k = self.components();
        Ok(match *self {
            Model::Gmm { .. } => NaturalParams::Gmm {
                mixture: Mixture::from_block(th),
            },
            Model::LinearEiv { .. } => NaturalParams::LinearEiv {
                alpha: th[0],
                beta: th[1],
                sigma_reg: th[2].exp(),
                x: Mixture::from_block(&th[3..3 + 3 * k]),
            },
            Model::LogisticEiv { features, .. } => NaturalParams::LogisticEiv {
                alpha: th[0],
                beta: th[1..1 + features].to_vec(),
                features: self
                    .gmm_offsets()
                    .iter()
                    .map(|&o| Mixture::from_block(&th[o..o + 3 * k]))
                    .collect(),
            },
        })
    }

    /// Inverse of [`Model::natural`].
    pub fn from_natural(&self, natural: &NaturalParams) -> Result<ParamVector> {
        let k = self.components();
        let check = |m: &Mixture| {
            if m.components() == k {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!(
                    "expected {k} components, got {}",
                    m.components()
                )))
            }
        };
        let v = match (self, natural) {
            (Model::Gmm { .. }, NaturalParams::Gmm { mixture }) => {
                check(mixture)?;
                mixture.to_block()
            }
            (
                Model::LinearEiv { .. },
                NaturalParams::LinearEiv {
                    alpha,
                    beta,
                    sigma_reg,
                    x,
                },
            ) => {
                check(x)?;
                let mut v = vec![*alpha, *beta, sigma_reg.ln()];
                v.extend(x.to_block());
                v
            }
            (
                Model::LogisticEiv { features: p, .. },
                NaturalParams::LogisticEiv {
                    alpha,
                    beta,
                    features,
                },
            ) => {
                if beta.len() != *p || features.len() != *p {
                    return Err(Error::InvalidParams(format!("expected {p} features")));
                }
                let mut v = vec![*alpha];
                v.extend_from_slice(beta);
                for m in features {
                    check(m)?;
                    v.extend(m.to_block());
                }
                v
            }
            _ => return Err(Error::InvalidParams("family mismatch".into())),
        };
        let theta = ParamVector(v);
        self.validate_params(&theta)?;
        Ok(theta)
    }
}
