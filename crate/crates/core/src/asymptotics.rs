//! Sandwich covariance `C = g⁻¹ Σ g⁻¹` of the convMMD estimator, where `g` is the
//! curvature of `L_N` at the optimum and `Σ` the covariance of the
//! per-observation scores. `√N (θ̂ − θ*)` is asymptotically `N(0, C)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::optim::ConvMmdProblem;
use crate::rng::{derive_seed, rng_from_seed};

/// Eigenvalues below this fraction of the largest are floored on inversion.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Default number of batches.
pub const DEFAULT_BATCHES: usize = 50;

/// Relative finite-difference step: `h = FD_REL_STEP · (1 + |θ_j|)`.
pub const FD_REL_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    /// Parameter indices the matrices refer to, in order.
    pub free: Vec<usize>,
    pub curvature_g: Vec<Vec<f64>>,
    pub score_cov_sigma: Vec<Vec<f64>>,
    pub covariance_c: Vec<Vec<f64>>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub warnings: Vec<String>,
}

impl SandwichEstimate {
    /// `C_jj` for the `j`-th free parameter.
    pub fn variance(&self, j: usize) -> f64 {
        self.covariance_c[j][j]
    }

    /// `C` embedded in the full parameter space, zero for non-free entries.
    pub fn full_covariance(&self, n_params: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n_params]; n_params];
        for (a, &i) in self.free.iter().enumerate() {
            for (b, &j) in self.free.iter().enumerate() {
                out[i][j] = self.covariance_c[a][b];
            }
        }
        out
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Empirical covariance (divisor `n − 1`) of `n` row-major vectors of length `d`.
pub fn score_covariance(scores: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if d == 0 || scores.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: scores.len(),
        });
    }
    let n = scores.len() / d;
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let mut mean = vec![0.0; d];
    for row in scores.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for row in scores.chunks_exact(d) {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Componentwise median of equally shaped matrices.
pub fn median_matrix(ms: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = ms.first().ok_or(Error::EmptyDataset)?;
    let (r, c) = first.shape();
    let mut out = DMatrix::zeros(r, c);
    let mut buf = Vec::with_capacity(ms.len());
    for i in 0..r {
        for j in 0..c {
            buf.clear();
            buf.extend(ms.iter().map(|m| m[(i, j)]));
            buf.sort_by(f64::total_cmp);
            let n = buf.len();
            out[(i, j)] = if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            };
        }
    }
    Ok(out)
}

/// `g⁻¹ Σ g⁻¹` through a symmetric eigendecomposition of `g`.
///
/// A non-positive eigenvalue is an error; positive eigenvalues below
/// `EIGEN_FLOOR · max` are floored and reported in the returned warnings.
pub fn godambe(g: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<String>)> {
    let sym = (g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > 0.0) || !min.is_finite() {
        let condition = if min == 0.0 { f64::INFINITY } else { (max / min).abs() };
        return Err(Error::CurvatureNotInvertible { condition });
    }
    let mut warnings = Vec::new();
    let floor = EIGEN_FLOOR * max;
    let inv_vals = eig.eigenvalues.map(|l| {
        if l < floor {
            1.0 / floor
        } else {
            1.0 / l
        }
    });
    if min < floor {
        warnings.push(format!(
            "curvature eigenvalue {min:.3e} floored at {floor:.3e} (condition {:.3e})",
            max / min
        ));
    }
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let c = &inv * sigma * &inv;
    Ok(((&c + c.transpose()) * 0.5, warnings))
}

/// Median-aggregated sandwich from per-batch curvature and score covariances.
pub fn sandwich_from_batches(
    free: Vec<usize>,
    g_batches: &[DMatrix<f64>],
    sigma_batches: &[DMatrix<f64>],
    batch_size: usize,
) -> Result<SandwichEstimate> {
    if g_batches.len() != sigma_batches.len() {
        return Err(Error::DimensionMismatch {
            expected: g_batches.len(),
            got: sigma_batches.len(),
        });
    }
    let g = median_matrix(g_batches)?;
    let g = (&g + g.transpose()) * 0.5;
    let sigma = median_matrix(sigma_batches)?;
    let (c, warnings) = godambe(&g, &sigma)?;
    Ok(SandwichEstimate {
        free,
        curvature_g: to_rows(&g),
        score_cov_sigma: to_rows(&sigma),
        covariance_c: to_rows(&c),
        n_batches: g_batches.len(),
        batch_size,
        warnings,
    })
}

/// Score covariance from one model batch: per-observation scores
/// `s_i = −(2/M) Σ_j k(x̃_i, ỹ_j) S_j` (plus a term constant in `i`).
fn batch_score_cov(
    problem: &ConvMmdProblem<'_>,
    theta: &ParamVector,
    free: &[usize],
    m: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    let batch = problem.simulate(theta, m, &mut rng)?;
    let d = free.len();
    let scale = -2.0 / m as f64;
    let mut w = Vec::with_capacity(m * d);
    for j in 0..m {
        let s = batch.score(j);
        w.extend(free.iter().map(|&i| scale * s[i]));
    }
    let sums = problem.sums();
    let field = sums.field(&batch.draws, &w, d)?;
    let per_obs = sums.eval(&field, problem.data())?;
    score_covariance(&per_obs, d)
}

/// Curvature from one batch: central differences of the gradient estimate with
/// common random numbers.
fn batch_curvature(
    problem: &ConvMmdProblem<'_>,
    theta: &ParamVector,
    free: &[usize],
    m: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let d = free.len();
    let mut g = DMatrix::zeros(d, d);
    for (b, &j) in free.iter().enumerate() {
        let h = FD_REL_STEP * (1.0 + theta.0[j].abs());
        let (mut up, mut dn) = (theta.clone(), theta.clone());
        up.0[j] += h;
        dn.0[j] -= h;
        let gu = problem.gradient(&up, m, &mut rng_from_seed(seed))?.gradient;
        let gd = problem.gradient(&dn, m, &mut rng_from_seed(seed))?.gradient;
        for (a, &i) in free.iter().enumerate() {
            g[(a, b)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// Sandwich covariance at `theta` over the `free` parameters from
/// `n_batches` independent batches of `m` model draws.
pub fn sandwich_covariance(
    problem: &ConvMmdProblem<'_>,
    theta: &ParamVector,
    free: &[usize],
    n_batches: usize,
    m: usize,
    seed: u64,
) -> Result<SandwichEstimate> {
    problem.model().validate_params(theta)?;
    if free.is_empty() || free.iter().any(|&i| i >= theta.len()) {
        return Err(Error::InvalidArgument {
            name: "free",
            reason: "need a nonempty list of valid parameter indices".into(),
        });
    }
    if n_batches == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    if m < 2 {
        return Err(Error::TooFewSamples { need: 2, got: m });
    }
    let mut gs = Vec::with_capacity(n_batches);
    let mut sigmas = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let s = derive_seed(seed, b as u64);
        sigmas.push(batch_score_cov(problem, theta, free, m, derive_seed(s, 0))?);
        gs.push(batch_curvature(problem, theta, free, m, derive_seed(s, 1))?);
    }
    sandwich_from_batches(free.to_vec(), &gs, &sigmas, m)
}

/// Scalar factor of the closed-form covariance for the Gaussian mean model
/// with Gaussian noise and a Gaussian kernel.
pub fn closed_form_gaussian_scalar(sigma: f64, tau: f64, l: f64, d: usize) -> Result<f64> {
    crate::error::check_positive("sigma", sigma)?;
    crate::error::check_positive("l", l)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "tau",
            reason: format!("must be nonnegative, got {tau}"),
        });
    }
    if d == 0 {
        return Err(Error::InvalidArgument {
            name: "d",
            reason: "must be at least 1".into(),
        });
    }
    let (s2, t2, l2) = (sigma * sigma, tau * tau, l * l);
    let v = s2 + t2;
    let df = d as f64;
    Ok(v * ((l2 + v) * (l2 + 3.0 * v)).powf(-df / 2.0 - 1.0) * (l2 + 2.0 * v).powf(df + 2.0))
}

/// The closed form times the `d × d` identity.
pub fn closed_form_gaussian_cov(sigma: f64, tau: f64, l: f64, d: usize) -> Result<Vec<Vec<f64>>> {
    let c = closed_form_gaussian_scalar(sigma, tau, l, d)?;
    Ok((0..d)
        .map(|i| (0..d).map(|j| if i == j { c } else { 0.0 }).collect())
        .collect())
}

/// `θ̂_j ± z · sqrt(C_jj / N)` with `z` the `(1+level)/2` normal quantile.
pub fn ci_from_covariance(theta_hat: &[f64], c: &[Vec<f64>], n: usize, level: f64) -> Result<Vec<(f64, f64)>> {
    if c.len() != theta_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: theta_hat.len(),
            got: c.len(),
        });
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidArgument {
            name: "level",
            reason: format!("must lie in [0, 1), got {level}"),
        });
    }
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let z = if level == 0.0 {
        0.0
    } else {
        Normal::standard().inverse_cdf((1.0 + level) / 2.0)
    };
    theta_hat
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let v = c[j][j];
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument {
                    name: "covariance",
                    reason: format!("negative diagonal entry {v} at {j}"),
                });
            }
            let half = z * (v / n as f64).sqrt();
            Ok((t - half, t + half))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelMixture;
    use crate::models::Model;
    use crate::noise::NoiseModel;
    use crate::sums::Backend;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn closed_form_examples() {
        let c0 = closed_form_gaussian_scalar(1.0, 0.0, 1.0, 1).unwrap();
        assert_relative_eq!(c0, 27.0 / 8f64.powf(1.5), epsilon = 1e-14);
        assert_relative_eq!(c0, 1.193_242_693_252_298_8, epsilon = 1e-12);
        let c1 = closed_form_gaussian_scalar(1.0, 1.0, 1.0, 1).unwrap();
        assert_relative_eq!(c1, 250.0 / 21f64.powf(1.5), epsilon = 1e-12);
        assert_relative_eq!(c1, 2.59829, max_relative = 5e-4);
        assert!(c1 > c0);
        let m = closed_form_gaussian_cov(1.0, 1.0, 1.0, 2).unwrap();
        assert_eq!(m[0][1], 0.0);
        assert!(closed_form_gaussian_scalar(0.0, 1.0, 1.0, 1).is_err());
        assert!(closed_form_gaussian_scalar(1.0, -1.0, 1.0, 1).is_err());
    }

    #[test]
    fn closed_form_decreases_in_bandwidth_toward_data_variance() {
        // d/dℓ² log C ∝ (ab − c²) < 0 with a = ℓ²+v, b = ℓ²+3v, c = ℓ²+2v
        for d in [1, 2, 5] {
            let vals: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 64.0]
                .iter()
                .map(|&l| closed_form_gaussian_scalar(1.0, 1.0, l, d).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
            assert_relative_eq!(*vals.last().unwrap(), 2.0, max_relative = 1e-3);
        }
    }

    #[test]
    fn ci_examples() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let level = 2.0 * Normal::standard().cdf(2.0) - 1.0;
        let ci = ci_from_covariance(&[1.0, -1.0], &c, 100, level).unwrap();
        assert_relative_eq!(ci[0].0, 0.8, epsilon = 1e-9);
        assert_relative_eq!(ci[1].1, -0.8, epsilon = 1e-9);
        let ci = ci_from_covariance(&[1.0, -1.0], &c, 100, 0.0).unwrap();
        assert_eq!(ci[0], (1.0, 1.0));
        let bad = vec![vec![-1.0, 0.0], vec![0.0, 1.0]];
        assert!(ci_from_covariance(&[0.0, 0.0], &bad, 10, 0.9).is_err());
    }

    #[test]
    fn doubling_scores_quadruples_covariance() {
        let mut rng = rng_from_seed(1);
        let s: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
        let d: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let a = score_covariance(&s, 3).unwrap();
        let b = score_covariance(&d, 3).unwrap();
        assert_eq!(b, a * 4.0);
    }

    #[test]
    fn recovers_sandwich_of_quadratic_surrogate() {
        // batches of noisy curvature and synthetic scores with known g and Σ
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let root = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        let sigma = &root * root.transpose();
        let mut rng = rng_from_seed(2);
        let (mut gs, mut ss) = (Vec::new(), Vec::new());
        for _ in 0..51 {
            let noise = DMatrix::from_fn(2, 2, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
            gs.push(&g + (&noise + noise.transpose()) * 0.5);
            let mut scores = Vec::new();
            for _ in 0..20_000 {
                let z = nalgebra::DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                scores.extend((&root * z).iter());
            }
            ss.push(score_covariance(&scores, 2).unwrap());
        }
        let est = sandwich_from_batches(vec![0, 1], &gs, &ss, 20_000).unwrap();
        let ginv = g.clone().try_inverse().unwrap();
        let truth = &ginv * &sigma * &ginv;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(est.covariance_c[i][j], truth[(i, j)], max_relative = 0.02);
            }
        }
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn indefinite_curvature_is_rejected() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let s = DMatrix::identity(2, 2);
        assert!(matches!(godambe(&g, &s), Err(Error::CurvatureNotInvertible { .. })));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        let (_, w) = godambe(&tiny, &s).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn sandwich_matrices_are_symmetric_and_psd() {
        let model = Model::gmm(1);
        let truth = ParamVector(vec![0.0, 0.0, 2f64.ln()]);
        let noise = NoiseModel::gaussian(1.0).unwrap();
        let mut rng = rng_from_seed(3);
        let mut data = model.sample_latent(&truth, 1000, &mut rng).unwrap();
        noise.perturb(&mut data, &mut rng).unwrap();
        let kernel = KernelMixture::single(&[1.0]).unwrap();
        let problem = ConvMmdProblem::new(&model, &data, &noise, &kernel, Backend::grid(8.0)).unwrap();
        let est = sandwich_covariance(&problem, &truth, &[1, 2], 7, 1000, 4).unwrap();
        for m in [&est.curvature_g, &est.score_cov_sigma, &est.covariance_c] {
            assert_relative_eq!(m[0][1], m[1][0], epsilon = 1e-8);
            let mat = DMatrix::from_fn(2, 2, |i, j| m[i][j]);
            let eig = SymmetricEigen::new(mat);
            assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-8));
        }
        assert_eq!(est.full_covariance(3)[0], vec![0.0; 3]);
    }
}
