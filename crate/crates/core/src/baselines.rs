//! Naive estimators that ignore measurement error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Mixture;

/// Number of EM restarts; the first uses quantile centers, the rest k-means++.
pub const EM_RESTARTS: usize = 5;
const KMEANS_ITER: usize = 100;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    /// Sorted by ascending weight.
    pub mixture: Mixture,
    pub log_likelihood: Vec<f64>,
    pub n_iter_used: usize,
    pub converged: bool,
}

struct EmRun {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    trace: Vec<f64>,
    converged: bool,
}

/// EM for a univariate `K`-component Gaussian mixture.
///
/// Each restart runs Lloyd's k-means from its seed centers and starts EM from
/// the resulting partition; EM stops once the log-likelihood gain per
/// observation drops below `tol`.
pub fn em_gmm<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut R,
) -> Result<EmResult> {
    let runs = em_gmm_restarts(data, k, max_iter, tol, EM_RESTARTS, rng)?;
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.log_likelihood.last() > runs[best].log_likelihood.last() {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

/// Every restart's local optimum, in restart order (the first restart uses
/// quantile centers, the rest k-means++ seeding).
pub fn em_gmm_restarts<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    max_iter: usize,
    tol: f64,
    restarts: usize,
    rng: &mut R,
) -> Result<Vec<EmResult>> {
    if restarts == 0 {
        return Err(Error::InvalidArgument {
            name: "restarts",
            reason: "need at least one restart".into(),
        });
    }
    if data.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: data.dim(),
        });
    }
    let xs = data.as_slice();
    let n = xs.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k >= n {
        return Err(Error::TooFewSamples { need: k.max(1) + 1, got: n });
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::DegenerateData);
    }
    let floor = 1e-6 * var;

    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(restarts);
    for restart in 0..restarts {
        let centers = if restart == 0 {
            (0..k)
                .map(|c| sorted[(((c as f64 + 0.5) / k as f64) * n as f64) as usize])
                .collect()
        } else {
            kmeans_pp(xs, k, rng)
        };
        let run = em_run(xs, lloyd(xs, centers, floor), floor, max_iter, tol);
        let mixture = Mixture {
            weights: run.weights,
            means: run.means,
            sds: run.sds,
        }
        .sorted_by_weight();
        out.push(EmResult {
            mixture,
            n_iter_used: run.trace.len().saturating_sub(1),
            log_likelihood: run.trace,
            converged: run.converged,
        });
    }
    Ok(out)
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
fn kmeans_pp<R: Rng + ?Sized>(xs: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let mut centers = vec![xs[rng.random_range(0..xs.len())]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = xs.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            xs[pick]
        } else {
            xs[rng.random_range(0..xs.len())]
        };
        centers.push(next);
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - next).powi(2));
        }
    }
    centers
}

/// Lloyd iterations from `centers`; returns weights, means and sds of the
/// final hard partition.
fn lloyd(xs: &[f64], mut centers: Vec<f64>, floor: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = centers.len();
    let mut label = vec![usize::MAX; xs.len()];
    for _ in 0..KMEANS_ITER {
        let mut moved = false;
        for (l, x) in label.iter_mut().zip(xs) {
            let best = (0..k)
                .min_by(|&a, &b| (x - centers[a]).abs().total_cmp(&(x - centers[b]).abs()))
                .expect("k > 0");
            moved |= *l != best;
            *l = best;
        }
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (&l, x) in label.iter().zip(xs) {
            sum[l] += x;
            cnt[l] += 1;
        }
        for c in 0..k {
            if cnt[c] > 0 {
                centers[c] = sum[c] / cnt[c] as f64;
            }
        }
        if !moved {
            break;
        }
    }
    let mut cnt = vec![0.0f64; k];
    let mut ss = vec![0.0; k];
    for (&l, x) in label.iter().zip(xs) {
        cnt[l] += 1.0;
        ss[l] += (x - centers[l]).powi(2);
    }
    let n = xs.len() as f64;
    let weights = cnt.iter().map(|c| c.max(1.0) / n).collect();
    let sds = cnt
        .iter()
        .zip(&ss)
        .map(|(c, s)| (s / c.max(1.0)).max(floor).sqrt())
        .collect();
    (weights, centers, sds)
}

fn em_run(
    xs: &[f64],
    init: (Vec<f64>, Vec<f64>, Vec<f64>),
    floor: f64,
    max_iter: usize,
    tol: f64,
) -> EmRun {
    let n = xs.len();
    let (mut weights, mut means, mut sds) = init;
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let k = means.len();
    let mut resp = vec![0.0; n * k];
    let mut lp = vec![0.0; k];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..=max_iter {
        // E-step, also yields the log-likelihood at the current parameters
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            for c in 0..k {
                let z = (x - means[c]) / sds[c];
                lp[c] = weights[c].ln() - LN_SQRT_2PI - sds[c].ln() - 0.5 * z * z;
            }
            let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + lp.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (lp[c] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            let gain: f64 = ll - prev;
            trace.push(ll);
            if gain.abs() < tol * n as f64 {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if trace.len() > max_iter {
            break;
        }
        // M-step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= 1e-12 {
                continue;
            }
            let mu = (0..n).map(|i| resp[i * k + c] * xs[i]).sum::<f64>() / nk;
            let v = (0..n).map(|i| resp[i * k + c] * (xs[i] - mu).powi(2)).sum::<f64>() / nk;
            weights[c] = nk / n as f64;
            means[c] = mu;
            sds[c] = v.max(floor).sqrt();
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    EmRun {
        weights,
        means,
        sds,
        trace,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub alpha: f64,
    pub beta: f64,
    /// Residual standard deviation with denominator `N − 2`.
    pub residual_sd: f64,
}

/// Simple least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n < 3 {
        return Err(Error::TooFewSamples { need: 3, got: n });
    }
    let nn = n as f64;
    let mx = x.iter().sum::<f64>() / nn;
    let my = y.iter().sum::<f64>() / nn;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - alpha - beta * a).powi(2)).sum();
    Ok(OlsFit {
        alpha,
        beta,
        residual_sd: (rss / (nn - 2.0)).sqrt(),
    })
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn logistic_loglik(design: &DMatrix<f64>, y: &DVector<f64>, coef: &DVector<f64>) -> f64 {
    let eta = design * coef;
    eta.iter()
        .zip(y.iter())
        .map(|(e, r)| if *r == 1.0 { log_sigmoid(*e) } else { log_sigmoid(-*e) })
        .sum()
}

/// Logistic regression by IRLS with step halving. Returns `[intercept, slopes…]`.
///
/// Stops once the score norm per observation drops below `tol`.
pub fn logistic_mle(x: &Dataset, y: &[f64], max_iter: usize, tol: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if let Some(bad) = y.iter().find(|r| **r != 0.0 && **r != 1.0) {
        return Err(Error::InvalidResponse(*bad));
    }
    let ones = y.iter().filter(|r| **r == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::Separation(format!(
            "response takes a single value ({ones} of {n} are 1)"
        )));
    }
    let p = x.dim() + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x.row(i)[j - 1] });
    let yv = DVector::from_column_slice(y);
    let mut coef = DVector::zeros(p);
    let mut ll = logistic_loglik(&design, &yv, &coef);
    for _ in 0..max_iter {
        let eta = &design * &coef;
        let prob = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = design.transpose() * (&yv - &prob);
        if grad.norm() < tol * n as f64 {
            // a near-zero log-likelihood means the classes are perfectly split
            if ll > -1e-6 * n as f64 {
                return Err(Error::Separation(format!(
                    "fitted probabilities are 0 or 1; coefficients {:?}",
                    coef.as_slice()
                )));
            }
            return Ok(coef.iter().cloned().collect());
        }
        let w = prob.map(|q| (q * (1.0 - q)).max(1e-12));
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = design.row(i);
            info += w[i] * row.transpose() * row;
        }
        let Some(chol) = info.cholesky() else {
            return Err(Error::Separation("information matrix is singular".into()));
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        loop {
            let cand = &coef + t * &step;
            let cll = logistic_loglik(&design, &yv, &cand);
            if cll >= ll || t < 1e-10 {
                coef = cand;
                ll = cll;
                break;
            }
            t *= 0.5;
        }
        if coef.amax() > 1e6 {
            break;
        }
    }
    Err(Error::Separation(format!(
        "no convergence after {max_iter} iterations; coefficients {:?}",
        coef.as_slice()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn mixture_draw(n: usize, noise: f64, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let (w, m) = ([0.23, 0.33, 0.44], [-3.72, 0.11, 4.52]);
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let c = if u < w[0] { 0 } else if u < w[0] + w[1] { 1 } else { 2 };
                m[c] + rng.sample::<f64, _>(StandardNormal) + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Dataset::from_column(&xs)
    }

    #[test]
    fn single_component_is_closed_form() {
        let d = Dataset::from_column(&[1.0, 2.0, 4.0, 7.0]);
        let r = em_gmm(&d, 1, 100, 1e-10, &mut rng_from_seed(1)).unwrap();
        assert_eq!(r.mixture.weights, vec![1.0]);
        assert_relative_eq!(r.mixture.means[0], 3.5, epsilon = 1e-12);
        assert_relative_eq!(r.mixture.sds[0], 5.25f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn recovers_separated_mixture_monotonically() {
        let d = mixture_draw(5000, 0.0, 2);
        let r = em_gmm(&d, 3, 500, 1e-8, &mut rng_from_seed(3)).unwrap();
        for (m, t) in r.mixture.means.iter().zip([-3.72, 0.11, 4.52]) {
            assert!((m - t).abs() < 0.15, "{:?}", r.mixture.means);
        }
        for w in r.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let total: f64 = r.mixture.weights.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn noise_inflates_fitted_sds() {
        let d = mixture_draw(5000, 1.258, 4);
        let r = em_gmm(&d, 3, 500, 1e-8, &mut rng_from_seed(5)).unwrap();
        assert!(r.mixture.sds.iter().all(|s| *s > 1.2), "{:?}", r.mixture.sds);
    }

    #[test]
    fn em_errors() {
        let mut rng = rng_from_seed(0);
        assert!(em_gmm(&Dataset::from_column(&[1.0, 2.0]), 2, 10, 1e-8, &mut rng).is_err());
        assert_eq!(
            em_gmm(&Dataset::from_column(&[1.0; 5]), 2, 10, 1e-8, &mut rng),
            Err(Error::DegenerateData)
        );
    }

    #[test]
    fn ols_exact_line_and_errors() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 + v).collect();
        let f = ols(&x, &y).unwrap();
        assert_relative_eq!(f.alpha, 1.5, epsilon = 1e-14);
        assert_relative_eq!(f.beta, 1.0, epsilon = 1e-14);
        assert!(f.residual_sd < 1e-14);
        assert_eq!(ols(&[2.0; 4], &y), Err(Error::ZeroVariance));
    }

    #[test]
    fn ols_normal_equations_and_attenuation() {
        let mut betas = Vec::new();
        for seed in 0..20 {
            let mut rng = rng_from_seed(50 + seed);
            let n = 1000;
            let mut x = Vec::new();
            let mut w = Vec::new();
            let mut y = Vec::new();
            for _ in 0..n {
                let m = if rng.random::<f64>() < 0.3 { 2.5 } else { 3.0 };
                let xi = m + rng.sample::<f64, _>(StandardNormal);
                x.push(xi);
                w.push(xi + 1.258 * rng.sample::<f64, _>(StandardNormal));
                y.push(1.5 + xi + rng.sample::<f64, _>(StandardNormal));
            }
            let f = ols(&w, &y).unwrap();
            let r: Vec<f64> = w.iter().zip(&y).map(|(a, b)| b - f.alpha - f.beta * a).collect();
            let s0: f64 = r.iter().sum();
            let s1: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
            let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>() * 10.0;
            assert!(s0.abs() < 1e-8 * scale && s1.abs() < 1e-8 * scale);
            betas.push(f.beta);
        }
        let mean = betas.iter().sum::<f64>() / 20.0;
        assert!(mean < 1.0 && (mean - 0.41).abs() < 0.08, "{mean}");
    }

    #[test]
    fn logistic_null_and_monotone() {
        let mut rng = rng_from_seed(9);
        let n = 4000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let c = logistic_mle(&Dataset::from_column(&x), &y, 50, 1e-8).unwrap();
        // SE of each coefficient is about 2/sqrt(n)
        let se = 2.0 / (n as f64).sqrt();
        assert!(c[0].abs() < 4.0 * se && c[1].abs() < 4.0 * se, "{c:?}");

        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                let flip = rng.random::<f64>() < 0.01;
                if (*v > 0.0) != flip {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let c = logistic_mle(&Dataset::from_column(&x), &y, 100, 1e-8).unwrap();
        assert!(c[1] > 5.0, "{c:?}");
    }

    #[test]
    fn logistic_single_class_is_separation() {
        let x = Dataset::from_column(&[0.0, 1.0, 2.0]);
        assert!(matches!(logistic_mle(&x, &[1.0; 3], 10, 1e-8), Err(Error::Separation(_))));
        let err = logistic_mle(&x, &[0.0, 1.0, 1.0], 50, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Separation(_)));
        assert!(err.to_string().starts_with("separation/degenerate"));
    }
}
