//! Gaussian kernels, bandwidth selection and the noise-convolved kernel.
//!
//! All kernels are unnormalized (peak value 1), so the uniform bound used by
//! the concentration results is exactly `K = 1`. Multi-dimensional kernels are
//! products of per-coordinate Gaussians; a [`KernelMixture`] averages several
//! such products with equal weights.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Above this many points the median heuristic runs on a seeded subsample.
pub const MEDIAN_SUBSAMPLE: usize = 5000;

/// Scale factors applied to the median distance by [`multiscale_bandwidths`].
pub const MULTISCALE_FACTORS: [f64; 3] = [0.5, 1.0, 1.5];

fn check_bandwidth(l: f64) -> Result<()> {
    if l.is_finite() && l > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidBandwidth(l))
    }
}

/// Product Gaussian kernel `∏_j exp(-(x_j - y_j)² / (2 ℓ_j²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidths: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if bandwidths.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: bandwidths.len(),
        });
    }
    let mut s = 0.0;
    for ((a, b), &l) in x.iter().zip(y).zip(bandwidths) {
        check_bandwidth(l)?;
        let d = a - b;
        s += d * d / (2.0 * l * l);
    }
    Ok((-s).exp())
}

/// Equal-weight mixture of product Gaussian kernels.
///
/// Component `c` uses bandwidth `bandwidths_per_dim[j][c]` on coordinate `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct KernelMixture {
    bandwidths_per_dim: Vec<Vec<f64>>,
    weights: Vec<f64>,
    // component-major: coef[c * dim + j] = 1 / (2 ℓ_{j,c}²)
    coef: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    bandwidths_per_dim: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MixtureRepr> for KernelMixture {
    type Error = Error;
    fn try_from(r: MixtureRepr) -> Result<Self> {
        Self::new(r.bandwidths_per_dim, r.weights)
    }
}

impl From<KernelMixture> for MixtureRepr {
    fn from(k: KernelMixture) -> Self {
        MixtureRepr {
            bandwidths_per_dim: k.bandwidths_per_dim,
            weights: k.weights,
        }
    }
}

impl KernelMixture {
    pub fn new(bandwidths_per_dim: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths_per_dim.is_empty() {
            return Err(Error::InvalidArgument {
                name: "bandwidths_per_dim",
                reason: "need at least one coordinate".into(),
            });
        }
        let n_comp = weights.len();
        if n_comp == 0 {
            return Err(Error::InvalidArgument {
                name: "weights",
                reason: "need at least one component".into(),
            });
        }
        for bws in &bandwidths_per_dim {
            if bws.len() != n_comp {
                return Err(Error::DimensionMismatch {
                    expected: n_comp,
                    got: bws.len(),
                });
            }
            for &l in bws {
                check_bandwidth(l)?;
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument {
                name: "weights",
                reason: "must be nonnegative".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument {
                name: "weights",
                reason: format!("must sum to 1, got {total}"),
            });
        }
        let dim = bandwidths_per_dim.len();
        let mut coef = vec![0.0; n_comp * dim];
        for (j, bws) in bandwidths_per_dim.iter().enumerate() {
            for (c, &l) in bws.iter().enumerate() {
                coef[c * dim + j] = 1.0 / (2.0 * l * l);
            }
        }
        Ok(Self {
            bandwidths_per_dim,
            weights,
            coef,
        })
    }

    /// Equal weights over the components.
    pub fn uniform(bandwidths_per_dim: Vec<Vec<f64>>) -> Result<Self> {
        let n = bandwidths_per_dim.first().map_or(0, Vec::len);
        let w = if n == 0 { vec![] } else { vec![1.0 / n as f64; n] };
        Self::new(bandwidths_per_dim, w)
    }

    /// A single product kernel with the given per-coordinate bandwidths.
    pub fn single(bandwidths: &[f64]) -> Result<Self> {
        Self::new(bandwidths.iter().map(|&l| vec![l]).collect(), vec![1.0])
    }

    /// Multi-scale median heuristic applied to each coordinate of `data`.
    ///
    /// A coordinate whose median distance is zero but which is not constant
    /// (an imbalanced binary response, say) uses the median gap between its
    /// distinct values instead.
    pub fn median_multiscale(data: &Dataset, seed: u64) -> Result<Self> {
        let mut per_dim = Vec::with_capacity(data.dim());
        for j in 0..data.dim() {
            let col = Dataset::from_column(&data.column(j));
            let med = match median_heuristic_seeded(&col, seed) {
                Err(Error::DegenerateData) => nonzero_median_distance(&col)?,
                other => other?,
            };
            per_dim.push(multiscale_bandwidths(med)?.to_vec());
        }
        Self::uniform(per_dim)
    }

    pub fn dim(&self) -> usize {
        self.bandwidths_per_dim.len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn bandwidths_per_dim(&self) -> &[Vec<f64>] {
        &self.bandwidths_per_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Supremum of the kernel; 1 for unnormalized Gaussians.
    pub fn bound_k(&self) -> f64 {
        1.0
    }

    pub fn max_bandwidth(&self, j: usize) -> f64 {
        self.bandwidths_per_dim[j].iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_bandwidth(&self, j: usize) -> f64 {
        self.bandwidths_per_dim[j]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Kernel value without dimension checks. Callers guarantee `x.len() == y.len() == dim`.
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dim = x.len();
        if dim == 1 {
            let d2 = (x[0] - y[0]) * (x[0] - y[0]);
            return self
                .weights
                .iter()
                .zip(&self.coef)
                .map(|(w, c)| w * (-d2 * c).exp())
                .sum();
        }
        let mut out = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            let coef = &self.coef[c * dim..(c + 1) * dim];
            let mut s = 0.0;
            for j in 0..dim {
                let d = x[j] - y[j];
                s += d * d * coef[j];
            }
            out += w * (-s).exp();
        }
        out
    }

    /// Kernel value as a function of the coordinate offsets `x - y`.
    #[inline]
    pub fn eval_offset(&self, offset: &[f64]) -> f64 {
        let dim = offset.len();
        let mut out = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            let coef = &self.coef[c * dim..(c + 1) * dim];
            let s: f64 = offset.iter().zip(coef).map(|(d, k)| d * d * k).sum();
            out += w * (-s).exp();
        }
        out
    }

    /// Same mixture with every bandwidth multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        check_bandwidth(factor)?;
        Self::new(
            self.bandwidths_per_dim
                .iter()
                .map(|b| b.iter().map(|l| l * factor).collect())
                .collect(),
            self.weights.clone(),
        )
    }
}

/// Checked evaluation of the mixture kernel.
pub fn mixture_kernel(x: &[f64], y: &[f64], mixture: &KernelMixture) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() != mixture.dim() {
        return Err(Error::DimensionMismatch {
            expected: mixture.dim(),
            got: x.len(),
        });
    }
    Ok(mixture.eval(x, y))
}

/// Median of all pairwise Euclidean distances (subsampling above
/// [`MEDIAN_SUBSAMPLE`] points with seed 0).
pub fn median_heuristic(data: &Dataset) -> Result<f64> {
    median_heuristic_seeded(data, 0)
}

pub fn median_heuristic_seeded(data: &Dataset, seed: u64) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let sub;
    let data = if n > MEDIAN_SUBSAMPLE {
        let mut rng = rng_from_seed(seed);
        let mut idx = index::sample(&mut rng, n, MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        sub = data.take(&idx);
        &sub
    } else {
        data
    };
    let n = data.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let xi = data.row(i);
        for j in (i + 1)..n {
            let d2: f64 = xi
                .iter()
                .zip(data.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if med <= 0.0 || !med.is_finite() {
        return Err(Error::DegenerateData);
    }
    Ok(med)
}

fn nonzero_median_distance(col: &Dataset) -> Result<f64> {
    let mut v = col.column(0);
    v.sort_unstable_by(f64::total_cmp);
    v.dedup();
    if v.len() < 2 {
        return Err(Error::DegenerateData);
    }
    let mut d = Vec::with_capacity(v.len() * (v.len() - 1) / 2);
    for i in 0..v.len() {
        for k in (i + 1)..v.len() {
            d.push(v[k] - v[i]);
        }
    }
    Ok(median_in_place(&mut d))
}

/// Median with the even-count convention (mean of the two central order statistics).
pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let m = v.len();
    assert!(m > 0);
    let mid = m / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// `{0.5, 1, 1.5} × σ_med`, ascending.
pub fn multiscale_bandwidths(sigma_med: f64) -> Result<[f64; 3]> {
    check_bandwidth(sigma_med)?;
    Ok(MULTISCALE_FACTORS.map(|f| f * sigma_med))
}

/// Bandwidth of the kernel obtained by averaging a Gaussian kernel of
/// bandwidth `l` over independent `N(0, τ²)` perturbations of both arguments:
/// `sqrt(l² + 2τ²)`.
pub fn convolved_gaussian_bandwidth(l: f64, tau: f64) -> Result<f64> {
    check_bandwidth(l)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "tau",
            reason: format!("must be nonnegative, got {tau}"),
        });
    }
    Ok((l * l + 2.0 * tau * tau).sqrt())
}

/// Peak value of the convolved kernel, `l / sqrt(l² + 2τ²)`.
///
/// The noise-averaged kernel is this constant times the unnormalized Gaussian
/// with bandwidth [`convolved_gaussian_bandwidth`].
pub fn convolved_gaussian_amplitude(l: f64, tau: f64) -> Result<f64> {
    Ok(l / convolved_gaussian_bandwidth(l, tau)?)
}

/// Lipschitz constant of `z ↦ exp(-z²/(2ℓ²))`, attained at `|z| = ℓ`.
pub fn lipschitz_constant_gaussian(l: f64) -> Result<f64> {
    check_bandwidth(l)?;
    Ok((-0.5f64).exp() / l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn multiscale_handles_imbalanced_binary_coordinate() {
        let mut rows = vec![[0.5, 0.0]; 90];
        for (i, r) in rows.iter_mut().enumerate() {
            r[0] = i as f64 * 0.1;
        }
        rows.extend(vec![[1.0, 1.0]; 10]);
        let data = Dataset::from_rows(&rows).unwrap();
        let k = KernelMixture::median_multiscale(&data, 0).unwrap();
        assert_eq!(k.bandwidths_per_dim()[1], vec![0.5, 1.0, 1.5]);
        let constant = Dataset::from_column(&[2.0; 5]);
        assert_eq!(
            KernelMixture::median_multiscale(&constant, 0).unwrap_err(),
            Error::DegenerateData
        );
    }

    #[test]
    fn gaussian_kernel_examples() {
        assert_eq!(gaussian_kernel(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_relative_eq!(
            gaussian_kernel(&[0.0], &[1.0], &[1.0]).unwrap(),
            0.606_530_659_712_633_4,
            epsilon = 1e-15
        );
        // exp(-0.5) * exp(-0.125)
        assert_relative_eq!(
            gaussian_kernel(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]).unwrap(),
            0.535_261_428_518_990_1,
            epsilon = 1e-15
        );
    }

    #[test]
    fn gaussian_kernel_errors() {
        assert!(matches!(
            gaussian_kernel(&[0.0], &[1.0, 2.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            gaussian_kernel(&[0.0], &[1.0], &[0.0]),
            Err(Error::InvalidBandwidth(_))
        ));
        assert!(matches!(
            gaussian_kernel(&[0.0], &[1.0], &[-1.0]),
            Err(Error::InvalidBandwidth(_))
        ));
    }

    #[test]
    fn mixture_kernel_examples() {
        let one = KernelMixture::single(&[1.0]).unwrap();
        assert_eq!(mixture_kernel(&[2.0], &[2.0], &one).unwrap(), 1.0);
        assert_relative_eq!(
            mixture_kernel(&[0.0], &[1.0], &one).unwrap(),
            0.606_530_659_712_633_4,
            epsilon = 1e-15
        );
        let two = KernelMixture::uniform(vec![vec![1.0, 2.0]]).unwrap();
        assert_relative_eq!(
            mixture_kernel(&[0.0], &[1.0], &two).unwrap(),
            0.744_513_781_148_614_4,
            epsilon = 1e-15
        );
        assert!(mixture_kernel(&[0.0, 1.0], &[1.0, 0.0], &two).is_err());
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        assert!(KernelMixture::new(vec![vec![1.0, 2.0]], vec![0.5, 0.6]).is_err());
        assert!(KernelMixture::new(vec![vec![1.0, 2.0]], vec![1.5, -0.5]).is_err());
        assert!(KernelMixture::new(vec![vec![1.0]], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn median_heuristic_examples() {
        assert_eq!(median_heuristic(&Dataset::from_column(&[0.0, 3.0])).unwrap(), 3.0);
        assert_eq!(
            median_heuristic(&Dataset::from_column(&[0.0, 1.0, 2.0])).unwrap(),
            1.0
        );
        assert_eq!(
            median_heuristic(&Dataset::from_column(&[0.0, 0.0, 0.0])),
            Err(Error::DegenerateData)
        );
        assert!(matches!(
            median_heuristic(&Dataset::from_column(&[1.0])),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn median_even_count_averages_central_pair() {
        // distances {1, 2, 3, 1, 2, 1} -> sorted 1 1 1 2 2 3 -> (1 + 2) / 2
        let d = Dataset::from_column(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(median_heuristic(&d).unwrap(), 1.5);
    }

    #[test]
    fn median_uses_euclidean_distance() {
        let d = Dataset::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(median_heuristic(&d).unwrap(), 5.0);
    }

    #[test]
    fn median_subsamples_large_inputs_deterministically() {
        let mut rng = rng_from_seed(3);
        let xs: Vec<f64> = (0..6000).map(|_| rng.sample(StandardNormal)).collect();
        let d = Dataset::from_column(&xs);
        let a = median_heuristic_seeded(&d, 9).unwrap();
        assert_eq!(a, median_heuristic_seeded(&d, 9).unwrap());
        // median |X - X'| for standard normals is 0.6745 * sqrt(2)
        assert!((a - 0.9539).abs() < 0.03, "{a}");
    }

    #[test]
    fn multiscale_examples() {
        assert_eq!(multiscale_bandwidths(2.0).unwrap(), [1.0, 2.0, 3.0]);
        assert_eq!(multiscale_bandwidths(1.0).unwrap(), [0.5, 1.0, 1.5]);
        let b = multiscale_bandwidths(0.4).unwrap();
        for (got, want) in b.iter().zip([0.2, 0.4, 0.6]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
        assert!(multiscale_bandwidths(0.0).is_err());
        assert!(multiscale_bandwidths(-1.0).is_err());
    }

    #[test]
    fn convolved_bandwidth_examples() {
        assert_eq!(convolved_gaussian_bandwidth(1.0, 0.0).unwrap(), 1.0);
        assert_relative_eq!(
            convolved_gaussian_bandwidth(1.0, 1.0).unwrap(),
            3f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            convolved_gaussian_bandwidth(2.0, 1.0).unwrap(),
            6f64.sqrt(),
            epsilon = 1e-15
        );
        assert!(convolved_gaussian_bandwidth(0.0, 1.0).is_err());
        assert!(convolved_gaussian_bandwidth(1.0, -1.0).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        // oracle: maximize |z|/ℓ² exp(-z²/2ℓ²) on a fine grid
        let oracle = |l: f64| {
            (0..200_000)
                .map(|i| {
                    let z = i as f64 * 1e-4 * l;
                    z / (l * l) * (-(z * z) / (2.0 * l * l)).exp()
                })
                .fold(0.0, f64::max)
        };
        for l in [1.0, 2.0] {
            let got = lipschitz_constant_gaussian(l).unwrap();
            assert_relative_eq!(got, oracle(l), max_relative = 1e-8);
        }
        assert_relative_eq!(lipschitz_constant_gaussian(1.0).unwrap(), 0.60653, epsilon = 1e-5);
        assert_relative_eq!(lipschitz_constant_gaussian(2.0).unwrap(), 0.30327, epsilon = 1e-5);
        let mut prev = f64::INFINITY;
        for l in [1.0, 10.0, 100.0, 1e4] {
            let v = lipschitz_constant_gaussian(l).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-4);
        assert!(lipschitz_constant_gaussian(0.0).is_err());
    }

    #[test]
    fn mixture_kernel_is_symmetric_on_fuzzed_pairs() {
        let mut rng = rng_from_seed(11);
        let k = KernelMixture::uniform(vec![vec![0.5, 1.0, 1.5], vec![0.2, 0.4, 0.6]]).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..2).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<f64> = (0..2).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let a = mixture_kernel(&x, &y, &k).unwrap();
            assert_eq!(a, mixture_kernel(&y, &x, &k).unwrap());
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn gram_matrices_are_psd() {
        let mut rng = rng_from_seed(5);
        let k = KernelMixture::uniform(vec![vec![0.5, 1.0, 1.5]]).unwrap();
        for _ in 0..10 {
            let n = rng.random_range(2..=8);
            let pts: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let g = DMatrix::from_fn(n, n, |i, j| k.eval(&[pts[i]], &[pts[j]]));
            let eig = SymmetricEigen::new(g).eigenvalues;
            assert!(eig.iter().all(|&e| e >= -1e-9), "{eig}");
        }
    }

    #[test]
    fn convolved_kernel_matches_noise_average() {
        // E k_ℓ(x+u, x'+u') over u, u' ~ N(0, τ²) equals the amplitude times the
        // Gaussian kernel with the convolved bandwidth.
        let (l, tau) = (1.0, 1.0);
        let mut rng = rng_from_seed(21);
        let n = 2000;
        let mut noisy = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        let lt = convolved_gaussian_bandwidth(l, tau).unwrap();
        let amp = convolved_gaussian_amplitude(l, tau).unwrap();
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let xp: f64 = rng.sample(StandardNormal);
            let u: f64 = tau * rng.sample::<f64, _>(StandardNormal);
            let up: f64 = tau * rng.sample::<f64, _>(StandardNormal);
            noisy.push(gaussian_kernel(&[x + u], &[xp + up], &[l]).unwrap());
            clean.push(amp * gaussian_kernel(&[x], &[xp], &[lt]).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = ((var(&noisy) + var(&clean)) / n as f64).sqrt();
        let diff = (mean(&noisy) - mean(&clean)).abs();
        assert!(diff < 3.0 * se, "diff {diff} se {se}");
    }

    proptest! {
        #[test]
        fn median_heuristic_is_scale_equivariant(
            xs in proptest::collection::vec(-100.0f64..100.0, 2..40),
            c in 0.01f64..100.0,
        ) {
            let d = Dataset::from_column(&xs);
            if let Ok(m) = median_heuristic(&d) {
                let mc = median_heuristic(&d.scaled(c)).unwrap();
                prop_assert!(((mc - c * m) / (c * m)).abs() < 1e-12);
            }
        }

        #[test]
        fn mixture_kernel_bounded_and_one_only_on_diagonal(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
        ) {
            let k = KernelMixture::uniform(vec![vec![0.5, 1.0, 1.5]]).unwrap();
            let v = k.eval(&[x], &[y]);
            prop_assert!(v > 0.0 && v <= 1.0);
            if x == y {
                prop_assert_eq!(v, 1.0);
            } else if (x - y).abs() > 1e-6 {
                prop_assert!(v < 1.0);
            }
        }
    }
}
