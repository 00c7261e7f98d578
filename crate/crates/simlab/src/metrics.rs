//! Evaluation metrics.

use convmmd::models::Mixture;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Mixture parameter block compared by [`mae_sorted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Weights,
    Means,
    Sds,
}

/// Mean absolute error over components after sorting both mixtures by
/// ascending weight.
pub fn mae_sorted(est: &Mixture, truth: &Mixture, block: Block) -> Result<f64> {
    if est.components() != truth.components() {
        return Err(SimError::Inconsistent(format!(
            "component count mismatch: estimate has {}, truth has {}",
            est.components(),
            truth.components()
        )));
    }
    let (e, t) = (est.sorted_by_weight(), truth.sorted_by_weight());
    let pick = |m: &Mixture| match block {
        Block::Weights => m.weights.clone(),
        Block::Means => m.means.clone(),
        Block::Sds => m.sds.clone(),
    };
    let (a, b) = (pick(&e), pick(&t));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Equispaced evaluation points `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl DensityGrid {
    pub const DEFAULT_POINTS: usize = 1000;

    /// Span of the truth's means widened by five times its largest sd.
    pub fn for_truth(truth: &Mixture) -> Self {
        let lo = truth.means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sd = truth.sds.iter().cloned().fold(0.0, f64::max);
        Self {
            lo: lo - 5.0 * sd,
            hi: hi + 5.0 * sd,
            points: Self::DEFAULT_POINTS,
        }
    }

    pub fn points(&self) -> Vec<f64> {
        match self.points {
            0 => vec![],
            1 => vec![0.5 * (self.lo + self.hi)],
            n => {
                let step = (self.hi - self.lo) / (n - 1) as f64;
                (0..n).map(|i| self.lo + step * i as f64).collect()
            }
        }
    }
}

/// Mean of `|f_est − f_truth|` over the grid points.
pub fn density_mae(est: &Mixture, truth: &Mixture, grid: &DensityGrid) -> Result<f64> {
    let pts = grid.points();
    if pts.is_empty() {
        return Err(SimError::config("density grid needs at least one point"));
    }
    Ok(pts
        .iter()
        .map(|&x| (est.density(x) - truth.density(x)).abs())
        .sum::<f64>()
        / pts.len() as f64)
}

/// Mean squared difference between predicted probabilities and 0/1 outcomes.
pub fn brier(probs: &[f64], y: &[f64]) -> Result<f64> {
    if probs.len() != y.len() {
        return Err(SimError::Inconsistent(format!(
            "{} probabilities for {} outcomes",
            probs.len(),
            y.len()
        )));
    }
    if probs.is_empty() {
        return Err(convmmd::Error::EmptyDataset.into());
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SimError::Inconsistent(format!("probability {p} outside [0, 1]")));
    }
    Ok(probs.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / probs.len() as f64)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n − 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Moment skewness `m3 / m2^{3/2}`.
pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Correlation between the sorted sample and standard normal quantiles at
/// plotting positions `(i − 3/8) / (n + 1/4)`.
pub fn normal_qq_correlation(xs: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std = Normal::standard();
    let mut s = xs.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let n = s.len() as f64;
    let q: Vec<f64> = (1..=s.len())
        .map(|i| std.inverse_cdf((i as f64 - 0.375) / (n + 0.25)))
        .collect();
    correlation(&s, &q)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn truth() -> Mixture {
        Mixture::new(vec![0.23, 0.33, 0.44], vec![-3.72, 0.11, 4.52], vec![1.0; 3]).unwrap()
    }

    #[test]
    fn mae_examples() {
        let t = truth();
        for b in [Block::Weights, Block::Means, Block::Sds] {
            assert_eq!(mae_sorted(&t, &t, b).unwrap(), 0.0);
        }
        let e = Mixture::new(vec![0.23, 0.33, 0.44], vec![-3.5, 0.0, 4.5], vec![1.0; 3]).unwrap();
        assert_relative_eq!(mae_sorted(&e, &t, Block::Means).unwrap(), 0.35 / 3.0, epsilon = 1e-12);
        let permuted =
            Mixture::new(vec![0.44, 0.23, 0.33], vec![4.5, -3.5, 0.0], vec![1.0; 3]).unwrap();
        assert_eq!(
            mae_sorted(&permuted, &t, Block::Means).unwrap(),
            mae_sorted(&e, &t, Block::Means).unwrap()
        );
        let two = Mixture::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0; 2]).unwrap();
        assert!(mae_sorted(&two, &t, Block::Means).is_err());
    }

    #[test]
    fn density_mae_examples() {
        let a = Mixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
        let g = DensityGrid::for_truth(&a);
        assert_eq!((g.lo, g.hi, g.points), (-5.0, 5.0, 1000));
        assert_eq!(density_mae(&a, &a, &g).unwrap(), 0.0);
        let near = Mixture::new(vec![1.0], vec![1e-3], vec![1.0]).unwrap();
        assert!(density_mae(&near, &a, &g).unwrap() < 1e-3);
        let b = Mixture::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let brute: f64 = (0..1000)
            .map(|i| {
                let x = -5.0 + 10.0 * i as f64 / 999.0;
                (phi(x) - phi(x - 1.0)).abs()
            })
            .sum::<f64>()
            / 1000.0;
        assert_relative_eq!(density_mae(&b, &a, &g).unwrap(), brute, epsilon = 1e-12);
        assert!(brute > 0.0);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 3], &[1.0, 0.0, 1.0]).unwrap(), 0.25);
        assert_relative_eq!(brier(&[0.8, 0.3], &[1.0, 0.0]).unwrap(), 0.065, epsilon = 1e-15);
        assert!(brier(&[1.2], &[1.0]).is_err());
        assert!(brier(&[-0.1], &[0.0]).is_err());
        assert!(brier(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normality_helpers() {
        let xs: Vec<f64> = (1..=200)
            .map(|i| {
                use statrs::distribution::{ContinuousCDF, Normal};
                Normal::standard().inverse_cdf(i as f64 / 201.0)
            })
            .collect();
        assert!(skewness(&xs).abs() < 1e-10);
        assert!(normal_qq_correlation(&xs) > 0.999);
        let skewed: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert!(skewness(&skewed) > 1.0);
        assert_relative_eq!(slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 2.0);
        assert_relative_eq!(sample_variance(&[1.0, 2.0, 3.0]), 1.0);
    }

    proptest! {
        #[test]
        fn mae_is_label_invariant(shift in -1.0f64..1.0, perm in 0usize..6) {
            let t = truth();
            let e = Mixture::new(t.weights.clone(), t.means.iter().map(|m| m + shift).collect(), t.sds.clone()).unwrap();
            let order = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]][perm];
            let p = Mixture::new(
                order.iter().map(|&i| e.weights[i]).collect(),
                order.iter().map(|&i| e.means[i]).collect(),
                order.iter().map(|&i| e.sds[i]).collect(),
            ).unwrap();
            let a = mae_sorted(&e, &t, Block::Means).unwrap();
            let b = mae_sorted(&p, &t, Block::Means).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((a - shift.abs()).abs() < 1e-12);
        }

        #[test]
        fn brier_is_bounded(ps in proptest::collection::vec(0.0f64..=1.0, 1..50), seed in 0u64..1000) {
            let y: Vec<f64> = ps.iter().enumerate().map(|(i, _)| ((seed >> (i % 10)) & 1) as f64).collect();
            let b = brier(&ps, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
