use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Needs at least `dim + 1` samples so the covariance can reach full rank.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianStats, MetricsError> {
    let dim = samples.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(MetricsError::TooFew { needed: 2, got: samples.len() });
    }
    if samples.len() < dim + 1 {
        return Err(MetricsError::TooFew {
            needed: dim + 1,
            got: samples.len(),
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(MetricsError::Dimension { left: dim, right: bad.len() });
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let e = DVector::from_column_slice(s) - &mean;
        cov += &e * e.transpose();
    }
    cov /= n - 1.0;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean,
        cov,
        count: samples.len(),
    })
}

fn clamped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = clamped_eigen(m);
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    &e.eigenvectors * root * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn fgd(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let cross: f64 = clamped_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss1(mu: f64, sigma: f64) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_element(1, mu),
            cov: DMatrix::from_element(1, 1, sigma * sigma),
            count: 2,
        }
    }

    fn random_stats(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> GaussianStats {
        let mix: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..dim).map(|i| (0..dim).map(|j| mix[i * dim + j] * z[j]).sum::<f64>() + 0.3).collect()
            })
            .collect();
        fit_gaussian(&samples).unwrap()
    }

    #[test]
    fn unbiased_two_point_fit() {
        let g = fit_gaussian(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(g.mean[0], 0.0);
        assert_eq!(g.cov[(0, 0)], 2.0);
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let s = vec![vec![0.5, -2.0, 1.0]; 10];
        let g = fit_gaussian(&s).unwrap();
        assert!(g.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_samples_rejected() {
        let s = vec![vec![0.0; 32]; 32];
        assert!(matches!(fit_gaussian(&s), Err(MetricsError::TooFew { needed: 33, got: 32 })));
        assert!(fit_gaussian(&[]).is_err());
    }

    #[test]
    fn unit_truths() {
        assert!((fgd(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_stats(&mut rng, 32, 200);
        let b = random_stats(&mut rng, 32, 200);
        assert!(fgd(&a, &a).unwrap() <= 1e-8);
        assert!(a.cov.relative_eq(&a.cov.transpose(), 1e-12, 1e-12));
        let (ab, ba) = (fgd(&a, &b).unwrap(), fgd(&b, &a).unwrap());
        assert!((ab - ba).abs() <= 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
        let short = gauss1(0.0, 1.0);
        assert!(matches!(fgd(&a, &short), Err(MetricsError::Dimension { .. })));
    }

    #[test]
    fn rank_deficient_covariances_stay_finite() {
        let s: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let a = fit_gaussian(&s).unwrap();
        let v = fgd(&a, &a).unwrap();
        assert!(v.is_finite() && v <= 1e-6);
    }

    proptest! {
        #[test]
        fn one_dimensional_closed_form(ma in -3.0..3.0f64, mb in -3.0..3.0f64, sa in 0.0..3.0f64, sb in 0.0..3.0f64) {
            let expect = (ma - mb).powi(2) + (sa - sb).powi(2);
            let got = fgd(&gauss1(ma, sa), &gauss1(mb, sb)).unwrap();
            prop_assert!((got - expect).abs() < 1e-9, "{} vs {}", got, expect);
            prop_assert!(got >= 0.0);
        }
    }
}
