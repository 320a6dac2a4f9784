//! Fréchet distance between Gaussian fits of feature sets.
//!
//! d^2 = ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), with the
//! matrix square root via symmetric eigendecomposition and eigenvalue
//! clamping (symmetric projection).

use nalgebra::DMatrix;

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Closed-form Fréchet distance between two Gaussians.
pub fn frechet_gaussian(
    mu1: &[f64],
    cov1: &DMatrix<f64>,
    mu2: &[f64],
    cov2: &DMatrix<f64>,
) -> f64 {
    assert_eq!(mu1.len(), mu2.len());
    let mean_term: f64 = mu1
        .iter()
        .zip(mu2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1_half = sym_sqrt(cov1);
    let inner = &s1_half * cov2 * &s1_half;
    let cross = sym_sqrt(&inner);
    let trace_term = cov1.trace() + cov2.trace() - 2.0 * cross.trace();
    (mean_term + trace_term).max(0.0)
}

#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mu: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// True when the covariance needed diagonal regularization.
    pub regularized: bool,
}

pub const COV_EPS: f64 = 1e-6;

/// Fit a Gaussian to feature rows; near-singular covariances get eps on the
/// diagonal and are flagged.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> GaussianFit {
    assert!(samples.len() >= 2, "need at least 2 samples per set");
    let n = samples.len();
    let d = samples[0].len();
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (s[i] - mu[i]) * (s[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let regularized = min_eig < COV_EPS;
    if regularized {
        for i in 0..d {
            cov[(i, i)] += COV_EPS;
        }
    }
    GaussianFit { mu, cov, regularized }
}

/// Fréchet distance between the Gaussian fits of two feature sets; the flag
/// reports whether either covariance was regularized.
pub fn frechet_feature_distance(real: &[Vec<f64>], generated: &[Vec<f64>]) -> (f64, bool) {
    let a = fit_gaussian(real);
    let b = fit_gaussian(generated);
    (
        frechet_gaussian(&a.mu, &a.cov, &b.mu, &b.cov),
        a.regularized || b.regularized,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, randn};

    #[test]
    fn identical_sets_give_zero() {
        let mut rng = derive_rng(0, "frechet");
        let set: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| randn(&mut rng)).collect())
            .collect();
        let (d, _) = frechet_feature_distance(&set, &set);
        assert!(d < 1e-6, "self distance {d}");
    }

    #[test]
    fn unit_gaussians_offset_by_m_give_norm_squared() {
        // closed-form check on exact Gaussian parameters
        let d = 5;
        let eye = DMatrix::identity(d, d);
        let mu1 = vec![0.0; d];
        let m = [0.5, -1.0, 2.0, 0.0, 0.25];
        let dist = frechet_gaussian(&mu1, &eye, &m, &eye);
        let expect: f64 = m.iter().map(|v| v * v).sum();
        assert!((dist - expect).abs() < 1e-4, "{dist} vs {expect}");
    }

    #[test]
    fn diagonal_covariances_match_analytic_trace_term() {
        let d = 4;
        let s1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0]));
        let s2 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 1.5, 0.25]));
        let dist = frechet_gaussian(&vec![0.0; d], &s1, &vec![0.0; d], &s2);
        let expect: f64 = [(1.0, 2.0), (2.0, 1.0), (0.5, 1.5), (3.0, 0.25)]
            .iter()
            .map(|(a, b): &(f64, f64)| a + b - 2.0 * (a * b).sqrt())
            .sum();
        assert!((dist - expect).abs() < 1e-8, "{dist} vs {expect}");
    }

    #[test]
    fn symmetry_and_nonnegativity() {
        let mut rng = derive_rng(1, "frechet-sym");
        let a: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..5).map(|_| randn(&mut rng)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..5).map(|_| 0.5 * randn(&mut rng) + 1.0).collect())
            .collect();
        let (dab, _) = frechet_feature_distance(&a, &b);
        let (dba, _) = frechet_feature_distance(&b, &a);
        assert!((dab - dba).abs() < 1e-8, "symmetry {dab} vs {dba}");
        assert!(dab >= 0.0);
    }

    #[test]
    fn stronger_corruption_scores_farther() {
        let mut rng = derive_rng(2, "frechet-mono");
        let real: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..6).map(|_| randn(&mut rng)).collect())
            .collect();
        let corrupt = |set: &[Vec<f64>], sigma: f64, rng: &mut rand_chacha::ChaCha12Rng| {
            set.iter()
                .map(|s| s.iter().map(|v| v + sigma * randn(rng)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let mild = corrupt(&real, 0.3, &mut rng);
        let strong = corrupt(&real, 2.5, &mut rng);
        let (d_mild, _) = frechet_feature_distance(&real, &mild);
        let (d_strong, _) = frechet_feature_distance(&real, &strong);
        assert!(
            d_strong > d_mild,
            "monotone corruption violated: {d_strong} <= {d_mild}"
        );
    }

    #[test]
    fn singular_covariance_is_regularized_and_flagged() {
        // constant feature -> zero covariance
        let set: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0, 2.0, 3.0]).collect();
        let fit = fit_gaussian(&set);
        assert!(fit.regularized);
        let (d, flagged) = frechet_feature_distance(&set, &set);
        assert!(flagged);
        assert!(d < 1e-6);
    }
}
