//! Gaussian-mixture datasets with controllable overlap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::rng;

/// Mean separation used when zero overlap is requested (Bayes error ~1e-9).
const FAR_SEPARATION: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    /// `variance * I` for every class.
    Isotropic(f64),
    /// One full `d × d` matrix per class, row-major.
    PerClass(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub class_means: Vec<Vec<f64>>,
    pub covariance: Covariance,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two balanced unit-variance classes whose optimal (Bayes) error rate is
    /// `overlap`, so `0.0` gives far-separated blobs and `0.5` identical ones.
    ///
    /// The means sit at `±Δ/2` along the first axis with `Φ(-Δ/2) = overlap`;
    /// the remaining `dim - 1` axes carry pure noise.
    pub fn two_class(n: usize, dim: usize, overlap: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&overlap) {
            return Err(Error::validation(format!(
                "overlap must lie in [0, 0.5], got {overlap}"
            )));
        }
        if dim == 0 {
            return Err(Error::validation("dim must be positive"));
        }
        let separation = separation_for_bayes_error(overlap);
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        lo[0] = -separation / 2.0;
        hi[0] = separation / 2.0;
        Ok(Self {
            n,
            class_means: vec![lo, hi],
            covariance: Covariance::Isotropic(1.0),
            seed,
        })
    }
}

/// Distance between two unit-variance Gaussian means giving `bayes_error`.
pub(crate) fn separation_for_bayes_error(bayes_error: f64) -> f64 {
    if bayes_error <= 0.0 {
        return FAR_SEPARATION;
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.inverse_cdf(1.0 - bayes_error)).min(FAR_SEPARATION)
}

fn factor(matrix: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) {
        return Err(Error::validation(format!("covariance must be {dim}x{dim}")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("covariance has non-finite entries"));
    }
    let scale = m.amax().max(1.0);
    for i in 0..dim {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::validation("covariance is not symmetric"));
            }
        }
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::validation(
            "covariance is not positive semi-definite",
        ));
    }
    let roots = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Draws `spec.n` samples with balanced classes (`i % k`) in shuffled order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let k = spec.class_means.len();
    if spec.n < 2 {
        return Err(Error::validation("need at least two samples"));
    }
    if k < 2 {
        return Err(Error::validation("need at least two class means"));
    }
    let dim = spec.class_means[0].len();
    if dim == 0 || spec.class_means.iter().any(|m| m.len() != dim) {
        return Err(Error::dimension(
            "class means must share a positive dimension",
        ));
    }
    if spec.class_means.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("class means must be finite"));
    }
    let factors: Vec<DMatrix<f64>> = match &spec.covariance {
        Covariance::Isotropic(var) => {
            if !(var.is_finite() && *var >= 0.0) {
                return Err(Error::validation(
                    "variance must be finite and non-negative",
                ));
            }
            vec![DMatrix::identity(dim, dim) * var.sqrt(); k]
        }
        Covariance::PerClass(mats) => {
            if mats.len() != k {
                return Err(Error::validation(format!(
                    "{k} classes but {} covariance matrices",
                    mats.len()
                )));
            }
            mats.iter().map(|m| factor(m, dim)).collect::<Result<_>>()?
        }
    };

    let mut rng = rng::stream(spec.seed, &[0x5e7]);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(spec.n * dim);
    for &label in &labels {
        let z = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
        let x = &factors[label] * z;
        features.extend(
            x.iter()
                .zip(&spec.class_means[label])
                .map(|(dx, mu)| mu + dx),
        );
    }
    let ids = (0..spec.n as u64).map(SampleId).collect();
    Dataset::new("synthetic", dim, k, ids, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_balanced() {
        let spec = SyntheticSpec::two_class(101, 3, 0.1, 42).unwrap();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![51, 50]);
        assert_eq!(a.input_dim(), 3);
    }

    #[test]
    fn separation_matches_bayes_error() {
        let std = Normal::new(0.0, 1.0).unwrap();
        let d = separation_for_bayes_error(0.1);
        assert!((std.cdf(-d / 2.0) - 0.1).abs() < 1e-9);
        assert_eq!(separation_for_bayes_error(0.5), 0.0);
        assert_eq!(separation_for_bayes_error(0.0), FAR_SEPARATION);
    }

    #[test]
    fn rejects_invalid_covariance() {
        let base = SyntheticSpec {
            n: 10,
            class_means: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            covariance: Covariance::PerClass(vec![
                vec![vec![1.0, 0.5], vec![0.4, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ]),
            seed: 0,
        };
        assert!(generate_synthetic(&base).is_err());

        let indefinite = SyntheticSpec {
            covariance: Covariance::PerClass(vec![
                vec![vec![1.0, 2.0], vec![2.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ]),
            ..base.clone()
        };
        assert!(generate_synthetic(&indefinite).is_err());

        // Singular but PSD is fine.
        let singular = SyntheticSpec {
            covariance: Covariance::PerClass(vec![
                vec![vec![1.0, 1.0], vec![1.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ]),
            ..base
        };
        let d = generate_synthetic(&singular).unwrap();
        for i in 0..d.len() {
            if d.label(i) == 0 {
                let r = d.row(i);
                assert!((r[0] - r[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_covariance_sample_moments() {
        let spec = SyntheticSpec {
            n: 20_000,
            class_means: vec![vec![1.0, -1.0], vec![0.0, 0.0]],
            covariance: Covariance::PerClass(vec![
                vec![vec![2.0, 0.6], vec![0.6, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ]),
            seed: 3,
        };
        let d = generate_synthetic(&spec).unwrap();
        let rows: Vec<&[f64]> = (0..d.len())
            .filter(|&i| d.label(i) == 0)
            .map(|i| d.row(i))
            .collect();
        let n = rows.len() as f64;
        let m0 = rows.iter().map(|r| r[0]).sum::<f64>() / n;
        let m1 = rows.iter().map(|r| r[1]).sum::<f64>() / n;
        let c01 = rows.iter().map(|r| (r[0] - m0) * (r[1] - m1)).sum::<f64>() / n;
        let v0 = rows.iter().map(|r| (r[0] - m0).powi(2)).sum::<f64>() / n;
        assert!((m0 - 1.0).abs() < 0.05 && (m1 + 1.0).abs() < 0.05);
        assert!((c01 - 0.6).abs() < 0.06);
        assert!((v0 - 2.0).abs() < 0.1);
    }
}
