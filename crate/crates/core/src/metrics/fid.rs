use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ridge added to covariances estimated from fewer than `d + 1` samples.
pub const SHRINKAGE: f64 = 1e-6;

/// `n x d` embedding vectors plus the identity of the extractor that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub embedder_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Whether [`SHRINKAGE`] was added to the diagonal.
    pub shrunk: bool,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, embedder_id: impl Into<String>, seed: u64) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("feature rows have different lengths".into()));
        }
        if rows.len() < 2 || d < 1 {
            return Err(Error::Data(format!("need at least 2 feature vectors, got {}", rows.len())));
        }
        Ok(Self {
            rows,
            embedder_id: embedder_id.into(),
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Whether the sample covariance is rank deficient by construction.
    pub fn needs_shrinkage(&self) -> bool {
        self.n() < self.dim() + 1
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Moments {
        let (n, d) = (self.n(), self.dim());
        let mut mean = DVector::zeros(d);
        for r in &self.rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        let shrunk = self.needs_shrinkage();
        if shrunk {
            for j in 0..d {
                cov[(j, j)] += SHRINKAGE;
            }
        }
        Moments { mean, cov, shrunk }
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians.
///
/// `Tr((Sa Sb)^1/2)` is evaluated as the trace of the square root of the
/// symmetric product `Sa^1/2 Sb Sa^1/2`, which has the same eigenvalues;
/// negative eigenvalues from round-off are clipped to zero.
pub fn fid_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Data(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Data("FID is not finite".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Data(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    fid_from_moments(&a.moments(), &b.moments())
}
