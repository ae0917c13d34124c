use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_ids;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vecstore::VectorSet;
use crate::{Error, Result};

/// Sample size per side used by [`mahalanobis_gap`] when none is given.
pub const DEFAULT_GAP_SAMPLE: usize = 5000;

/// Shrinkage used when none is given: `1e-3 · trace(Σ) / d`.
pub fn default_shrinkage(cov_trace: f64, d: usize) -> f64 {
    1e-3 * cov_trace / d as f64
}

/// Gaussian model of a reference set: mean plus the Cholesky factor of the
/// shrunk covariance `Σ + λI`.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    shrinkage: f64,
}

impl MahalanobisModel {
    /// Fits mean and covariance (`n - 1` denominator) of `reference`.
    /// `shrinkage = None` picks [`default_shrinkage`].
    pub fn fit(reference: &VectorSet, shrinkage: Option<f64>) -> Result<Self> {
        let (n, d) = (reference.len(), reference.dim());
        if n == 0 {
            return Err(Error::spec("reference", "cannot fit an empty set"));
        }
        if let Some(l) = shrinkage {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::spec("shrinkage", format!("must be finite and >= 0, got {l}")));
            }
        }
        let x = DMatrix::from_row_iterator(n, d, reference.as_slice().iter().map(|&v| v as f64));
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = centered.tr_mul(&centered) / denom;
        let lambda = shrinkage.unwrap_or_else(|| default_shrinkage(cov.trace(), d));
        for i in 0..d {
            cov[(i, i)] += lambda;
        }
        let chol = cov.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "covariance is not positive definite with shrinkage {lambda:e}; use a larger shrinkage"
            ))
        })?;
        let factor = chol.l();
        if factor.iter().any(|v| !v.is_finite()) || factor.diagonal().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical(format!(
                "degenerate Cholesky factor with shrinkage {lambda:e}; use a larger shrinkage"
            )));
        }
        Ok(MahalanobisModel {
            mean,
            factor,
            shrinkage: lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ + λI`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// `(x - μ)ᵀ (Σ + λI)⁻¹ (x - μ)`.
    pub fn squared_distance(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let diff = DVector::from_iterator(self.dim(), x.iter().zip(self.mean.iter()).map(|(&a, m)| a as f64 - m));
        let y = self
            .factor
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok(y.norm_squared())
    }

    pub fn distance(&self, x: &[f32]) -> Result<f64> {
        Ok(self.squared_distance(x)?.sqrt())
    }
}

/// Query-to-key versus key-to-key Mahalanobis distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub sample: usize,
    pub shrinkage: f64,
    pub q_to_k_mean: f64,
    pub k_to_k_mean: f64,
    /// `q_to_k_mean / k_to_k_mean`.
    pub ratio: f64,
    pub q_distances: Vec<f64>,
    pub k_distances: Vec<f64>,
}

/// Samples `sample` queries and `sample` keys, fits a model on the keys that
/// were not sampled and compares the mean distance of both samples to it.
pub fn mahalanobis_gap(queries: &VectorSet, keys: &VectorSet, sample: usize, seed: u64) -> Result<GapReport> {
    if queries.dim() != keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: keys.dim(),
            got: queries.dim(),
        });
    }
    if sample == 0 || sample > queries.len().min(keys.len()) {
        return Err(Error::spec(
            "sample",
            format!(
                "{sample} not in 1..={} (queries {}, keys {})",
                queries.len().min(keys.len()),
                queries.len(),
                keys.len()
            ),
        ));
    }
    if sample == keys.len() {
        return Err(Error::spec("sample", "must leave keys to fit the model on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q_ids = sample_ids(&mut rng, queries.len(), sample).into_vec();
    let mut k_ids = sample_ids(&mut rng, keys.len(), sample).into_vec();
    q_ids.sort_unstable();
    k_ids.sort_unstable();
    let mut held = vec![false; keys.len()];
    k_ids.iter().for_each(|&i| held[i] = true);
    let rest: Vec<usize> = (0..keys.len()).filter(|&i| !held[i]).collect();
    let model = MahalanobisModel::fit(&keys.select(&rest), None)?;

    let dist = |set: &VectorSet, ids: &[usize]| -> Result<Vec<f64>> {
        ids.iter().map(|&i| model.distance(set.row(i))).collect()
    };
    let q_distances = dist(queries, &q_ids)?;
    let k_distances = dist(keys, &k_ids)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (q_to_k_mean, k_to_k_mean) = (mean(&q_distances), mean(&k_distances));
    Ok(GapReport {
        sample,
        shrinkage: model.shrinkage(),
        q_to_k_mean,
        k_to_k_mean,
        ratio: q_to_k_mean / k_to_k_mean,
        q_distances,
        k_distances,
    })
}
