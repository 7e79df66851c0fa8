//! Discrepancies between sample sets and Gaussian laws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{cholesky, standard_normal, symmetrize, GaussianMoments};

/// Default number of random directions for [`sliced_wasserstein2`].
pub const DEFAULT_PROJECTIONS: usize = 512;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// `N x d` matrix of draws, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: DMatrix<f64>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "sample set must be non-empty".into(),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample set".into()));
        }
        Ok(Self {
            samples,
            provenance: Provenance::default(),
        })
    }

    pub fn from_vectors(rows: &[DVector<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidParameter("ragged sample rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Sample mean and unbiased covariance (zero covariance when `N = 1`).
    pub fn moments(&self) -> GaussianMoments {
        let n = self.len();
        let mean = DVector::from_fn(self.dim(), |j, _| self.samples.column(j).mean());
        let centered = DMatrix::from_fn(n, self.dim(), |i, j| self.samples[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
        symmetrize(&mut cov);
        GaussianMoments { mean, cov }
    }

    fn project(&self, direction: &DVector<f64>) -> Vec<f64> {
        let mut out: Vec<f64> = (&self.samples * direction).iter().copied().collect();
        out.sort_by(f64::total_cmp);
        out
    }
}

/// `KL(p || q)` between two Gaussians.
pub fn gaussian_kl(p: &GaussianMoments, q: &GaussianMoments) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let cp = cholesky(&p.cov, "first covariance")?;
    let cq = cholesky(&q.cov, "second covariance")?;
    let d = p.dim();
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * (0..d).map(|i| c.l_dirty()[(i, i)].ln()).sum::<f64>()
    };
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&cq.solve(&diff));
    Ok((0.5 * (trace + maha - d as f64 + log_det(&cq) - log_det(&cp))).max(0.0))
}

/// `W_1` between two equal-size 1-D samples.
pub fn wasserstein1_1d(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Unsupported(
            "wasserstein1_1d needs one-dimensional samples".into(),
        ));
    }
    check_dim(a.len(), b.len())?;
    let mut xa: Vec<f64> = a.samples.iter().copied().collect();
    let mut xb: Vec<f64> = b.samples.iter().copied().collect();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    Ok(xa.iter().zip(&xb).map(|(x, y)| (x - y).abs()).sum::<f64>() / xa.len() as f64)
}

/// `W_p^p` between the empirical laws of two sorted samples of any sizes.
pub fn wasserstein_pp_sorted(a: &[f64], b: &[f64], p: f64) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs().powf(p))
            .sum::<f64>()
            / na as f64;
    }
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).abs().powf(p);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

/// Root-mean of squared 1-D `W_2` along `n_projections` random unit directions.
pub fn sliced_wasserstein2<R: Rng + ?Sized>(
    a: &SampleSet,
    b: &SampleSet,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    if n_projections == 0 {
        return Err(Error::InvalidParameter("n_projections must be >= 1".into()));
    }
    let directions = random_directions(a.dim(), n_projections, rng);
    Ok(sliced_wasserstein2_along(a, b, &directions))
}

/// Unit directions drawn uniformly on the sphere.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| loop {
            let z = standard_normal(dim, rng);
            let norm = z.norm();
            if norm > 1e-12 {
                break z / norm;
            }
        })
        .collect()
}

/// Sliced `W_2` over a fixed set of directions.
pub fn sliced_wasserstein2_along(a: &SampleSet, b: &SampleSet, directions: &[DVector<f64>]) -> f64 {
    let total: f64 = directions
        .par_iter()
        .map(|dir| wasserstein_pp_sorted(&a.project(dir), &b.project(dir), 2.0))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    (total / directions.len() as f64).max(0.0).sqrt()
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_dim(b.nrows(), a.nrows())?;
    check_dim(b.ncols(), a.ncols())?;
    let denom = b.norm();
    if denom == 0.0 {
        return Err(Error::InvalidParameter("reference matrix is zero".into()));
    }
    Ok((a - b).norm() / denom)
}

/// Empirical-vs-reference moment errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentErrors {
    /// `||mean - ref mean||_2`.
    pub mean_error: f64,
    /// Relative Frobenius error of the covariance.
    pub cov_error: f64,
}

pub fn moment_errors(samples: &SampleSet, reference: &GaussianMoments) -> Result<MomentErrors> {
    check_dim(reference.dim(), samples.dim())?;
    let m = samples.moments();
    Ok(MomentErrors {
        mean_error: (m.mean - &reference.mean).norm(),
        cov_error: relative_frobenius(&m.cov, &reference.cov)?,
    })
}

/// Gaussian-theory standard errors of the sample mean and of each sample
/// covariance entry for `n` draws from `law`.
pub fn gaussian_standard_errors(law: &GaussianMoments, n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = law.dim();
    let nf = n as f64;
    let mean_se = DVector::from_fn(d, |i, _| (law.cov[(i, i)].max(0.0) / nf).sqrt());
    let cov_se = DMatrix::from_fn(d, d, |i, j| {
        ((law.cov[(i, j)].powi(2) + law.cov[(i, i)] * law.cov[(j, j)]).max(0.0)
            / (nf - 1.0).max(1.0))
        .sqrt()
    });
    (mean_se, cov_se)
}
