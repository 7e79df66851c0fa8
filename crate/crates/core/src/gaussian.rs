//! Dense Gaussian helpers shared by the prior, the conditional samplers and the
//! oracle recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Clamp applied to eigenvalues of propagated covariances.
pub const PSD_CLAMP: f64 = -1e-10;

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Replaces `m` by its symmetric part.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotSpd(what.to_string()))
}

/// Log-density of `N(mean, L Lᵀ)` at `x` given the Cholesky factor.
pub fn log_density_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let diff = x - mean;
    let l = chol.l_dirty();
    let z = l
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a nonzero diagonal");
    let log_det: f64 = (0..x.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * (x.len() as f64) * LN_2PI - log_det - 0.5 * z.norm_squared()
}

/// Mean and covariance of a multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric-part projection followed by clamping of tiny negative eigenvalues.
    pub fn project_psd(&mut self) {
        symmetrize(&mut self.cov);
        let eig = self.cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < 0.0) {
            let vals = eig.eigenvalues.map(|l| {
                if (PSD_CLAMP..0.0).contains(&l) {
                    0.0
                } else {
                    l
                }
            });
            self.cov =
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            symmetrize(&mut self.cov);
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let chol = cholesky(&self.cov, "gaussian covariance")?;
        Ok(log_density_chol(x, &self.mean, &chol))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = cholesky(&self.cov, "gaussian covariance")?;
        let z = standard_normal(self.dim(), rng);
        Ok(&self.mean + chol.l() * z)
    }
}

#[derive(Serialize, Deserialize)]
struct MomentsRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl Serialize for GaussianMoments {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MomentsRepr {
            mean: self.mean.iter().copied().collect(),
            cov: matrix_to_rows(&self.cov),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GaussianMoments {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MomentsRepr::deserialize(deserializer)?;
        let cov = matrix_from_rows(&repr.cov).map_err(serde::de::Error::custom)?;
        GaussianMoments::new(DVector::from_vec(repr.mean), cov).map_err(serde::de::Error::custom)
    }
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.iter().flatten().copied(),
    ))
}
