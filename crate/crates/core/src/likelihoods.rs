//! Observation models `g(x) = N(y; F(x), sigma_y^2 I)` and the denoiser-plugged
//! potentials `g_hat_s = g o m_s`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{cholesky, log_density_chol, matrix_from_rows, matrix_to_rows, LN_2PI};
use crate::priors::{GaussianPrior, Prior};
use crate::schedule::NoiseSchedule;

/// Observation noise used to smooth noiseless problems.
pub const NOISELESS_SIGMA_Y: f64 = 1e-4;

fn validate(a: &DMatrix<f64>, y: &DVector<f64>, sigma_y: f64) -> Result<()> {
    check_dim(a.nrows(), y.len())?;
    if !sigma_y.is_finite() || sigma_y <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma_y must be positive, got {sigma_y}"
        )));
    }
    if a.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "likelihood operator or observation".into(),
        ));
    }
    Ok(())
}

fn gaussian_log_lik(residual: &DVector<f64>, sigma_y: f64) -> f64 {
    let var = sigma_y * sigma_y;
    -0.5 * residual.len() as f64 * (LN_2PI + var.ln()) - residual.norm_squared() / (2.0 * var)
}

/// `y = A x + sigma_y Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    a: DMatrix<f64>,
    y: DVector<f64>,
    sigma_y: f64,
}

impl LinearGaussian {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, sigma_y: f64) -> Result<Self> {
        validate(&a, &y, sigma_y)?;
        Ok(Self { a, y, sigma_y })
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    /// `(A_hat_s, a_s)` such that `g_hat_s(x) = N(y; A_hat_s x + a_s, sigma_y^2 I)`
    /// under a Gaussian prior.
    pub fn linearized_potential(
        &self,
        prior: &GaussianPrior,
        schedule: &NoiseSchedule,
        s: usize,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        check_dim(prior.dim(), self.a.ncols())?;
        let (gain, offset, _) = prior.denoiser_affine(schedule, s)?;
        Ok((&self.a * gain, &self.a * offset))
    }
}

/// Componentwise quadratic observation `y = (A x)^2 + sigma_y Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLikelihood {
    a: DMatrix<f64>,
    y: DVector<f64>,
    sigma_y: f64,
}

impl QuadraticLikelihood {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, sigma_y: f64) -> Result<Self> {
        validate(&a, &y, sigma_y)?;
        Ok(Self { a, y, sigma_y })
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.a
    }
}

/// Value and gradient of `log g_hat_s` at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub log_value: f64,
    pub gradient: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    Linear(LinearGaussian),
    Quadratic(QuadraticLikelihood),
}

impl From<LinearGaussian> for Likelihood {
    fn from(l: LinearGaussian) -> Self {
        Likelihood::Linear(l)
    }
}

impl From<QuadraticLikelihood> for Likelihood {
    fn from(l: QuadraticLikelihood) -> Self {
        Likelihood::Quadratic(l)
    }
}

impl Likelihood {
    fn parts(&self) -> (&DMatrix<f64>, &DVector<f64>, f64) {
        match self {
            Likelihood::Linear(l) => (&l.a, &l.y, l.sigma_y),
            Likelihood::Quadratic(q) => (&q.a, &q.y, q.sigma_y),
        }
    }

    pub fn as_linear(&self) -> Option<&LinearGaussian> {
        match self {
            Likelihood::Linear(l) => Some(l),
            Likelihood::Quadratic(_) => None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.parts().0.ncols()
    }

    pub fn observation(&self) -> &DVector<f64> {
        self.parts().1
    }

    pub fn sigma_y(&self) -> f64 {
        self.parts().2
    }

    /// Forward map `F(x)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, _, _) = self.parts();
        check_dim(a.ncols(), x.len())?;
        let ax = a * x;
        Ok(match self {
            Likelihood::Linear(_) => ax,
            Likelihood::Quadratic(_) => ax.map(|v| v * v),
        })
    }

    /// `J_F(x)^T v`.
    pub fn vjp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, _, _) = self.parts();
        check_dim(a.ncols(), x.len())?;
        check_dim(a.nrows(), v.len())?;
        Ok(match self {
            Likelihood::Linear(_) => a.transpose() * v,
            Likelihood::Quadratic(_) => {
                let ax = a * x;
                a.transpose() * ax.component_mul(v).scale(2.0)
            }
        })
    }

    pub fn log_g0(&self, x: &DVector<f64>) -> Result<f64> {
        let (_, y, sigma_y) = self.parts();
        Ok(gaussian_log_lik(&(y - self.forward(x)?), sigma_y))
    }

    pub fn grad_log_g0(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (_, y, sigma_y) = self.parts();
        let residual = y - self.forward(x)?;
        Ok(self.vjp(x, &residual)? / (sigma_y * sigma_y))
    }

    /// `log g(m_s(x_s))` and its gradient `J_{m_s}(x_s)^T grad log g(m_s(x_s))`.
    pub fn log_g_hat(
        &self,
        prior: &Prior,
        schedule: &NoiseSchedule,
        s: usize,
        xs: &DVector<f64>,
    ) -> Result<PotentialEval> {
        let den = prior.denoise(schedule, s, xs)?;
        let log_value = self.log_g0(&den.value)?;
        let gradient = den.jacobian.transpose() * self.grad_log_g0(&den.value)?;
        Ok(PotentialEval {
            log_value,
            gradient,
        })
    }

    /// Exact `log g_t(x_t) = log int g(x_0) p_{0|t}(x_0 | x_t) dx_0`.
    pub fn exact_log_g_t(
        &self,
        prior: &Prior,
        schedule: &NoiseSchedule,
        t: usize,
        xt: &DVector<f64>,
    ) -> Result<f64> {
        let (Likelihood::Linear(lin), Prior::Gaussian(g)) = (self, prior) else {
            return Err(Error::Unsupported(
                "exact smoothed potential needs a linear-Gaussian likelihood and a Gaussian prior"
                    .into(),
            ));
        };
        if t == 0 {
            return self.log_g0(xt);
        }
        check_dim(g.dim(), xt.len())?;
        let post = g.posterior_given(schedule, t, xt)?;
        let dy = lin.y.len();
        let cov = &lin.a * &post.cov * lin.a.transpose()
            + DMatrix::identity(dy, dy) * lin.sigma_y.powi(2);
        let chol = cholesky(&cov, "smoothed potential covariance")?;
        Ok(log_density_chol(&lin.y, &(&lin.a * post.mean), &chol))
    }
}

#[derive(Serialize, Deserialize)]
struct LikelihoodRepr {
    kind: String,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    y: Vec<f64>,
    sigma_y: f64,
}

impl Serialize for Likelihood {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let (a, y, sigma_y) = self.parts();
        LikelihoodRepr {
            kind: match self {
                Likelihood::Linear(_) => "linear",
                Likelihood::Quadratic(_) => "quadratic",
            }
            .into(),
            a: matrix_to_rows(a),
            y: y.iter().copied().collect(),
            sigma_y,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Likelihood {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = LikelihoodRepr::deserialize(deserializer)?;
        let build = || -> Result<Likelihood> {
            let a = matrix_from_rows(&repr.a)?;
            let y = DVector::from_vec(repr.y.clone());
            match repr.kind.as_str() {
                "linear" => Ok(LinearGaussian::new(a, y, repr.sigma_y)?.into()),
                "quadratic" => Ok(QuadraticLikelihood::new(a, y, repr.sigma_y)?.into()),
                other => Err(Error::InvalidParameter(format!(
                    "unknown likelihood kind `{other}`"
                ))),
            }
        };
        build().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    const LOG_STD_NORMAL_MODE: f64 = -0.918_938_533_204_672_7;

    #[test]
    fn log_g0_reference_values() {
        let lin: Likelihood = LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), v(&[0.7]), 1.0)
            .unwrap()
            .into();
        assert!((lin.log_g0(&v(&[0.7])).unwrap() - LOG_STD_NORMAL_MODE).abs() < 1e-14);
        let quad: Likelihood =
            QuadraticLikelihood::new(DMatrix::from_element(1, 1, 1.0), v(&[4.0]), 1.0)
                .unwrap()
                .into();
        assert!((quad.log_g0(&v(&[2.0])).unwrap() - LOG_STD_NORMAL_MODE).abs() < 1e-14);
        assert!(quad.log_g0(&v(&[2.0, 1.0])).is_err());

        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.5, -1.0, 0.0]);
        let lin: Likelihood = LinearGaussian::new(a.clone(), v(&[1.0, -1.0]), 0.3)
            .unwrap()
            .into();
        let x = v(&[0.2, 0.4, -0.1]);
        let r = v(&[1.0, -1.0]) - &a * &x;
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * 0.09).ln()
            - r.norm_squared() / (2.0 * 0.09);
        assert!((lin.log_g0(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_noise() {
        assert!(LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), v(&[0.0]), 0.0).is_err());
        assert!(
            LinearGaussian::new(DMatrix::from_element(1, 1, f64::NAN), v(&[0.0]), 1.0).is_err()
        );
        assert!(LinearGaussian::new(DMatrix::from_element(2, 1, 1.0), v(&[0.0]), 1.0).is_err());
    }

    #[test]
    fn g_hat_reference_point() {
        // N(0,1) prior, alpha_s = 0.5 so m_s(4) = 2 = y
        let sched = NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.25]).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), v(&[2.0]), 1.0)
            .unwrap()
            .into();
        let eval = lik.log_g_hat(&prior, &sched, 1, &v(&[4.0])).unwrap();
        assert!((eval.log_value - LOG_STD_NORMAL_MODE).abs() < 1e-14);
        assert!(eval.gradient[0].abs() < 1e-14);
        assert!(lik.log_g_hat(&prior, &sched, 0, &v(&[4.0])).is_err());
    }

    #[test]
    fn g_hat_flat_under_point_mass_prior() {
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.5, 0.5]), 1e-11).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::identity(2, 2), v(&[1.0, 0.0]), 0.5)
            .unwrap()
            .into();
        let a = lik.log_g_hat(&prior, &sched, 50, &v(&[-3.0, 2.0])).unwrap();
        let b = lik.log_g_hat(&prior, &sched, 50, &v(&[4.0, 1.0])).unwrap();
        assert!((a.log_value - b.log_value).abs() < 1e-8);
        assert!(a.gradient.amax() < 1e-8);
    }

    #[test]
    fn exact_potential_flat_for_huge_noise() {
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0]), 1e6)
            .unwrap()
            .into();
        let a = lik.exact_log_g_t(&prior, &sched, 40, &v(&[-5.0])).unwrap();
        let b = lik.exact_log_g_t(&prior, &sched, 40, &v(&[5.0])).unwrap();
        assert!((a - b).abs() < 1e-10);
        let quad: Likelihood =
            QuadraticLikelihood::new(DMatrix::from_element(1, 1, 1.0), v(&[1.0]), 1.0)
                .unwrap()
                .into();
        assert!(matches!(
            quad.exact_log_g_t(&prior, &sched, 40, &v(&[0.0])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn serde_round_trip() {
        let lik: Likelihood =
            QuadraticLikelihood::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0]), v(&[0.3]), 0.05)
                .unwrap()
                .into();
        let json = serde_json::to_string(&lik).unwrap();
        assert!(json.contains("\"A\":[[1.0,-1.0]]"));
        assert_eq!(serde_json::from_str::<Likelihood>(&json).unwrap(), lik);
    }
}
