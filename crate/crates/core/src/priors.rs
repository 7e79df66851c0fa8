//! Analytic diffusion priors: a Gaussian and a finite Gaussian mixture.
//!
//! Every quantity the sampler needs from a diffusion model (denoiser, its
//! Jacobian, score, smoothed marginals, backward transitions) is available in
//! closed form for these two families. All conditioning goes through the
//! Cholesky factor of the observation covariance `a^2 Sigma + n I`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{
    cholesky, log_density_chol, matrix_from_rows, matrix_to_rows, standard_normal, symmetrize,
    GaussianMoments,
};
use crate::likelihoods::LinearGaussian;
use crate::schedule::NoiseSchedule;

/// Smallest eigenvalue accepted for a prior covariance.
pub const MIN_EIGENVALUE: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

/// Output of the denoiser `m_t(x) = E[X_0 | X_t = x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior parameters".into()));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::NotSpd("prior covariance is not symmetric".into()));
        }
        let mut cov = cov;
        symmetrize(&mut cov);
        let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
        if min_eig.is_nan() || min_eig <= MIN_EIGENVALUE {
            return Err(Error::NotSpd(format!(
                "prior covariance has eigenvalue {min_eig:e} <= {MIN_EIGENVALUE:e}"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Conditioning of `X_0` on `x_t` (the posterior `p_{0|t}`).
    pub(crate) fn at_time(&self, schedule: &NoiseSchedule, t: usize) -> Result<Conditioned> {
        Conditioned::new(&self.mean, &self.cov, schedule.alpha(t), schedule.var(t))
    }

    /// Conditioning of `X_s` on `x_t` (the backward kernel `p_{s|t}`).
    fn backward(&self, schedule: &NoiseSchedule, s: usize, t: usize) -> Result<Conditioned> {
        if s == 0 {
            return self.at_time(schedule, t);
        }
        let a_s = schedule.alpha(s);
        let mean_s = &self.mean * a_s;
        let cov_s =
            &self.cov * (a_s * a_s) + DMatrix::identity(self.dim(), self.dim()) * schedule.var(s);
        Conditioned::new(
            &mean_s,
            &cov_s,
            schedule.alpha(t) / a_s,
            schedule.sigma2(s, t)?,
        )
    }

    /// Moments of the smoothed marginal `p_t = N(alpha_t m, alpha_t^2 Sigma + v_t I)`.
    pub fn marginal(&self, schedule: &NoiseSchedule, t: usize) -> GaussianMoments {
        let a = schedule.alpha(t);
        GaussianMoments {
            mean: &self.mean * a,
            cov: &self.cov * (a * a) + DMatrix::identity(self.dim(), self.dim()) * schedule.var(t),
        }
    }

    /// `p_{0|t}(. | x_t)` as explicit moments.
    pub fn posterior_given(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        xt: &DVector<f64>,
    ) -> Result<GaussianMoments> {
        let c = self.at_time(schedule, t)?;
        Ok(GaussianMoments {
            mean: c.post_mean(xt),
            cov: c.post_cov(),
        })
    }

    /// Affine form of the denoiser, `m_t(x) = gain x + offset`, with the
    /// covariance of `p_{0|t}`.
    pub fn denoiser_affine(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
    ) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let c = self.at_time(schedule, t)?;
        let offset = c.post_mean(&DVector::zeros(self.dim()));
        Ok((c.gain(), offset, c.post_cov()))
    }

    fn exact_posterior(&self, lik: &LinearGaussian) -> Result<(GaussianPrior, f64)> {
        let a = lik.operator();
        let dy = a.nrows();
        let mut s = a * &self.cov * a.transpose();
        s += DMatrix::identity(dy, dy) * lik.sigma_y().powi(2);
        let chol = cholesky(&s, "observation covariance")?;
        let a_sigma = a * &self.cov;
        // K = Sigma A^T S^{-1} = (S^{-1} A Sigma)^T
        let gain = chol.solve(&a_sigma).transpose();
        let pred = a * &self.mean;
        let log_evidence = log_density_chol(lik.observation(), &pred, &chol);
        let mean = &self.mean + &gain * (lik.observation() - pred);
        let mut cov = &self.cov - &gain * a_sigma;
        symmetrize(&mut cov);
        Ok((GaussianPrior::new(mean, cov)?, log_evidence))
    }
}

/// Gaussian `N(mean, cov)` observed through `x = a X + sqrt(n) Z`.
pub(crate) struct Conditioned {
    mean: DVector<f64>,
    obs_mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `Sigma S^{-1}` with `S = a^2 Sigma + n I`.
    w: DMatrix<f64>,
    a: f64,
    n: f64,
}

impl Conditioned {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, a: f64, n: f64) -> Result<Self> {
        let d = mean.len();
        let s = cov * (a * a) + DMatrix::identity(d, d) * n;
        let chol = cholesky(&s, "noisy marginal covariance")?;
        let w = chol.solve(cov).transpose();
        Ok(Self {
            mean: mean.clone(),
            obs_mean: mean * a,
            chol,
            w,
            a,
            n,
        })
    }

    pub(crate) fn gain(&self) -> DMatrix<f64> {
        &self.w * self.a
    }

    pub(crate) fn post_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.gain() * (x - &self.obs_mean)
    }

    /// `Sigma - a^2 Sigma S^{-1} Sigma`, written as `n Sigma S^{-1}` to avoid cancellation.
    pub(crate) fn post_cov(&self) -> DMatrix<f64> {
        let mut c = &self.w * self.n;
        symmetrize(&mut c);
        c
    }

    fn log_evidence(&self, x: &DVector<f64>) -> f64 {
        log_density_chol(x, &self.obs_mean, &self.chol)
    }

    fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.obs_mean))
    }

    fn sample_posterior<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let mean = self.post_mean(x);
        if self.n == 0.0 {
            return Ok(mean);
        }
        let chol = cholesky(&self.post_cov(), "backward covariance")?;
        Ok(mean + chol.l() * standard_normal(x.len(), rng))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidParameter(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::InvalidParameter(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}"
            )));
        }
        let d = components[0].dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().map(|w| w.ln())
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized responsibilities from unnormalized log-weights.
fn softmax(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|l| (l - lse).exp()).collect()
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Analytic diffusion prior `p_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

fn require_positive_time(t: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidTimes {
            s: 0,
            t,
            reason: "denoiser requires t >= 1",
        });
    }
    if t > schedule.horizon() {
        return Err(Error::InvalidTimes {
            s: 0,
            t,
            reason: "t exceeds the horizon",
        });
    }
    Ok(())
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Gaussian(g) => g.dim(),
            Prior::Gmm(m) => m.dim(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianPrior> {
        match self {
            Prior::Gaussian(g) => Some(g),
            Prior::Gmm(_) => None,
        }
    }

    /// Denoiser `m_t(x_t)` and its Jacobian.
    pub fn denoise(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        xt: &DVector<f64>,
    ) -> Result<DenoiserOutput> {
        require_positive_time(t, schedule)?;
        check_dim(self.dim(), xt.len())?;
        match self {
            Prior::Gaussian(g) => {
                let c = g.at_time(schedule, t)?;
                Ok(DenoiserOutput {
                    value: c.post_mean(xt),
                    jacobian: c.gain(),
                })
            }
            Prior::Gmm(m) => {
                let parts = m
                    .components
                    .iter()
                    .map(|c| c.at_time(schedule, t))
                    .collect::<Result<Vec<_>>>()?;
                let log_r: Vec<f64> = parts
                    .iter()
                    .zip(m.log_weights())
                    .map(|(c, lw)| lw + c.log_evidence(xt))
                    .collect();
                let resp = softmax(&log_r);
                let d = xt.len();
                let means: Vec<DVector<f64>> = parts.iter().map(|c| c.post_mean(xt)).collect();
                let scores: Vec<DVector<f64>> = parts.iter().map(|c| c.score(xt)).collect();
                let mut value = DVector::zeros(d);
                let mut mean_score = DVector::zeros(d);
                for j in 0..parts.len() {
                    value += &means[j] * resp[j];
                    mean_score += &scores[j] * resp[j];
                }
                // d m / dx = sum_j r_j K_j + sum_j r_j m_j (grad log N_j - sum_k r_k grad log N_k)^T
                let mut jacobian = DMatrix::zeros(d, d);
                for j in 0..parts.len() {
                    if resp[j] == 0.0 {
                        continue;
                    }
                    jacobian += parts[j].gain() * resp[j];
                    jacobian += (&means[j] * (&scores[j] - &mean_score).transpose()) * resp[j];
                }
                Ok(DenoiserOutput { value, jacobian })
            }
        }
    }

    /// Score `grad log p_t(x_t)`.
    pub fn score(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        xt: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        require_positive_time(t, schedule)?;
        check_dim(self.dim(), xt.len())?;
        match self {
            Prior::Gaussian(g) => Ok(g.at_time(schedule, t)?.score(xt)),
            Prior::Gmm(m) => {
                let parts = m
                    .components
                    .iter()
                    .map(|c| c.at_time(schedule, t))
                    .collect::<Result<Vec<_>>>()?;
                let log_r: Vec<f64> = parts
                    .iter()
                    .zip(m.log_weights())
                    .map(|(c, lw)| lw + c.log_evidence(xt))
                    .collect();
                let resp = softmax(&log_r);
                let mut out = DVector::zeros(xt.len());
                for (c, r) in parts.iter().zip(resp) {
                    out += c.score(xt) * r;
                }
                Ok(out)
            }
        }
    }

    /// `log p_t(x_t)`; `t = 0` gives the prior log-density.
    pub fn marginal_log_density(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        xt: &DVector<f64>,
    ) -> Result<f64> {
        if t > schedule.horizon() {
            return Err(Error::InvalidTimes {
                s: 0,
                t,
                reason: "t exceeds the horizon",
            });
        }
        check_dim(self.dim(), xt.len())?;
        match self {
            Prior::Gaussian(g) => Ok(g.at_time(schedule, t)?.log_evidence(xt)),
            Prior::Gmm(m) => {
                let terms = m
                    .components
                    .iter()
                    .zip(m.log_weights())
                    .map(|(c, lw)| Ok(lw + c.at_time(schedule, t)?.log_evidence(xt)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(log_sum_exp(&terms))
            }
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        match self {
            Prior::Gaussian(g) => GaussianMoments {
                mean: g.mean.clone(),
                cov: g.cov.clone(),
            }
            .log_density(x),
            Prior::Gmm(m) => {
                let terms = m
                    .components
                    .iter()
                    .zip(m.log_weights())
                    .map(|(c, lw)| {
                        Ok(lw
                            + GaussianMoments {
                                mean: c.mean.clone(),
                                cov: c.cov.clone(),
                            }
                            .log_density(x)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(log_sum_exp(&terms))
            }
        }
    }

    /// Exact draw from `p_{s|t}(. | x_t)`.
    pub fn backward_sample<R: Rng + ?Sized>(
        &self,
        schedule: &NoiseSchedule,
        s: usize,
        t: usize,
        xt: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if s >= t {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: "backward kernel requires s < t",
            });
        }
        schedule.sigma2(s, t)?;
        check_dim(self.dim(), xt.len())?;
        match self {
            Prior::Gaussian(g) => g.backward(schedule, s, t)?.sample_posterior(xt, rng),
            Prior::Gmm(m) => {
                let parts = m
                    .components
                    .iter()
                    .map(|c| c.backward(schedule, s, t))
                    .collect::<Result<Vec<_>>>()?;
                let log_r: Vec<f64> = parts
                    .iter()
                    .zip(m.log_weights())
                    .map(|(c, lw)| lw + c.log_evidence(xt))
                    .collect();
                let j = sample_categorical(&softmax(&log_r), rng);
                parts[j].sample_posterior(xt, rng)
            }
        }
    }

    /// `log p_{s|t}(x_s | x_t) = log p_s(x_s) + log q_{t|s}(x_t | x_s) - log p_t(x_t)`.
    pub fn backward_log_density(
        &self,
        schedule: &NoiseSchedule,
        s: usize,
        t: usize,
        xs: &DVector<f64>,
        xt: &DVector<f64>,
    ) -> Result<f64> {
        Ok(self.marginal_log_density(schedule, s, xs)?
            + schedule.forward_log_density(xt, xs, s, t)?
            - self.marginal_log_density(schedule, t, xt)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let draw = |g: &GaussianPrior, rng: &mut R| {
            GaussianMoments {
                mean: g.mean.clone(),
                cov: g.cov.clone(),
            }
            .sample(rng)
        };
        match self {
            Prior::Gaussian(g) => draw(g, rng),
            Prior::Gmm(m) => {
                let j = sample_categorical(&m.weights, rng);
                draw(&m.components[j], rng)
            }
        }
    }

    /// Exact posterior `p_0(x) N(y; A x, sigma_y^2 I)` after normalization.
    pub fn exact_posterior(&self, lik: &LinearGaussian) -> Result<Prior> {
        check_dim(self.dim(), lik.operator().ncols())?;
        match self {
            Prior::Gaussian(g) => Ok(Prior::Gaussian(g.exact_posterior(lik)?.0)),
            Prior::Gmm(m) => {
                let mut comps = Vec::with_capacity(m.components.len());
                let mut log_w = Vec::with_capacity(m.components.len());
                for (c, lw) in m.components.iter().zip(m.log_weights()) {
                    let (post, log_evidence) = c.exact_posterior(lik)?;
                    comps.push(post);
                    log_w.push(lw + log_evidence);
                }
                let mut weights = softmax(&log_w);
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total);
                Ok(Prior::Gmm(GmmPrior::new(weights, comps)?))
            }
        }
    }

    /// Mean and covariance of `p_0`.
    pub fn moments(&self) -> GaussianMoments {
        match self {
            Prior::Gaussian(g) => GaussianMoments {
                mean: g.mean.clone(),
                cov: g.cov.clone(),
            },
            Prior::Gmm(m) => {
                let d = m.dim();
                let mut mean = DVector::zeros(d);
                for (w, c) in m.weights.iter().zip(&m.components) {
                    mean += &c.mean * *w;
                }
                let mut cov = DMatrix::zeros(d, d);
                for (w, c) in m.weights.iter().zip(&m.components) {
                    let diff = &c.mean - &mean;
                    cov += (&c.cov + &diff * diff.transpose()) * *w;
                }
                GaussianMoments { mean, cov }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PriorRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl Serialize for Prior {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let comp = |g: &GaussianPrior| {
            (
                g.mean.iter().copied().collect::<Vec<_>>(),
                matrix_to_rows(&g.cov),
            )
        };
        let repr = match self {
            Prior::Gaussian(g) => {
                let (m, c) = comp(g);
                PriorRepr {
                    kind: "gaussian".into(),
                    weights: None,
                    means: vec![m],
                    covariances: vec![c],
                }
            }
            Prior::Gmm(mix) => {
                let (means, covariances) = mix.components.iter().map(comp).unzip();
                PriorRepr {
                    kind: "gmm".into(),
                    weights: Some(mix.weights.clone()),
                    means,
                    covariances,
                }
            }
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Prior {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = PriorRepr::deserialize(deserializer)?;
        prior_from_repr(repr).map_err(serde::de::Error::custom)
    }
}

fn prior_from_repr(repr: PriorRepr) -> Result<Prior> {
    if repr.means.len() != repr.covariances.len() {
        return Err(Error::InvalidParameter(
            "means and covariances differ in length".into(),
        ));
    }
    let comps = repr
        .means
        .into_iter()
        .zip(repr.covariances)
        .map(|(m, c)| GaussianPrior::new(DVector::from_vec(m), matrix_from_rows(&c)?))
        .collect::<Result<Vec<_>>>()?;
    match repr.kind.as_str() {
        "gaussian" => {
            if comps.len() != 1 {
                return Err(Error::InvalidParameter(
                    "gaussian prior takes exactly one component".into(),
                ));
            }
            Ok(Prior::Gaussian(
                comps.into_iter().next().expect("one component"),
            ))
        }
        "gmm" => {
            let weights = repr
                .weights
                .ok_or_else(|| Error::InvalidParameter("gmm prior requires weights".into()))?;
            Ok(Prior::Gmm(GmmPrior::new(weights, comps)?))
        }
        other => Err(Error::InvalidParameter(format!(
            "unknown prior kind `{other}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    /// Single step schedule with alpha_1 = 0.5.
    fn half_schedule() -> NoiseSchedule {
        NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.25]).unwrap()
    }

    fn std_normal_1d() -> Prior {
        Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap())
    }

    fn gmm_2d() -> Prior {
        let c1 = GaussianPrior::new(
            v(&[1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        let c2 = GaussianPrior::new(
            v(&[-1.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.6]),
        )
        .unwrap();
        Prior::Gmm(GmmPrior::new(vec![0.3, 0.7], vec![c1, c2]).unwrap())
    }

    #[test]
    fn conjugate_denoiser_1d() {
        // alpha = 0.5, v = 0.75: m(x) = alpha Sigma / (alpha^2 Sigma + v) x = 0.5 x
        let out = std_normal_1d()
            .denoise(&half_schedule(), 1, &v(&[3.0]))
            .unwrap();
        assert!((out.value[0] - 1.5).abs() < 1e-14);
        assert!((out.jacobian[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(std_normal_1d()
            .denoise(&half_schedule(), 0, &v(&[3.0]))
            .is_err());
    }

    #[test]
    fn point_mass_limit() {
        let p = Prior::Gaussian(GaussianPrior::isotropic(v(&[2.0, -1.0]), 1e-11).unwrap());
        let s = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let out = p.denoise(&s, 40, &v(&[10.0, 7.0])).unwrap();
        assert!((out.value - v(&[2.0, -1.0])).amax() < 1e-8);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        assert!(GaussianPrior::isotropic(v(&[0.0]), 1e-13).is_err());
        assert!(GaussianPrior::new(
            v(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])
        )
        .is_err());
        assert!(GaussianPrior::new(
            v(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0])
        )
        .is_err());
        assert!(GmmPrior::new(
            vec![0.5, 0.6],
            vec![
                GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap(),
                GaussianPrior::isotropic(v(&[1.0]), 1.0).unwrap()
            ]
        )
        .is_err());
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let g = GaussianPrior::new(
            v(&[0.3, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
        )
        .unwrap();
        let mix = Prior::Gmm(GmmPrior::new(vec![1.0], vec![g.clone()]).unwrap());
        let gauss = Prior::Gaussian(g);
        let s = NoiseSchedule::new(ScheduleFamily::Cosine, 50).unwrap();
        let x = v(&[0.7, 1.2]);
        let a = gauss.denoise(&s, 20, &x).unwrap();
        let b = mix.denoise(&s, 20, &x).unwrap();
        assert!((a.value - b.value).amax() < 1e-13);
        assert!((a.jacobian - b.jacobian).amax() < 1e-13);
        let la = gauss.marginal_log_density(&s, 20, &x).unwrap();
        let lb = mix.marginal_log_density(&s, 20, &x).unwrap();
        assert!((la - lb).abs() < 1e-13);
    }

    #[test]
    fn marginal_density_reference() {
        // N(0,1) prior, alpha = 0.5: p_t = N(0, 0.25 + 0.75)
        let l = std_normal_1d()
            .marginal_log_density(&half_schedule(), 1, &v(&[0.0]))
            .unwrap();
        assert!((l + 0.918_938_533_204_672_7).abs() < 1e-12);
        let l0 = std_normal_1d()
            .marginal_log_density(&half_schedule(), 0, &v(&[1.0]))
            .unwrap();
        assert!((l0 - std_normal_1d().log_density(&v(&[1.0])).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gmm_marginal_is_log_sum_exp_of_components() {
        let p = gmm_2d();
        let s = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let x = v(&[0.2, 0.4]);
        let Prior::Gmm(m) = &p else { unreachable!() };
        let terms: Vec<f64> = m
            .weights()
            .iter()
            .zip(m.components())
            .map(|(w, c)| w.ln() + c.marginal(&s, 30).log_density(&x).unwrap())
            .collect();
        assert!((p.marginal_log_density(&s, 30, &x).unwrap() - log_sum_exp(&terms)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_score_is_zero_at_marginal_mean() {
        let p = Prior::Gaussian(
            GaussianPrior::new(
                v(&[1.0, 2.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]),
            )
            .unwrap(),
        );
        let s = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let x = v(&[1.0, 2.0]) * s.alpha(35);
        assert!(p.score(&s, 35, &x).unwrap().amax() < 1e-14);
    }

    #[test]
    fn conjugate_posterior_1d() {
        let lik = LinearGaussian::new(DMatrix::from_element(1, 1, 1.0), v(&[2.0]), 1.0).unwrap();
        let Prior::Gaussian(post) = std_normal_1d().exact_posterior(&lik).unwrap() else {
            unreachable!()
        };
        assert!((post.mean()[0] - 1.0).abs() < 1e-14);
        assert!((post.cov()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_operator_leaves_prior_unchanged() {
        let lik = LinearGaussian::new(DMatrix::zeros(1, 2), v(&[3.0]), 0.5).unwrap();
        let p = gmm_2d();
        let post = p.exact_posterior(&lik).unwrap();
        let (Prior::Gmm(a), Prior::Gmm(b)) = (&post, &p) else {
            panic!("expected mixtures")
        };
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert!((wa - wb).abs() < 1e-12);
        }
        for (ca, cb) in a.components().iter().zip(b.components()) {
            assert!((ca.mean() - cb.mean()).amax() < 1e-12);
            assert!((ca.cov() - cb.cov()).amax() < 1e-12);
        }
    }

    #[test]
    fn backward_sample_validates_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = half_schedule();
        assert!(std_normal_1d()
            .backward_sample(&s, 1, 1, &v(&[0.0]), &mut rng)
            .is_err());
        assert!(std_normal_1d()
            .backward_sample(&s, 2, 1, &v(&[0.0]), &mut rng)
            .is_err());
    }

    #[test]
    fn serde_round_trip() {
        let p = gmm_2d();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Prior>(&json).unwrap(), p);
        let g = std_normal_1d();
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"kind\":\"gaussian\""));
        assert_eq!(serde_json::from_str::<Prior>(&json).unwrap(), g);
        assert!(serde_json::from_str::<Prior>(
            r#"{"kind":"gmm","means":[[0.0]],"covariances":[[[1.0]]]}"#
        )
        .is_err());
    }
}
