//! Sampling the `x_s` full conditional `pi(x_s | x_0, x_t) ∝ g_hat_s(x_s) q(x_s | x_0, x_t)`.
//!
//! Three routes are provided:
//! * [`gauss_vi`]: a diagonal Gaussian fitted by reverse-KL descent with
//!   reparameterized single-sample gradients and Adam, started at the bridge;
//! * [`mh_correct`]: an independent-proposal Metropolis-Hastings chain using the
//!   fitted Gaussian as proposal;
//! * [`exact_conditional`]: the closed-form Gaussian conditional, available for
//!   a Gaussian prior with a linear-Gaussian likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{cholesky, standard_normal, symmetrize, GaussianMoments};
use crate::likelihoods::{Likelihood, LinearGaussian};
use crate::priors::{GaussianPrior, Prior};
use crate::schedule::{gauss_log_density, gauss_log_density_diag, BridgeParams, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    /// Number of gradient steps `G`.
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub mc_samples: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn one() -> usize {
    1
}

impl ViConfig {
    pub fn new(steps: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            learning_rate,
            mc_samples: 1,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidParameter("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian `N(mu, diag(exp(rho)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: DVector<f64>,
    pub rho: DVector<f64>,
}

impl VariationalParams {
    pub fn new(mu: DVector<f64>, rho: DVector<f64>) -> Result<Self> {
        check_dim(mu.len(), rho.len())?;
        if mu.iter().chain(rho.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational parameters".into()));
        }
        Ok(Self { mu, rho })
    }

    pub fn variances(&self) -> DVector<f64> {
        self.rho.map(f64::exp)
    }

    pub fn std_devs(&self) -> DVector<f64> {
        self.rho.map(|r| (0.5 * r).exp())
    }

    /// `mu + diag(exp(rho / 2)) z`.
    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mu + self.std_devs().component_mul(z)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.transform(&standard_normal(self.mu.len(), rng))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        gauss_log_density_diag(x, &self.mu, &self.variances())
    }

    pub fn moments(&self) -> GaussianMoments {
        GaussianMoments {
            mean: self.mu.clone(),
            cov: DMatrix::from_diagonal(&self.variances()),
        }
    }
}

/// Gradient of the variational objective with respect to `(mu, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViGradient {
    pub mu: DVector<f64>,
    pub rho: DVector<f64>,
}

/// The unnormalized target `g_hat_s(x) q(x | x_0, x_t)` for fixed endpoints.
#[derive(Debug, Clone)]
pub struct ConditionalTarget<'a> {
    pub likelihood: &'a Likelihood,
    pub prior: &'a Prior,
    pub schedule: &'a NoiseSchedule,
    pub s: usize,
    pub t: usize,
    bridge: BridgeParams,
    bridge_mean: DVector<f64>,
}

impl<'a> ConditionalTarget<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        likelihood: &'a Likelihood,
        prior: &'a Prior,
        schedule: &'a NoiseSchedule,
        s: usize,
        t: usize,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
    ) -> Result<Self> {
        if s == 0 || s >= t {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: "conditional step requires 1 <= s < t",
            });
        }
        check_dim(prior.dim(), x0.len())?;
        check_dim(prior.dim(), xt.len())?;
        check_dim(prior.dim(), likelihood.input_dim())?;
        let bridge = schedule.bridge_params(s, t)?;
        let bridge_mean = bridge.mean(x0, xt);
        Ok(Self {
            likelihood,
            prior,
            schedule,
            s,
            t,
            bridge,
            bridge_mean,
        })
    }

    pub fn bridge(&self) -> BridgeParams {
        self.bridge
    }

    pub fn bridge_mean(&self) -> &DVector<f64> {
        &self.bridge_mean
    }

    /// Bridge moments used to initialize the variational parameters.
    pub fn bridge_init(&self) -> VariationalParams {
        let d = self.bridge_mean.len();
        VariationalParams {
            mu: self.bridge_mean.clone(),
            rho: DVector::from_element(d, self.bridge.variance.ln()),
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let g = self
            .likelihood
            .log_g_hat(self.prior, self.schedule, self.s, x)?;
        Ok(g.log_value + gauss_log_density(x, &self.bridge_mean, self.bridge.variance)?)
    }

    /// Gradient of `-log g_hat_s(x) + |x - bridge_mean|^2 / (2 v) - rho^T 1 / 2`
    /// at `x = mu + exp(rho / 2) z`.
    pub fn loss_gradient(
        &self,
        params: &VariationalParams,
        z: &DVector<f64>,
    ) -> Result<ViGradient> {
        check_dim(params.mu.len(), z.len())?;
        let std = params.std_devs();
        let x = &params.mu + std.component_mul(z);
        let g = self
            .likelihood
            .log_g_hat(self.prior, self.schedule, self.s, &x)?;
        let dx = (&x - &self.bridge_mean) / self.bridge.variance - g.gradient;
        let rho =
            dx.component_mul(&std).component_mul(z) * 0.5 - DVector::from_element(z.len(), 0.5);
        Ok(ViGradient { mu: dx, rho })
    }
}

/// Single-draw (or `mc_samples`-draw) reparameterized gradient estimate.
pub fn kl_gradient_estimate<R: Rng + ?Sized>(
    target: &ConditionalTarget<'_>,
    params: &VariationalParams,
    mc_samples: usize,
    rng: &mut R,
) -> Result<ViGradient> {
    let d = params.mu.len();
    let n = mc_samples.max(1);
    let mut acc = ViGradient {
        mu: DVector::zeros(d),
        rho: DVector::zeros(d),
    };
    for _ in 0..n {
        let g = target.loss_gradient(params, &standard_normal(d, rng))?;
        acc.mu += g.mu;
        acc.rho += g.rho;
    }
    acc.mu /= n as f64;
    acc.rho /= n as f64;
    Ok(acc)
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    step: i32,
}

impl Adam {
    fn new(dim: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
        }
    }

    fn update(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
        }
    }
}

/// Runs `G` Adam steps from the bridge initialization and returns the fitted parameters.
pub fn fit_gauss_vi<R: Rng + ?Sized>(
    target: &ConditionalTarget<'_>,
    config: &ViConfig,
    rng: &mut R,
) -> Result<VariationalParams> {
    config.validate()?;
    let mut params = target.bridge_init();
    if config.steps == 0 {
        return Ok(params);
    }
    let d = params.mu.len();
    let mut theta = DVector::zeros(2 * d);
    theta.rows_mut(0, d).copy_from(&params.mu);
    theta.rows_mut(d, d).copy_from(&params.rho);
    let mut adam = Adam::new(2 * d, config.learning_rate, config.adam);
    let mut grad = DVector::zeros(2 * d);
    for _ in 0..config.steps {
        let g = kl_gradient_estimate(target, &params, config.mc_samples, rng)?;
        grad.rows_mut(0, d).copy_from(&g.mu);
        grad.rows_mut(d, d).copy_from(&g.rho);
        adam.update(&mut theta, &grad);
        params.mu.copy_from(&theta.rows(0, d));
        params.rho.copy_from(&theta.rows(d, d));
    }
    if params
        .mu
        .iter()
        .chain(params.rho.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!(
            "variational fit at s = {}, t = {}",
            target.s, target.t
        )));
    }
    Ok(params)
}

/// Fits the variational Gaussian and returns one draw from it.
pub fn gauss_vi<R: Rng + ?Sized>(
    target: &ConditionalTarget<'_>,
    config: &ViConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let params = fit_gauss_vi(target, config, rng)?;
    Ok(params.sample(rng))
}

/// Closed-form conditional for a Gaussian prior and a linear-Gaussian likelihood.
#[allow(clippy::too_many_arguments)]
pub fn exact_conditional(
    likelihood: &LinearGaussian,
    prior: &GaussianPrior,
    schedule: &NoiseSchedule,
    s: usize,
    t: usize,
    x0: &DVector<f64>,
    xt: &DVector<f64>,
) -> Result<GaussianMoments> {
    if s == 0 || s >= t {
        return Err(Error::InvalidTimes {
            s,
            t,
            reason: "conditional step requires 1 <= s < t",
        });
    }
    check_dim(prior.dim(), x0.len())?;
    check_dim(prior.dim(), xt.len())?;
    let bridge = schedule.bridge_params(s, t)?;
    let (a_hat, offset) = likelihood.linearized_potential(prior, schedule, s)?;
    let noise = likelihood.sigma_y().powi(2);
    let d = prior.dim();
    let precision = DMatrix::identity(d, d) / bridge.variance + a_hat.transpose() * &a_hat / noise;
    let chol = cholesky(&precision, "conditional precision")?;
    let rhs = bridge.mean(x0, xt) / bridge.variance
        + a_hat.transpose() * (likelihood.observation() - offset) / noise;
    let mean = chol.solve(&rhs);
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    Ok(GaussianMoments { mean, cov })
}

/// Result of an independent-proposal MH run.
#[derive(Debug, Clone, PartialEq)]
pub struct MhOutcome {
    pub state: DVector<f64>,
    pub accepted: usize,
    /// Average of `min(1, ratio)` over the proposals.
    pub mean_acceptance: f64,
}

/// One independent-proposal MH transition.
///
/// States carry their log importance weight `log target - log proposal`; the
/// acceptance probability is `min(1, exp(w(candidate) - w(current)))`.
/// Returns the new state and the acceptance probability used.
pub fn independent_mh_step<S, R, F>(
    current: (S, f64),
    propose: F,
    rng: &mut R,
) -> Result<((S, f64), f64)>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut R) -> Result<(S, f64)>,
{
    let candidate = propose(rng)?;
    let log_ratio = candidate.1 - current.1;
    let accept = if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    };
    let u: f64 = rng.random();
    if u < accept {
        Ok((candidate, accept))
    } else {
        Ok((current, accept))
    }
}

/// Runs `n_steps` of MH targeting the conditional with the variational
/// Gaussian as independent proposal.
pub fn mh_correct<R: Rng + ?Sized>(
    target: &ConditionalTarget<'_>,
    current: &DVector<f64>,
    params: &VariationalParams,
    n_steps: usize,
    rng: &mut R,
) -> Result<MhOutcome> {
    let log_weight =
        |x: &DVector<f64>| -> Result<f64> { Ok(target.log_density(x)? - params.log_density(x)?) };
    if n_steps == 0 {
        return Ok(MhOutcome {
            state: current.clone(),
            accepted: 0,
            mean_acceptance: 0.0,
        });
    }
    let mut state = (current.clone(), log_weight(current)?);
    let mut accepted = 0;
    let mut total_accept = 0.0;
    for _ in 0..n_steps {
        let before = state.0.clone();
        let (next, accept) = independent_mh_step(
            state,
            |rng| {
                let x = params.sample(rng);
                let w = log_weight(&x)?;
                Ok((x, w))
            },
            rng,
        )?;
        if next.0 != before {
            accepted += 1;
        }
        total_accept += accept;
        state = next;
    }
    Ok(MhOutcome {
        state: state.0,
        accepted,
        mean_acceptance: total_accept / n_steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::QuadraticLikelihood;
    use crate::schedule::ScheduleFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn entropy_term_rho_gradient() {
        // Point-mass prior makes g_hat flat, and z = 0 kills the data term.
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0, 0.0]), 1e-11).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::identity(2, 2), v(&[1.0, 1.0]), 1.0)
            .unwrap()
            .into();
        let target = ConditionalTarget::new(
            &lik,
            &prior,
            &sched,
            20,
            60,
            &v(&[0.1, 0.2]),
            &v(&[0.3, -0.4]),
        )
        .unwrap();
        let params = VariationalParams::new(v(&[0.5, 0.5]), v(&[-1.0, 0.3])).unwrap();
        let g = target.loss_gradient(&params, &v(&[0.0, 0.0])).unwrap();
        assert!(g.rho.iter().all(|&r| (r + 0.5).abs() < 1e-12));
    }

    #[test]
    fn zero_steps_returns_bridge() {
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::identity(1, 1), v(&[1.0]), 0.5)
            .unwrap()
            .into();
        let (x0, xt) = (v(&[0.4]), v(&[-0.2]));
        let target = ConditionalTarget::new(&lik, &prior, &sched, 30, 70, &x0, &xt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fitted = fit_gauss_vi(&target, &ViConfig::new(0, 0.01), &mut rng).unwrap();
        let bridge = sched.bridge_params(30, 70).unwrap();
        assert_eq!(fitted.mu, bridge.mean(&x0, &xt));
        assert_eq!(fitted.rho[0], bridge.variance.ln());
        // G = 0 consumes exactly one normal draw, the same as bridge_sample.
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let from_vi = gauss_vi(&target, &ViConfig::new(0, 0.01), &mut a).unwrap();
        let from_bridge = sched.bridge_sample(&x0, &xt, 30, 70, &mut b).unwrap();
        assert!((from_vi - from_bridge).amax() < 1e-12);
    }

    #[test]
    fn conditional_rejects_invalid_times() {
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap());
        let lik: Likelihood = LinearGaussian::new(DMatrix::identity(1, 1), v(&[1.0]), 0.5)
            .unwrap()
            .into();
        let x = v(&[0.0]);
        assert!(ConditionalTarget::new(&lik, &prior, &sched, 0, 10, &x, &x).is_err());
        assert!(ConditionalTarget::new(&lik, &prior, &sched, 10, 10, &x, &x).is_err());
        let Prior::Gaussian(g) = &prior else {
            unreachable!()
        };
        assert!(exact_conditional(lik.as_linear().unwrap(), g, &sched, 12, 5, &x, &x).is_err());
    }

    #[test]
    fn flat_potential_reduces_to_bridge() {
        let sched = NoiseSchedule::new(ScheduleFamily::Cosine, 100).unwrap();
        let g = GaussianPrior::new(
            v(&[0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        )
        .unwrap();
        let lik = LinearGaussian::new(DMatrix::identity(2, 2), v(&[3.0, 3.0]), 1e6).unwrap();
        let (x0, xt) = (v(&[0.2, 0.1]), v(&[-1.0, 0.7]));
        let c = exact_conditional(&lik, &g, &sched, 25, 50, &x0, &xt).unwrap();
        let b = sched.bridge_params(25, 50).unwrap();
        assert!((c.mean - b.mean(&x0, &xt)).amax() < 1e-9);
        assert!((c.cov - DMatrix::identity(2, 2) * b.variance).amax() < 1e-9);
    }

    #[test]
    fn mh_zero_steps_is_identity() {
        let sched = NoiseSchedule::new(ScheduleFamily::Linear, 100).unwrap();
        let prior = Prior::Gaussian(GaussianPrior::isotropic(v(&[0.0]), 1.0).unwrap());
        let lik: Likelihood = QuadraticLikelihood::new(DMatrix::identity(1, 1), v(&[1.0]), 0.5)
            .unwrap()
            .into();
        let target =
            ConditionalTarget::new(&lik, &prior, &sched, 10, 40, &v(&[0.3]), &v(&[0.1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = mh_correct(&target, &v(&[0.25]), &target.bridge_init(), 0, &mut rng).unwrap();
        assert_eq!(out.state, v(&[0.25]));
        assert_eq!(out.accepted, 0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1, AdamConfig::default());
        let mut theta = v(&[1.0, -1.0]);
        adam.update(&mut theta, &v(&[2.0, -3.0]));
        // First bias-corrected step has magnitude lr.
        assert!((theta[0] - 0.9).abs() < 1e-7);
        assert!((theta[1] + 0.9).abs() < 1e-7);
    }
}
