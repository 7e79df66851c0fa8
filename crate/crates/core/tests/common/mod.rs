#![allow(dead_code)]

use mgdm::gaussian::GaussianMoments;
use mgdm::likelihoods::{Likelihood, LinearGaussian, QuadraticLikelihood};
use mgdm::oracle::quadrature::Grid1d;
use mgdm::priors::{GaussianPrior, GmmPrior, Prior};
use mgdm::sampler::{ConditionalBackend, DenoiserBackend, IndexDistribution, MgdmConfig};
use mgdm::schedule::{NoiseSchedule, ScheduleFamily};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

pub fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear_schedule() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleFamily::Linear, 1000).unwrap()
}

/// 2-D Gaussian prior used by the oracle tests.
pub fn reference_prior() -> GaussianPrior {
    GaussianPrior::new(v(&[0.5, -0.3]), mat(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap()
}

pub fn reference_likelihood() -> LinearGaussian {
    LinearGaussian::new(mat(2, 2, &[1.0, 0.5, -0.3, 0.8]), v(&[1.2, -0.4]), 0.3).unwrap()
}

/// Exact conditional, exact inner denoiser, midpoint index with floor 10.
pub fn reference_config(k: usize, r: usize) -> MgdmConfig {
    MgdmConfig {
        k,
        r,
        index: IndexDistribution::FixedMidpoint { tau: 10 },
        conditional: ConditionalBackend::Exact,
        denoiser: DenoiserBackend::Exact,
        ..MgdmConfig::default()
    }
}

pub fn gaussian_1d(mean: f64, var: f64) -> GaussianPrior {
    GaussianPrior::new(v(&[mean]), mat(1, 1, &[var])).unwrap()
}

pub fn linear_1d(a: f64, y: f64, sigma_y: f64) -> LinearGaussian {
    LinearGaussian::new(mat(1, 1, &[a]), v(&[y]), sigma_y).unwrap()
}

/// `y = x^2 + noise` with a standard normal prior: bimodal for positive `y`.
pub fn quadratic_toy(y: f64, sigma_y: f64) -> (Prior, Likelihood) {
    let prior = Prior::Gaussian(gaussian_1d(0.0, 1.0));
    let lik = QuadraticLikelihood::new(mat(1, 1, &[1.0]), v(&[y]), sigma_y).unwrap();
    (prior, Likelihood::Quadratic(lik))
}

/// Two-component mixture in `d` dimensions with well separated modes.
pub fn gmm(d: usize) -> Prior {
    let m1 = DVector::from_fn(d, |i, _| if i % 2 == 0 { 1.2 } else { -0.4 });
    let m2 = DVector::from_fn(d, |i, _| if i % 2 == 0 { -1.0 } else { 0.8 });
    let c1 = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.5
        } else {
            0.1 / (1.0 + (i as f64 - j as f64).abs())
        }
    });
    let c2 = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.3
        } else if i + 1 == j || j + 1 == i {
            -0.05
        } else {
            0.0
        }
    });
    let comps = vec![
        GaussianPrior::new(m1, c1).unwrap(),
        GaussianPrior::new(m2, c2).unwrap(),
    ];
    Prior::Gmm(GmmPrior::new(vec![0.35, 0.65], comps).unwrap())
}

pub fn gaussian(d: usize) -> Prior {
    let mean = DVector::from_fn(d, |i, _| 0.3 * i as f64 - 0.2);
    let cov = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.8 + 0.1 * i as f64
        } else {
            0.2 / (1.0 + (i as f64 - j as f64).abs())
        }
    });
    Prior::Gaussian(GaussianPrior::new(mean, cov).unwrap())
}

/// Dense operator with `dy` rows.
pub fn operator(dy: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dy, d, |i, j| {
        ((i * d + j) as f64 * 0.7).sin() + if i == j { 0.5 } else { 0.0 }
    })
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `|empirical mean - mean| / SE` and `|empirical var - var| / SE` for `n` draws
/// from a Gaussian with the given moments.
pub fn gaussian_z(xs: &[f64], mean: f64, var: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let (m, s2) = mean_var(xs);
    (
        (m - mean).abs() / (var / n).sqrt(),
        (s2 - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()),
    )
}

/// Analytic moments of the 1-D `pi_bar_{0,s,t}` marginals for a Gaussian model,
/// as `[(mean, var); 3]` for `(x0, xs, xt)`.
pub fn joint_marginals_1d(
    prior: &GaussianPrior,
    lik: &LinearGaussian,
    schedule: &NoiseSchedule,
    s: usize,
    t: usize,
) -> [(f64, f64); 3] {
    let (m, sig) = (prior.mean()[0], prior.cov()[(0, 0)]);
    let (a, y, sy2) = (
        lik.operator()[(0, 0)],
        lik.observation()[0],
        lik.sigma_y().powi(2),
    );
    let (alpha, var) = (schedule.alpha(s), schedule.var(s));
    let prior_s = (alpha * m, alpha * alpha * sig + var);
    let post0_var = 1.0 / (alpha * alpha / var + 1.0 / sig);
    let gain = post0_var * alpha / var;
    let offset = post0_var * m / sig;
    let (a_hat, a_off) = (a * gain, a * offset);
    let prec = 1.0 / prior_s.1 + a_hat * a_hat / sy2;
    let xs_var = 1.0 / prec;
    let xs_mean = xs_var * (prior_s.0 / prior_s.1 + a_hat * (y - a_off) / sy2);
    let ratio = schedule.alpha(t) / alpha;
    let var_ts = 1.0 - ratio * ratio;
    [
        (gain * xs_mean + offset, gain * gain * xs_var + post0_var),
        (xs_mean, xs_var),
        (ratio * xs_mean, ratio * ratio * xs_var + var_ts),
    ]
}

/// Three grids spanning +/- 12 standard deviations of the given marginals.
pub fn grids_for(marginals: &[(f64, f64); 3], n: usize) -> [Grid1d; 3] {
    marginals.map(|(m, var)| Grid1d::centered(m, var.sqrt(), 12.0, n).unwrap())
}

pub fn moments_1d(mean: f64, var: f64) -> GaussianMoments {
    GaussianMoments {
        mean: v(&[mean]),
        cov: mat(1, 1, &[var]),
    }
}

/// `max_ij |a_ij - b_ij|`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
