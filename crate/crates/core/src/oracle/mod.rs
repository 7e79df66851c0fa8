//! Exact moments of the MGDM output law in the Gaussian / linear-Gaussian case.
//!
//! With a Gaussian prior, a linear-Gaussian likelihood, exact conditional
//! sampling and a fixed index sequence, every step of the driver is an affine
//! map plus independent Gaussian noise, so the law of `(X0*, x_t)` stays
//! Gaussian and can be propagated in closed form.

pub mod quadrature;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{cholesky, symmetrize, GaussianMoments};
use crate::likelihoods::LinearGaussian;
use crate::priors::GaussianPrior;
use crate::sampler::{
    ConditionalBackend, DenoiserBackend, IndexDistribution, InitKernel, MgdmConfig,
};
use crate::schedule::NoiseSchedule;

/// Affine-Gaussian map `x_0 = gain x_s + offset + N(0, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserMap {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DenoiserMap {
    /// Exact `p_{0|s}`.
    pub fn exact(prior: &GaussianPrior, schedule: &NoiseSchedule, s: usize) -> Result<Self> {
        let (gain, offset, cov) = prior.denoiser_affine(schedule, s)?;
        Ok(Self { gain, offset, cov })
    }

    /// Law of the `M`-step inner DDPM output given `x_s`.
    pub fn ddpm(
        prior: &GaussianPrior,
        schedule: &NoiseSchedule,
        s: usize,
        m: usize,
    ) -> Result<Self> {
        if m < 1 || s < 1 {
            return Err(Error::InvalidParameter(format!(
                "DDPM denoiser needs M >= 1 and s >= 1 (M = {m}, s = {s})"
            )));
        }
        let d = prior.dim();
        let m = m.min(s);
        let mut grid: Vec<usize> = (0..=m)
            .map(|i| (i as f64 * s as f64 / m as f64).round() as usize)
            .collect();
        grid.dedup();
        let mut gain = DMatrix::identity(d, d);
        let mut offset = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for w in grid[1..].windows(2).rev() {
            let (lo, hi) = (w[0], w[1]);
            let (g, o, _) = prior.denoiser_affine(schedule, hi)?;
            let bridge = schedule.bridge_params(lo, hi)?;
            let step = g * bridge.mean_coeff_x0 + DMatrix::identity(d, d) * bridge.mean_coeff_xt;
            gain = &step * gain;
            offset = &step * offset + o * bridge.mean_coeff_x0;
            cov = &step * cov * step.transpose() + DMatrix::identity(d, d) * bridge.variance;
        }
        let (g, o, _) = prior.denoiser_affine(schedule, grid[1])?;
        let mut cov = &g * cov * g.transpose();
        symmetrize(&mut cov);
        Ok(Self {
            gain: &g * gain,
            offset: &g * offset + o,
            cov,
        })
    }
}

/// One Gibbs repetition as `(X0', X_k') = b + B (X0, X_k) + Gamma^{1/2} Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsTransition {
    pub b_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

impl GibbsTransition {
    pub fn apply(&self, joint: &GaussianMoments) -> GaussianMoments {
        let mut out = GaussianMoments {
            mean: &self.b_vec + &self.b_mat * &joint.mean,
            cov: &self.b_mat * &joint.cov * self.b_mat.transpose() + &self.gamma,
        };
        out.project_psd();
        out
    }
}

/// Exact `x_s` conditional as `x_s = M x_0 + N x_t + e + Lambda^{1/2} Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMap {
    pub lambda: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub e: DVector<f64>,
}

impl ConditionalMap {
    pub fn new(
        prior: &GaussianPrior,
        likelihood: &LinearGaussian,
        schedule: &NoiseSchedule,
        tau: usize,
        k: usize,
    ) -> Result<Self> {
        check_dim(prior.dim(), likelihood.operator().ncols())?;
        if tau == 0 || tau >= k {
            return Err(Error::InvalidTimes {
                s: tau,
                t: k,
                reason: "kernels require 1 <= tau < k",
            });
        }
        let d = prior.dim();
        let bridge = schedule.bridge_params(tau, k)?;
        let (a_hat, offset) = likelihood.linearized_potential(prior, schedule, tau)?;
        let noise = likelihood.sigma_y().powi(2);
        let precision =
            DMatrix::identity(d, d) / bridge.variance + a_hat.transpose() * &a_hat / noise;
        let mut lambda = cholesky(&precision, "conditional precision")?.inverse();
        symmetrize(&mut lambda);
        let e = &lambda * (a_hat.transpose() * (likelihood.observation() - offset)) / noise;
        Ok(Self {
            m: &lambda * (bridge.mean_coeff_x0 / bridge.variance),
            n: &lambda * (bridge.mean_coeff_xt / bridge.variance),
            lambda,
            e,
        })
    }
}

/// All blocks of one Gibbs repetition at fixed `(tau, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleKernels {
    pub tau: usize,
    pub k: usize,
    pub conditional: ConditionalMap,
    /// `x_0' = C x_tau + c + N(0, Sigma_c)`.
    pub c_mat: DMatrix<f64>,
    pub c_vec: DVector<f64>,
    pub sigma_c: DMatrix<f64>,
    /// `x_k' = D x_tau + N(0, Sigma_d)`.
    pub d_mat: DMatrix<f64>,
    pub sigma_d: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub k_block: DMatrix<f64>,
    pub transition: GibbsTransition,
}

/// Assembles the transition by integrating `x_tau` out of the joint of
/// `(x_tau, x_0', x_k')`.
pub fn build_kernels(
    prior: &GaussianPrior,
    likelihood: &LinearGaussian,
    schedule: &NoiseSchedule,
    k: usize,
    tau: usize,
) -> Result<OracleKernels> {
    let d = prior.dim();
    let conditional = ConditionalMap::new(prior, likelihood, schedule, tau, k)?;
    let den = DenoiserMap::exact(prior, schedule, tau)?;
    let d_mat = DMatrix::identity(d, d) * (schedule.alpha(k) / schedule.alpha(tau));
    let sigma_d = DMatrix::identity(d, d) * schedule.sigma2(tau, k)?;

    let lambda_inv = cholesky(&conditional.lambda, "conditional covariance")?.inverse();
    let sigma_c_inv = cholesky(&den.cov, "denoiser covariance")?.inverse();
    let sigma_d_inv = cholesky(&sigma_d, "forward covariance")?.inverse();
    let c_weighted = &sigma_c_inv * &den.gain;
    let d_weighted = &sigma_d_inv * &d_mat;
    let psi_inv =
        &lambda_inv + den.gain.transpose() * &c_weighted + d_mat.transpose() * &d_weighted;
    let mut psi = cholesky(&psi_inv, "psi")?.inverse();
    symmetrize(&mut psi);

    let mut gamma_inv = DMatrix::zeros(2 * d, 2 * d);
    gamma_inv
        .view_mut((0, 0), (d, d))
        .copy_from(&(&sigma_c_inv - &c_weighted * &psi * c_weighted.transpose()));
    gamma_inv
        .view_mut((d, d), (d, d))
        .copy_from(&(&sigma_d_inv - &d_weighted * &psi * d_weighted.transpose()));
    let off = -(&c_weighted * &psi * d_weighted.transpose());
    gamma_inv.view_mut((0, d), (d, d)).copy_from(&off);
    gamma_inv
        .view_mut((d, 0), (d, d))
        .copy_from(&off.transpose());
    symmetrize(&mut gamma_inv);
    let mut gamma = cholesky(&gamma_inv, "gamma")?.inverse();
    symmetrize(&mut gamma);

    let mut j = DMatrix::zeros(2 * d, 2 * d);
    j.view_mut((0, 0), (d, d))
        .copy_from(&(&c_weighted * &psi * &lambda_inv));
    j.view_mut((d, d), (d, d))
        .copy_from(&(&d_weighted * &psi * &lambda_inv));
    let mut k_block = DMatrix::zeros(2 * d, 2 * d);
    for r in [0, d] {
        k_block.view_mut((r, 0), (d, d)).copy_from(&conditional.m);
        k_block.view_mut((r, d), (d, d)).copy_from(&conditional.n);
    }
    let mut ee = DVector::zeros(2 * d);
    ee.rows_mut(0, d).copy_from(&conditional.e);
    ee.rows_mut(d, d).copy_from(&conditional.e);
    let mut cd = DVector::zeros(2 * d);
    cd.rows_mut(0, d).copy_from(&den.offset);

    let gj = &gamma * &j;
    let transition = GibbsTransition {
        b_mat: &gj * &k_block,
        b_vec: cd + &gj * ee,
        gamma: gamma.clone(),
    };
    Ok(OracleKernels {
        tau,
        k,
        conditional,
        c_mat: den.gain,
        c_vec: den.offset,
        sigma_c: den.cov,
        d_mat,
        sigma_d,
        psi,
        j,
        k_block,
        transition,
    })
}

/// Transition for an arbitrary affine-Gaussian denoiser, composed directly
/// (no inverse of the denoiser covariance is needed).
pub fn transition_with_denoiser(
    conditional: &ConditionalMap,
    denoiser: &DenoiserMap,
    schedule: &NoiseSchedule,
    tau: usize,
    k: usize,
) -> Result<GibbsTransition> {
    let d = conditional.e.len();
    check_dim(d, denoiser.offset.len())?;
    let ratio = schedule.alpha(k) / schedule.alpha(tau);
    let mut stack = DMatrix::zeros(2 * d, d);
    stack.view_mut((0, 0), (d, d)).copy_from(&denoiser.gain);
    stack
        .view_mut((d, 0), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * ratio));
    let mut mn = DMatrix::zeros(d, 2 * d);
    mn.view_mut((0, 0), (d, d)).copy_from(&conditional.m);
    mn.view_mut((0, d), (d, d)).copy_from(&conditional.n);
    let mut b_vec = &stack * &conditional.e;
    let mut top = b_vec.rows_mut(0, d);
    top += &denoiser.offset;
    let mut gamma = &stack * &conditional.lambda * stack.transpose();
    let mut tl = gamma.view_mut((0, 0), (d, d));
    tl += &denoiser.cov;
    let mut br = gamma.view_mut((d, d), (d, d));
    br += DMatrix::identity(d, d) * schedule.sigma2(tau, k)?;
    symmetrize(&mut gamma);
    Ok(GibbsTransition {
        b_mat: &stack * mn,
        b_vec,
        gamma,
    })
}

/// `x_0 | x_t ~ N(H x_t + h, L)` for the last step that draws `x_s` from
/// `g(x_s) q(x_s | m_t(x_t), x_t)` and returns `m_s(x_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalKernel {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
    pub l_mat: DMatrix<f64>,
}

pub fn final_kernel(
    prior: &GaussianPrior,
    likelihood: &LinearGaussian,
    schedule: &NoiseSchedule,
    s: usize,
    t: usize,
) -> Result<FinalKernel> {
    check_dim(prior.dim(), likelihood.operator().ncols())?;
    if s == 0 || s >= t {
        return Err(Error::InvalidTimes {
            s,
            t,
            reason: "final kernel requires 1 <= s < t",
        });
    }
    let d = prior.dim();
    let a = likelihood.operator();
    let noise = likelihood.sigma_y().powi(2);
    let bridge = schedule.bridge_params(s, t)?;
    let (g_t, o_t, _) = prior.denoiser_affine(schedule, t)?;
    let (g_s, o_s, _) = prior.denoiser_affine(schedule, s)?;
    let precision = DMatrix::identity(d, d) / bridge.variance + a.transpose() * a / noise;
    let mut l_under = cholesky(&precision, "final precision")?.inverse();
    symmetrize(&mut l_under);
    let h_under = &l_under
        * (g_t * bridge.mean_coeff_x0 + DMatrix::identity(d, d) * bridge.mean_coeff_xt)
        / bridge.variance;
    let h_vec_under = &l_under
        * (a.transpose() * likelihood.observation() / noise
            + o_t * (bridge.mean_coeff_x0 / bridge.variance));
    let mut l_mat = &g_s * l_under * g_s.transpose();
    symmetrize(&mut l_mat);
    Ok(FinalKernel {
        h_mat: &g_s * h_under,
        h_vec: &g_s * h_vec_under + o_s,
        l_mat,
    })
}

/// Output moments together with the index sequence they were computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    #[serde(flatten)]
    pub moments: GaussianMoments,
    pub index_sequence: Vec<usize>,
}

/// Index sequence (execution order `i = K, ..., 2`) of a deterministic index distribution.
pub fn oracle_index_sequence(config: &MgdmConfig, horizon: usize) -> Result<Vec<usize>> {
    let ts = config.timesteps(horizon)?;
    let k = config.k;
    let random = || {
        Error::Unsupported(format!(
            "oracle needs a fixed index sequence; '{}' is random (record the realized sequence instead)",
            config.index.name()
        ))
    };
    let mut out = Vec::with_capacity(k - 1);
    for i in (2..=k).rev() {
        let (t, t_prev) = (ts[i], ts[i - 1]);
        let s = match &config.index {
            IndexDistribution::Sequence { indices } => {
                if indices.len() + 1 != k {
                    return Err(Error::InvalidParameter(format!(
                        "index sequence has {} entries, expected K - 1 = {}",
                        indices.len(),
                        k - 1
                    )));
                }
                indices[k - i]
            }
            IndexDistribution::FixedMidpoint { tau } => ((tau + t_prev) / 2).clamp(1, t_prev),
            IndexDistribution::UniformMix { tau, late_fraction } => {
                let late = (k as f64 * late_fraction).floor() as usize;
                if i > late && *tau != t_prev {
                    return Err(random());
                }
                t_prev
            }
            IndexDistribution::Explicit { weights } => {
                let w = weights.get(&t).ok_or_else(|| {
                    Error::InvalidParameter(format!("no explicit index weights for t = {t}"))
                })?;
                let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
                match support.as_slice() {
                    [j] => j + 1,
                    _ => return Err(random()),
                }
            }
            IndexDistribution::NearZero => {
                if t / 5 > 1 {
                    return Err(random());
                }
                1
            }
        };
        if s == 0 || s >= t {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: "index must satisfy 1 <= s < t_i",
            });
        }
        out.push(s);
    }
    Ok(out)
}

fn affine(
    joint: &GaussianMoments,
    p: &DMatrix<f64>,
    shift: &DVector<f64>,
    noise: &DMatrix<f64>,
) -> GaussianMoments {
    let mut out = GaussianMoments {
        mean: p * &joint.mean + shift,
        cov: p * &joint.cov * p.transpose() + noise,
    };
    out.project_psd();
    out
}

/// Applies the outer-step initialization to the joint law of `(X0*, x_{t_{i+1}})`,
/// returning the law of `(x_0, x_{t_i})`. `t_next = None` marks `i = K`.
pub fn apply_init(
    init: InitKernel,
    joint: &GaussianMoments,
    schedule: &NoiseSchedule,
    t: usize,
    t_next: Option<usize>,
) -> Result<GaussianMoments> {
    let d = joint.dim() / 2;
    check_dim(2 * d, joint.dim())?;
    let id = DMatrix::<f64>::identity(d, d);
    let mut p = DMatrix::zeros(2 * d, 2 * d);
    p.view_mut((0, 0), (d, d)).copy_from(&id);
    let mut noise = DMatrix::zeros(2 * d, 2 * d);
    match (init, t_next) {
        (InitKernel::Bridge, None) => return Ok(joint.clone()),
        (InitKernel::Bridge, Some(t_next)) => {
            let b = schedule.bridge_params(t, t_next)?;
            p.view_mut((d, 0), (d, d))
                .copy_from(&(&id * b.mean_coeff_x0));
            p.view_mut((d, d), (d, d))
                .copy_from(&(&id * b.mean_coeff_xt));
            noise
                .view_mut((d, d), (d, d))
                .copy_from(&(&id * b.variance));
        }
        (InitKernel::Forward, _) => {
            p.view_mut((d, 0), (d, d))
                .copy_from(&(&id * schedule.alpha(t)));
            noise
                .view_mut((d, d), (d, d))
                .copy_from(&(&id * schedule.var(t)));
        }
    }
    Ok(affine(joint, &p, &DVector::zeros(2 * d), &noise))
}

/// Joint law of `(X0*, x_T)` right after the initial draw.
pub fn initial_joint(prior: &GaussianPrior, schedule: &NoiseSchedule) -> Result<GaussianMoments> {
    let d = prior.dim();
    let (g, o, _) = prior.denoiser_affine(schedule, schedule.horizon())?;
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&o);
    let mut cov = DMatrix::identity(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d))
        .copy_from(&(&g * g.transpose()));
    cov.view_mut((0, d), (d, d)).copy_from(&g);
    cov.view_mut((d, 0), (d, d)).copy_from(&g.transpose());
    let mut out = GaussianMoments { mean, cov };
    out.project_psd();
    Ok(out)
}

/// Exact mean and covariance of the MGDM output for a deterministic index
/// sequence and exact conditional sampling.
pub fn oracle_recursion(
    prior: &GaussianPrior,
    likelihood: &LinearGaussian,
    schedule: &NoiseSchedule,
    config: &MgdmConfig,
) -> Result<OracleResult> {
    config.validate(schedule.horizon())?;
    check_dim(prior.dim(), likelihood.operator().ncols())?;
    if config.conditional != ConditionalBackend::Exact {
        return Err(Error::Unsupported(format!(
            "oracle models the exact conditional only, got '{}'",
            config.conditional.name()
        )));
    }
    let ts = config.timesteps(schedule.horizon())?;
    let indices = oracle_index_sequence(config, schedule.horizon())?;
    let k = config.k;
    let d = prior.dim();
    let mut joint = initial_joint(prior, schedule)?;
    for (pos, i) in (2..=k).rev().enumerate() {
        let (t, s) = (ts[i], indices[pos]);
        let t_next = if i == k { None } else { Some(ts[i + 1]) };
        joint = apply_init(config.init, &joint, schedule, t, t_next)?;
        let transition = match config.denoiser {
            DenoiserBackend::Exact => build_kernels(prior, likelihood, schedule, t, s)?.transition,
            DenoiserBackend::Ddpm { steps } => {
                let conditional = ConditionalMap::new(prior, likelihood, schedule, s, t)?;
                let denoiser = DenoiserMap::ddpm(prior, schedule, s, steps)?;
                transition_with_denoiser(&conditional, &denoiser, schedule, s, t)?
            }
        };
        for _ in 0..config.r {
            joint = transition.apply(&joint);
        }
    }
    let mut moments = GaussianMoments {
        mean: joint.mean.rows(0, d).into_owned(),
        cov: joint.cov.view((0, 0), (d, d)).into_owned(),
    };
    moments.project_psd();
    Ok(OracleResult {
        moments,
        index_sequence: indices,
    })
}
