//! Noise schedule and the Gaussian forward / bridge kernels it induces.
//!
//! `alpha(t)` is the signal scale of the forward marginal,
//! `X_t = alpha(t) X_0 + sqrt(1 - alpha(t)^2) Z`. In the usual DDPM notation this
//! is `sqrt(alpha_bar_t)`; every formula in this crate uses the scale itself.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{standard_normal, LN_2PI};

pub const DEFAULT_HORIZON: usize = 1000;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleFamily {
    /// Per-step variance `1 - (alpha_t / alpha_{t-1})^2` linear in `t` (DDPM).
    Linear,
    /// Cosine schedule of Nichol & Dhariwal.
    Cosine,
    /// Explicit user-provided alphas.
    Custom,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::Cosine => "cosine",
            ScheduleFamily::Custom => "custom",
        })
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "cosine" => Ok(ScheduleFamily::Cosine),
            "custom" => Ok(ScheduleFamily::Custom),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// Coefficients of the bridge `q(x_s | x_0, x_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeParams {
    pub mean_coeff_x0: f64,
    pub mean_coeff_xt: f64,
    pub variance: f64,
}

impl BridgeParams {
    pub fn mean(&self, x0: &DVector<f64>, xt: &DVector<f64>) -> DVector<f64> {
        x0 * self.mean_coeff_x0 + xt * self.mean_coeff_xt
    }
}

/// Decreasing sequence `alpha_0 = 1 > alpha_1 > ... > alpha_T > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(family: ScheduleFamily, horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::InvalidSchedule(format!(
                "horizon must be >= 2, got {horizon}"
            )));
        }
        let betas: Vec<f64> = match family {
            ScheduleFamily::Linear => {
                // Endpoints scale with 1000 / T.
                let scale = DEFAULT_HORIZON as f64 / horizon as f64;
                let (lo, hi) = (scale * BETA_START, scale * BETA_END);
                (1..=horizon)
                    .map(|t| {
                        let frac = (t - 1) as f64 / (horizon - 1) as f64;
                        (lo + frac * (hi - lo)).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleFamily::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / horizon as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=horizon)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                    .collect()
            }
            ScheduleFamily::Custom => {
                return Err(Error::InvalidSchedule(
                    "custom schedules are built from explicit alphas".into(),
                ))
            }
        };
        let mut alphas = Vec::with_capacity(horizon + 1);
        let mut alpha_bar = 1.0f64;
        alphas.push(1.0);
        for beta in betas {
            alpha_bar *= 1.0 - beta;
            alphas.push(alpha_bar.sqrt());
        }
        Self::validated(family, alphas)
    }

    pub fn from_family_name(name: &str, horizon: usize) -> Result<Self> {
        Self::new(name.parse()?, horizon)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        Self::validated(ScheduleFamily::Custom, alphas)
    }

    fn validated(family: ScheduleFamily, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 3 {
            return Err(Error::InvalidSchedule(format!(
                "need at least alpha_0..alpha_2, got {} values",
                alphas.len()
            )));
        }
        if alphas[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alpha_0 must be 1, got {}",
                alphas[0]
            )));
        }
        for (t, w) in alphas.windows(2).enumerate() {
            if !w[1].is_finite() || w[1] >= w[0] || w[1] <= 0.0 {
                return Err(Error::InvalidSchedule(format!(
                    "alphas must be positive and strictly decreasing (alpha_{} = {}, alpha_{} = {})",
                    t,
                    w[0],
                    t + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { family, alphas })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `sigma^2_{t|0} = 1 - alpha_t^2`.
    pub fn var(&self, t: usize) -> f64 {
        1.0 - self.alphas[t] * self.alphas[t]
    }

    fn check_order(&self, s: usize, t: usize, strict: bool) -> Result<()> {
        if t > self.horizon() {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: "t exceeds the horizon",
            });
        }
        if s > t || (strict && s == t) {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: if strict {
                    "requires s < t"
                } else {
                    "requires s <= t"
                },
            });
        }
        Ok(())
    }

    /// `sigma^2_{t|s} = 1 - (alpha_t / alpha_s)^2`, defined for `s <= t`.
    pub fn sigma2(&self, s: usize, t: usize) -> Result<f64> {
        self.check_order(s, t, false)?;
        let ratio = self.alphas[t] / self.alphas[s];
        Ok(1.0 - ratio * ratio)
    }

    /// Draws from `q(x_t | x_s) = N((alpha_t / alpha_s) x_s, sigma^2_{t|s} I)`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        xs: &DVector<f64>,
        s: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        self.check_order(s, t, true)?;
        let ratio = self.alphas[t] / self.alphas[s];
        let std = self.sigma2(s, t)?.sqrt();
        Ok(xs * ratio + standard_normal(xs.len(), rng) * std)
    }

    pub fn forward_log_density(
        &self,
        xt: &DVector<f64>,
        xs: &DVector<f64>,
        s: usize,
        t: usize,
    ) -> Result<f64> {
        self.check_order(s, t, true)?;
        let ratio = self.alphas[t] / self.alphas[s];
        gauss_log_density(xt, &(xs * ratio), self.sigma2(s, t)?)
    }

    pub fn bridge_params(&self, s: usize, t: usize) -> Result<BridgeParams> {
        self.check_order(s, t, true)?;
        let sigma2_ts = self.sigma2(s, t)?;
        let sigma2_t0 = self.var(t);
        let sigma2_s0 = self.var(s);
        let gamma = sigma2_ts / sigma2_t0;
        Ok(BridgeParams {
            mean_coeff_x0: gamma * self.alphas[s],
            mean_coeff_xt: (1.0 - gamma) * self.alphas[s] / self.alphas[t],
            variance: sigma2_ts * sigma2_s0 / sigma2_t0,
        })
    }

    /// Draws from `q(x_s | x_0, x_t)`; returns `x0` unchanged when `s = 0`.
    pub fn bridge_sample<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
        s: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        check_dim(x0.len(), xt.len())?;
        let p = self.bridge_params(s, t)?;
        if s == 0 {
            return Ok(x0.clone());
        }
        Ok(p.mean(x0, xt) + standard_normal(x0.len(), rng) * p.variance.sqrt())
    }

    pub fn bridge_log_density(
        &self,
        xs: &DVector<f64>,
        x0: &DVector<f64>,
        xt: &DVector<f64>,
        s: usize,
        t: usize,
    ) -> Result<f64> {
        let p = self.bridge_params(s, t)?;
        gauss_log_density(xs, &p.mean(x0, xt), p.variance)
    }
}

/// Isotropic Gaussian log-density `log N(x; mean, variance I)`.
pub fn gauss_log_density(x: &DVector<f64>, mean: &DVector<f64>, variance: f64) -> Result<f64> {
    check_dim(mean.len(), x.len())?;
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let d = x.len() as f64;
    Ok(-0.5 * d * (LN_2PI + variance.ln()) - (x - mean).norm_squared() / (2.0 * variance))
}

/// Diagonal Gaussian log-density `log N(x; mean, diag(variances))`.
pub fn gauss_log_density_diag(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    variances: &DVector<f64>,
) -> Result<f64> {
    check_dim(mean.len(), x.len())?;
    check_dim(variances.len(), x.len())?;
    let mut acc = 0.0;
    for i in 0..x.len() {
        let v = variances[i];
        if v.is_nan() || v <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "variance must be positive, got {v}"
            )));
        }
        acc += -0.5 * (LN_2PI + v.ln()) - (x[i] - mean[i]).powi(2) / (2.0 * v);
    }
    Ok(acc)
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    family: String,
    #[serde(rename = "T", default)]
    horizon: Option<usize>,
    #[serde(default)]
    alphas: Option<Vec<f64>>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(repr: ScheduleRepr) -> Result<Self> {
        let family: ScheduleFamily = repr.family.parse()?;
        let schedule = match (repr.alphas, family) {
            (Some(alphas), _) => Self::validated(family, alphas)?,
            (None, ScheduleFamily::Custom) => {
                return Err(Error::InvalidSchedule(
                    "custom schedule requires alphas".into(),
                ))
            }
            (None, family) => Self::new(family, repr.horizon.unwrap_or(DEFAULT_HORIZON))?,
        };
        if let Some(h) = repr.horizon {
            if h != schedule.horizon() {
                return Err(Error::InvalidSchedule(format!(
                    "T = {h} disagrees with {} alphas",
                    schedule.alphas.len()
                )));
            }
        }
        Ok(schedule)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr {
            family: s.family.to_string(),
            horizon: Some(s.horizon()),
            alphas: Some(s.alphas),
        }
    }
}
