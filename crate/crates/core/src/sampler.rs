//! Gibbs step over the extended `(x_0, x_s, x_t)` target, the MGDM driver, the
//! inner DDPM denoiser and the DPS baseline.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::standard_normal;
use crate::likelihoods::Likelihood;
use crate::priors::Prior;
use crate::schedule::NoiseSchedule;
use crate::vi::{self, AdamConfig, ConditionalTarget, ViConfig};

pub const DEFAULT_TAU: usize = 10;
pub const DEFAULT_LATE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub x0: DVector<f64>,
    pub xs: DVector<f64>,
    pub xt: DVector<f64>,
    pub s: usize,
    pub t: usize,
}

impl GibbsState {
    pub fn new(
        x0: DVector<f64>,
        xs: DVector<f64>,
        xt: DVector<f64>,
        s: usize,
        t: usize,
    ) -> Result<Self> {
        if s == 0 || s >= t {
            return Err(Error::InvalidTimes {
                s,
                t,
                reason: "gibbs state requires 1 <= s < t",
            });
        }
        check_dim(x0.len(), xs.len())?;
        check_dim(x0.len(), xt.len())?;
        Ok(Self { x0, xs, xt, s, t })
    }
}

/// How the intermediate index `s` is drawn at each outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexDistribution {
    /// Uniform on `[tau, t_{i-1}]` for the first steps, `s = t_{i-1}` once
    /// `i <= floor(K * late_fraction)`.
    UniformMix {
        #[serde(default = "default_tau")]
        tau: usize,
        #[serde(default = "default_late_fraction")]
        late_fraction: f64,
    },
    /// Uniform on `[1, max(1, floor(t_i / 5))]`.
    NearZero,
    /// `s = floor((tau + t_{i-1}) / 2)`.
    FixedMidpoint {
        #[serde(default = "default_tau")]
        tau: usize,
    },
    /// Categorical weights over `{1, ..., t_{i-1}}`, keyed by `t_i`.
    Explicit { weights: BTreeMap<usize, Vec<f64>> },
    /// Fixed indices in execution order (`i = K, ..., 2`).
    Sequence { indices: Vec<usize> },
}

fn default_tau() -> usize {
    DEFAULT_TAU
}

fn default_late_fraction() -> f64 {
    DEFAULT_LATE_FRACTION
}

impl Default for IndexDistribution {
    fn default() -> Self {
        IndexDistribution::UniformMix {
            tau: DEFAULT_TAU,
            late_fraction: DEFAULT_LATE_FRACTION,
        }
    }
}

impl IndexDistribution {
    pub fn name(&self) -> &'static str {
        match self {
            IndexDistribution::UniformMix { .. } => "uniform_mix",
            IndexDistribution::NearZero => "near_zero",
            IndexDistribution::FixedMidpoint { .. } => "fixed_midpoint",
            IndexDistribution::Explicit { .. } => "explicit",
            IndexDistribution::Sequence { .. } => "sequence",
        }
    }

    /// True when the realized index sequence is fixed in advance.
    pub fn is_deterministic(&self) -> bool {
        match self {
            IndexDistribution::FixedMidpoint { .. } | IndexDistribution::Sequence { .. } => true,
            IndexDistribution::Explicit { weights } => weights
                .values()
                .all(|w| w.iter().filter(|&&p| p > 0.0).count() <= 1),
            IndexDistribution::UniformMix { .. } | IndexDistribution::NearZero => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            IndexDistribution::UniformMix { tau, late_fraction } => {
                if *tau < 1 {
                    return Err(Error::InvalidParameter("tau must be >= 1".into()));
                }
                if !(0.0..=1.0).contains(late_fraction) {
                    return Err(Error::InvalidParameter(format!(
                        "late_fraction must lie in [0, 1], got {late_fraction}"
                    )));
                }
            }
            IndexDistribution::FixedMidpoint { tau } if *tau < 1 => {
                return Err(Error::InvalidParameter("tau must be >= 1".into()));
            }
            IndexDistribution::Explicit { weights } => {
                for (t, w) in weights {
                    let total: f64 = w.iter().sum();
                    if w.len() + 1 != *t && !(w.is_empty() && *t <= 1) {
                        return Err(Error::InvalidParameter(format!(
                            "weights for t = {t} must cover 1..{} ({} given)",
                            t.saturating_sub(1),
                            w.len()
                        )));
                    }
                    if w.iter().any(|&p| p.is_nan() || p < 0.0) || (total - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidParameter(format!(
                            "weights for t = {t} are not a simplex"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Draws `s` for outer loop position `i` (running `K, ..., 2`).
pub fn sample_index<R: Rng + ?Sized>(
    dist: &IndexDistribution,
    i: usize,
    t_i: usize,
    t_prev: usize,
    k: usize,
    rng: &mut R,
) -> Result<usize> {
    if t_prev == 0 || t_prev >= t_i {
        return Err(Error::InvalidTimes {
            s: t_prev,
            t: t_i,
            reason: "timesteps must satisfy 1 <= t_{i-1} < t_i",
        });
    }
    let s = match dist {
        IndexDistribution::UniformMix { tau, late_fraction } => {
            let late = (k as f64 * late_fraction).floor() as usize;
            if i > late {
                if t_prev < *tau {
                    return Err(Error::InvalidTimes {
                        s: *tau,
                        t: t_prev,
                        reason: "uniform index range is empty",
                    });
                }
                rng.random_range(*tau..=t_prev)
            } else {
                t_prev
            }
        }
        IndexDistribution::NearZero => rng.random_range(1..=(t_i / 5).max(1)),
        IndexDistribution::FixedMidpoint { tau } => ((tau + t_prev) / 2).clamp(1, t_prev),
        IndexDistribution::Explicit { weights } => {
            let w = weights.get(&t_i).ok_or_else(|| {
                Error::InvalidParameter(format!("no explicit index weights for t = {t_i}"))
            })?;
            if w.len() != t_prev {
                return Err(Error::InvalidParameter(format!(
                    "weights for t = {t_i} must cover 1..{t_prev}"
                )));
            }
            crate::priors::sample_categorical(w, rng) + 1
        }
        IndexDistribution::Sequence { indices } => {
            if indices.len() + 1 != k {
                return Err(Error::InvalidParameter(format!(
                    "index sequence has {} entries, expected K - 1 = {}",
                    indices.len(),
                    k.saturating_sub(1)
                )));
            }
            indices[k - i]
        }
    };
    if s == 0 || s >= t_i {
        return Err(Error::InvalidTimes {
            s,
            t: t_i,
            reason: "sampled index must satisfy 1 <= s < t_i",
        });
    }
    Ok(s)
}

/// Sampler for the `x_s` full conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionalBackend {
    /// Closed form; Gaussian prior with linear-Gaussian likelihood only.
    Exact,
    #[default]
    Vi,
    /// Variational fit followed by `steps` independent MH moves.
    ViMh { steps: usize },
}

impl ConditionalBackend {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionalBackend::Exact => "exact",
            ConditionalBackend::Vi => "vi",
            ConditionalBackend::ViMh { .. } => "vi-mh",
        }
    }
}

/// Sampler for the `x_0` full conditional `p_{0|s}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserBackend {
    /// Exact draw from `p_{0|s}`.
    Exact,
    /// `M`-step DDPM with the plugged-in denoiser.
    Ddpm { steps: usize },
}

impl Default for DenoiserBackend {
    fn default() -> Self {
        DenoiserBackend::Ddpm { steps: 20 }
    }
}

/// How `x_{t_i}` is initialized before the Gibbs steps at outer position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKernel {
    /// Bridge `q(. | X0*, x_{t_{i+1}})`; the initial draw is used at `i = K`.
    #[default]
    Bridge,
    /// Forward noising `q_{t_i|0}(. | X0*)` at every `i`.
    Forward,
}

/// Two-phase VI hyperparameters over the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViSchedule {
    /// Learning rate for `i >= floor(3K / 4)`.
    pub early_learning_rate: f64,
    pub learning_rate: f64,
    /// Gradient steps for `i <= floor(K / 4)`.
    pub late_steps: usize,
    pub steps: usize,
    #[serde(default = "one")]
    pub mc_samples: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn one() -> usize {
    1
}

impl Default for ViSchedule {
    fn default() -> Self {
        Self {
            early_learning_rate: 0.01,
            learning_rate: 0.03,
            late_steps: 20,
            steps: 5,
            mc_samples: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl ViSchedule {
    /// Same settings at every outer step.
    pub fn constant(config: ViConfig) -> Self {
        Self {
            early_learning_rate: config.learning_rate,
            learning_rate: config.learning_rate,
            late_steps: config.steps,
            steps: config.steps,
            mc_samples: config.mc_samples,
            adam: config.adam,
        }
    }

    pub fn at(&self, i: usize, k: usize) -> ViConfig {
        let learning_rate = if i >= 3 * k / 4 {
            self.early_learning_rate
        } else {
            self.learning_rate
        };
        let steps = if i <= k / 4 {
            self.late_steps
        } else {
            self.steps
        };
        ViConfig {
            steps,
            learning_rate,
            mc_samples: self.mc_samples,
            adam: self.adam,
        }
    }
}

/// Settings for a single Gibbs sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsConfig {
    pub conditional: ConditionalBackend,
    pub vi: ViConfig,
    pub denoiser: DenoiserBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgdmConfig {
    /// Number of outer diffusion timesteps `K`.
    #[serde(rename = "K")]
    pub k: usize,
    /// Gibbs repetitions `R` per outer step.
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(default)]
    pub index: IndexDistribution,
    #[serde(default)]
    pub conditional: ConditionalBackend,
    #[serde(default)]
    pub denoiser: DenoiserBackend,
    #[serde(default)]
    pub vi: ViSchedule,
    #[serde(default)]
    pub init: InitKernel,
    /// Overrides the evenly spaced grid when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<usize>>,
}

impl Default for MgdmConfig {
    fn default() -> Self {
        Self {
            k: 100,
            r: 1,
            index: IndexDistribution::default(),
            conditional: ConditionalBackend::default(),
            denoiser: DenoiserBackend::default(),
            vi: ViSchedule::default(),
            init: InitKernel::default(),
            timesteps: None,
        }
    }
}

impl MgdmConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!(
                "K must be >= 2, got {}",
                self.k
            )));
        }
        if self.r < 1 {
            return Err(Error::InvalidParameter("R must be >= 1".into()));
        }
        if let DenoiserBackend::Ddpm { steps: 0 } = self.denoiser {
            return Err(Error::InvalidParameter("M must be >= 1".into()));
        }
        self.index.validate()?;
        self.vi.at(self.k, self.k).validate()?;
        self.vi.at(1, self.k).validate()?;
        self.timesteps(horizon).map(|_| ())
    }

    /// `(t_1, ..., t_K)`, returned with a leading `t_0 = 0` so that `ts[i] = t_i`.
    pub fn timesteps(&self, horizon: usize) -> Result<Vec<usize>> {
        let ts = match &self.timesteps {
            Some(ts) => {
                if ts.len() != self.k {
                    return Err(Error::InvalidParameter(format!(
                        "{} timesteps given for K = {}",
                        ts.len(),
                        self.k
                    )));
                }
                std::iter::once(0).chain(ts.iter().copied()).collect()
            }
            None => timesteps(self.k, horizon)?,
        };
        validate_timesteps(&ts, horizon)?;
        Ok(ts)
    }
}

/// Evenly spaced grid `t_i = round(i T / K)` with `t_1 >= 2` and `t_K = T`;
/// index 0 holds `t_0 = 0`.
pub fn timesteps(k: usize, horizon: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    let mut ts = vec![0];
    for i in 1..=k {
        let t = (i as f64 * horizon as f64 / k as f64).round() as usize;
        ts.push(if i == 1 { t.max(2) } else { t });
    }
    ts[k] = horizon;
    validate_timesteps(&ts, horizon)?;
    Ok(ts)
}

fn validate_timesteps(ts: &[usize], horizon: usize) -> Result<()> {
    let ok = ts.len() >= 2
        && ts[0] == 0
        && ts[1] >= 2
        && *ts.last().unwrap() == horizon
        && ts.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "timesteps must be strictly increasing with t_1 >= 2 and t_K = {horizon}"
        )))
    }
}

/// Inner `M`-step DDPM approximating a draw from `p_{0|s}(. | x_s)`.
pub fn ddpm_denoise<R: Rng + ?Sized>(
    prior: &Prior,
    schedule: &NoiseSchedule,
    xs: &DVector<f64>,
    s: usize,
    m: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if m < 1 {
        return Err(Error::InvalidParameter("M must be >= 1".into()));
    }
    if s < 1 || s > schedule.horizon() {
        return Err(Error::InvalidTimes {
            s: 0,
            t: s,
            reason: "denoising requires 1 <= s <= T",
        });
    }
    check_dim(prior.dim(), xs.len())?;
    let m = m.min(s);
    let mut grid: Vec<usize> = (0..=m)
        .map(|i| (i as f64 * s as f64 / m as f64).round() as usize)
        .collect();
    grid.dedup();
    let mut x = xs.clone();
    for w in grid[1..].windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let x0 = prior.denoise(schedule, hi, &x)?.value;
        x = schedule.bridge_sample(&x0, &x, lo, hi, rng)?;
    }
    Ok(prior.denoise(schedule, grid[1], &x)?.value)
}

/// One sweep of the three full conditionals: `x_s`, then `x_t`, then `x_0`.
pub fn gibbs_step<R: Rng + ?Sized>(
    state: GibbsState,
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    config: &GibbsConfig,
    rng: &mut R,
) -> Result<GibbsState> {
    let GibbsState { x0, xt, s, t, .. } = state;
    let xs = sample_conditional(likelihood, prior, schedule, s, t, &x0, &xt, config, rng)?;
    let xt = schedule.forward_sample(&xs, s, t, rng)?;
    let x0 = match config.denoiser {
        DenoiserBackend::Exact => prior.backward_sample(schedule, 0, s, &xs, rng)?,
        DenoiserBackend::Ddpm { steps } => ddpm_denoise(prior, schedule, &xs, s, steps, rng)?,
    };
    Ok(GibbsState { x0, xs, xt, s, t })
}

#[allow(clippy::too_many_arguments)]
fn sample_conditional<R: Rng + ?Sized>(
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    s: usize,
    t: usize,
    x0: &DVector<f64>,
    xt: &DVector<f64>,
    config: &GibbsConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    match config.conditional {
        ConditionalBackend::Exact => {
            let (Likelihood::Linear(lin), Prior::Gaussian(g)) = (likelihood, prior) else {
                return Err(Error::Unsupported(
                    "exact conditional needs a Gaussian prior and a linear-Gaussian likelihood"
                        .into(),
                ));
            };
            vi::exact_conditional(lin, g, schedule, s, t, x0, xt)?.sample(rng)
        }
        ConditionalBackend::Vi => {
            let target = ConditionalTarget::new(likelihood, prior, schedule, s, t, x0, xt)?;
            vi::gauss_vi(&target, &config.vi, rng)
        }
        ConditionalBackend::ViMh { steps } => {
            let target = ConditionalTarget::new(likelihood, prior, schedule, s, t, x0, xt)?;
            let params = vi::fit_gauss_vi(&target, &config.vi, rng)?;
            let start = params.sample(rng);
            Ok(vi::mh_correct(&target, &start, &params, steps, rng)?.state)
        }
    }
}

fn check_backends(
    likelihood: &Likelihood,
    prior: &Prior,
    conditional: ConditionalBackend,
) -> Result<()> {
    check_dim(prior.dim(), likelihood.input_dim())?;
    if conditional == ConditionalBackend::Exact
        && (likelihood.as_linear().is_none() || prior.as_gaussian().is_none())
    {
        return Err(Error::Unsupported(
            "exact conditional needs a Gaussian prior and a linear-Gaussian likelihood".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgdmOutput {
    pub x0: DVector<f64>,
    /// Realized `s` per outer step, in execution order `i = K, ..., 2`.
    pub indices: Vec<usize>,
}

/// Full MGDM run; returns the final `X0*` and the realized index sequence.
pub fn mgdm_run<R: Rng + ?Sized>(
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    config: &MgdmConfig,
    rng: &mut R,
) -> Result<MgdmOutput> {
    config.validate(schedule.horizon())?;
    check_backends(likelihood, prior, config.conditional)?;
    let k = config.k;
    let ts = config.timesteps(schedule.horizon())?;
    let d = prior.dim();

    let x_init = standard_normal(d, rng);
    let mut x0_star = prior.denoise(schedule, ts[k], &x_init)?.value;
    let mut x_next = x_init;
    let mut indices = Vec::with_capacity(k - 1);
    for i in (2..=k).rev() {
        let (t, t_prev) = (ts[i], ts[i - 1]);
        let s = sample_index(&config.index, i, t, t_prev, k, rng)?;
        indices.push(s);
        let xt = match config.init {
            InitKernel::Bridge if i == k => x_next.clone(),
            InitKernel::Bridge => schedule.bridge_sample(&x0_star, &x_next, t, ts[i + 1], rng)?,
            InitKernel::Forward => schedule.forward_sample(&x0_star, 0, t, rng)?,
        };
        let gibbs = GibbsConfig {
            conditional: config.conditional,
            vi: config.vi.at(i, k),
            denoiser: config.denoiser,
        };
        let mut state = GibbsState {
            x0: x0_star.clone(),
            xs: xt.clone(),
            xt,
            s,
            t,
        };
        for _ in 0..config.r {
            state = gibbs_step(state, likelihood, prior, schedule, &gibbs, rng)?;
        }
        x0_star = state.x0;
        x_next = state.xt;
    }
    if x0_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MGDM output".into()));
    }
    Ok(MgdmOutput {
        x0: x0_star,
        indices,
    })
}

/// DDPM over the `K`-point grid with `zeta * grad log g_hat_t` added to each
/// transition mean.
pub fn dps_run<R: Rng + ?Sized>(
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    k: usize,
    zeta: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !zeta.is_finite() || zeta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "zeta must be finite and >= 0, got {zeta}"
        )));
    }
    check_dim(prior.dim(), likelihood.input_dim())?;
    let ts = timesteps(k, schedule.horizon())?;
    let d = prior.dim();
    let mut x = standard_normal(d, rng);
    for i in (2..=k).rev() {
        let (t, t_prev) = (ts[i], ts[i - 1]);
        let x0 = prior.denoise(schedule, t, &x)?.value;
        let bridge = schedule.bridge_params(t_prev, t)?;
        let mut mean = bridge.mean(&x0, &x);
        if zeta > 0.0 {
            mean += likelihood.log_g_hat(prior, schedule, t, &x)?.gradient * zeta;
        }
        x = mean + standard_normal(d, rng) * bridge.variance.sqrt();
    }
    Ok(prior.denoise(schedule, ts[1], &x)?.value)
}
