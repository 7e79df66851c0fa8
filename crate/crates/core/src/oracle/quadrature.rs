//! One-dimensional trapezoid quadrature for `pi_bar(x_0, x_s, x_t)` and related
//! smoothed densities.
//!
//! The joint factorizes as
//! `p_{0|s}(x_0 | x_s) * p_s(x_s) g_hat_s(x_s) * q_{t|s}(x_t | x_s)`, so every
//! marginal is a sum of products of 2-D tables; the dense 3-D grid is never
//! materialized.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;
use crate::priors::{log_sum_exp, Prior};
use crate::schedule::{gauss_log_density, NoiseSchedule};

/// Minimum points per axis accepted by [`quadrature_joint`].
pub const MIN_JOINT_POINTS: usize = 512;

/// Uniform grid with trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1d {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid1d {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::InvalidParameter(format!(
                "invalid grid [{lo}, {hi}] with {n} points"
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let points = (0..n).map(|i| lo + i as f64 * h).collect();
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Self { points, weights })
    }

    /// `center +/- half_width * scale`.
    pub fn centered(center: f64, scale: f64, half_width: f64, n: usize) -> Result<Self> {
        Self::new(center - half_width * scale, center + half_width * scale, n)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Log of the trapezoid integral of `exp(log_f)`.
    pub fn log_integral(&self, log_f: &[f64]) -> f64 {
        let terms: Vec<f64> = log_f
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| l + w.ln())
            .collect();
        log_sum_exp(&terms)
    }

    /// Normalized density values and mean / variance of `exp(log_f)`.
    pub fn moments(&self, log_f: &[f64]) -> Result<DensityMoments> {
        if log_f.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: log_f.len(),
            });
        }
        let log_z = self.log_integral(log_f);
        if !log_z.is_finite() {
            return Err(Error::NonFinite("quadrature normalizer".into()));
        }
        let density: Vec<f64> = log_f.iter().map(|l| (l - log_z).exp()).collect();
        let mean = self.integrate(
            &density
                .iter()
                .zip(&self.points)
                .map(|(p, x)| p * x)
                .collect::<Vec<_>>(),
        );
        let var = self.integrate(
            &density
                .iter()
                .zip(&self.points)
                .map(|(p, x)| p * (x - mean).powi(2))
                .collect::<Vec<_>>(),
        );
        Ok(DensityMoments {
            mean,
            var,
            log_z,
            density,
        })
    }

    /// Inverse-CDF draw from the piecewise-linear interpolant of `density`.
    pub fn sample<R: Rng + ?Sized>(&self, density: &[f64], rng: &mut R) -> f64 {
        let cdf = self.cdf(density);
        let total = *cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        let j = cdf.partition_point(|&c| c < u).clamp(1, self.len() - 1);
        let (x0, h) = (self.points[j - 1], self.points[j] - self.points[j - 1]);
        let (fa, fb) = (density[j - 1].max(0.0), density[j].max(0.0));
        let target = u - cdf[j - 1];
        // Root of fa * r + (fb - fa) r^2 / (2h) = target in its cancellation-free form.
        let slope = (fb - fa) / h;
        let denom = fa + (fa * fa + 2.0 * slope * target).max(0.0).sqrt();
        let r = if denom > 0.0 {
            2.0 * target / denom
        } else {
            0.5 * h
        };
        x0 + r.clamp(0.0, h)
    }

    fn cdf(&self, density: &[f64]) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for j in 1..self.len() {
            acc += 0.5
                * (density[j - 1].max(0.0) + density[j].max(0.0))
                * (self.points[j] - self.points[j - 1]);
            cdf.push(acc);
        }
        cdf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMoments {
    pub mean: f64,
    pub var: f64,
    pub log_z: f64,
    /// Normalized density at the grid points.
    pub density: Vec<f64>,
}

fn point(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn require_1d(prior: &Prior, likelihood: &Likelihood) -> Result<()> {
    if prior.dim() != 1 || likelihood.input_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "quadrature is one-dimensional, got d = {}",
            prior.dim()
        )));
    }
    Ok(())
}

/// Evaluates `log f(x)` on every grid point.
pub fn tabulate<F: FnMut(&DVector<f64>) -> Result<f64>>(
    grid: &Grid1d,
    mut f: F,
) -> Result<Vec<f64>> {
    grid.points().iter().map(|&x| f(&point(x))).collect()
}

/// Gridded `pi_bar_{0,s,t}` in factorized form.
#[derive(Debug, Clone)]
pub struct JointQuadrature {
    pub x0: Grid1d,
    pub xs: Grid1d,
    pub xt: Grid1d,
    pub s: usize,
    pub t: usize,
    /// `log p_{0|s}(x0_i | xs_j)`, indexed `[j][i]`.
    log_a: Vec<Vec<f64>>,
    /// `log p_s(xs_j) + log g_hat_s(xs_j)`.
    log_b: Vec<f64>,
    /// `log q_{t|s}(xt_k | xs_j)`, indexed `[j][k]`.
    log_c: Vec<Vec<f64>>,
    /// Trapezoid mass of the `x0` and `xt` slices for each `xs_j`.
    mass_a: Vec<f64>,
    mass_c: Vec<f64>,
    log_z: f64,
}

/// Tabulates `pi_bar_{0,s,t}` on the product of three 1-D grids.
pub fn quadrature_joint(
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    s: usize,
    t: usize,
    grids: [Grid1d; 3],
) -> Result<JointQuadrature> {
    require_1d(prior, likelihood)?;
    if s == 0 || s >= t {
        return Err(Error::InvalidTimes {
            s,
            t,
            reason: "joint requires 1 <= s < t",
        });
    }
    if grids.iter().any(|g| g.len() < MIN_JOINT_POINTS) {
        return Err(Error::InvalidParameter(format!(
            "joint grids need >= {MIN_JOINT_POINTS} points per axis"
        )));
    }
    let [x0, xs, xt] = grids;
    let log_p0 = tabulate(&x0, |x| prior.marginal_log_density(schedule, 0, x))?;
    let log_ps = tabulate(&xs, |x| prior.marginal_log_density(schedule, s, x))?;
    let log_g = tabulate(&xs, |x| {
        Ok(likelihood.log_g_hat(prior, schedule, s, x)?.log_value)
    })?;
    let (alpha_s, var_s) = (schedule.alpha(s), schedule.var(s));
    let ratio = schedule.alpha(t) / alpha_s;
    let var_ts = schedule.sigma2(s, t)?;
    let log_gauss = |x: f64, m: f64, v: f64| {
        -0.5 * (crate::gaussian::LN_2PI + v.ln()) - (x - m).powi(2) / (2.0 * v)
    };

    let mut log_a = Vec::with_capacity(xs.len());
    let mut log_c = Vec::with_capacity(xs.len());
    let mut mass_a = Vec::with_capacity(xs.len());
    let mut mass_c = Vec::with_capacity(xs.len());
    for (j, &y) in xs.points().iter().enumerate() {
        let row_a: Vec<f64> = x0
            .points()
            .iter()
            .zip(&log_p0)
            .map(|(&x, lp)| lp + log_gauss(y, alpha_s * x, var_s) - log_ps[j])
            .collect();
        let row_c: Vec<f64> = xt
            .points()
            .iter()
            .map(|&z| log_gauss(z, ratio * y, var_ts))
            .collect();
        mass_a.push(x0.log_integral(&row_a).exp());
        mass_c.push(xt.log_integral(&row_c).exp());
        log_a.push(row_a);
        log_c.push(row_c);
    }
    let log_b: Vec<f64> = log_ps.iter().zip(&log_g).map(|(p, g)| p + g).collect();
    let terms: Vec<f64> = (0..xs.len())
        .map(|j| log_b[j] + xs.weights()[j].ln() + mass_a[j].ln() + mass_c[j].ln())
        .collect();
    let log_z = log_sum_exp(&terms);
    if !log_z.is_finite() {
        return Err(Error::NonFinite("joint normalizer".into()));
    }
    Ok(JointQuadrature {
        x0,
        xs,
        xt,
        s,
        t,
        log_a,
        log_b,
        log_c,
        mass_a,
        mass_c,
        log_z,
    })
}

impl JointQuadrature {
    pub fn log_normalizer(&self) -> f64 {
        self.log_z
    }

    /// Normalized `log pi_bar` at grid indices `(i, j, k)` for `(x0, xs, xt)`.
    pub fn log_density(&self, i: usize, j: usize, k: usize) -> f64 {
        self.log_a[j][i] + self.log_b[j] + self.log_c[j][k] - self.log_z
    }

    fn xs_weight(&self, j: usize) -> f64 {
        (self.log_b[j] - self.log_z).exp()
    }

    pub fn x0_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.x0.len()];
        for j in 0..self.xs.len() {
            let w = self.xs.weights()[j] * self.xs_weight(j) * self.mass_c[j];
            for (o, la) in out.iter_mut().zip(&self.log_a[j]) {
                *o += w * la.exp();
            }
        }
        out
    }

    pub fn xs_marginal(&self) -> Vec<f64> {
        (0..self.xs.len())
            .map(|j| self.xs_weight(j) * self.mass_a[j] * self.mass_c[j])
            .collect()
    }

    pub fn xt_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.xt.len()];
        for j in 0..self.xs.len() {
            let w = self.xs.weights()[j] * self.xs_weight(j) * self.mass_a[j];
            for (o, lc) in out.iter_mut().zip(&self.log_c[j]) {
                *o += w * lc.exp();
            }
        }
        out
    }

    /// Exact draws `(x0, xs, xt)`: `x_s` from the gridded marginal, then the
    /// two exact conditionals given `x_s`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prior: &Prior,
        schedule: &NoiseSchedule,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<[f64; 3]>> {
        let density = self.xs_marginal();
        (0..n)
            .map(|_| {
                let xs = point(self.xs.sample(&density, rng));
                let x0 = prior.backward_sample(schedule, 0, self.s, &xs, rng)?;
                let xt = schedule.forward_sample(&xs, self.s, self.t, rng)?;
                Ok([x0[0], xs[0], xt[0]])
            })
            .collect()
    }
}

/// `log g_t(x_t)` for a general 1-D model by integrating
/// `g(x_0) p_{0|t}(x_0 | x_t)` over `grid`.
pub fn smoothed_log_potential(
    likelihood: &Likelihood,
    prior: &Prior,
    schedule: &NoiseSchedule,
    t: usize,
    xt: f64,
    grid: &Grid1d,
) -> Result<f64> {
    require_1d(prior, likelihood)?;
    if t == 0 {
        return likelihood.log_g0(&point(xt));
    }
    let x = point(xt);
    let log_pt = prior.marginal_log_density(schedule, t, &x)?;
    let (alpha, var) = (schedule.alpha(t), schedule.var(t));
    let vals = tabulate(grid, |x0| {
        Ok(likelihood.log_g0(x0)?
            + prior.log_density(x0)?
            + gauss_log_density(&x, &(x0 * alpha), var)?
            - log_pt)
    })?;
    Ok(grid.log_integral(&vals))
}
