mod common;

use common::*;
use mgdm::likelihoods::Likelihood;
use mgdm::oracle::quadrature::{tabulate, Grid1d};
use mgdm::priors::Prior;
use mgdm::schedule::NoiseSchedule;
use mgdm::vi::{self, ConditionalTarget, VariationalParams, ViConfig};
use nalgebra::{DMatrix, DVector};

const S: usize = 300;
const T: usize = 600;

struct Toy {
    prior: Prior,
    lik: Likelihood,
    sched: NoiseSchedule,
    x0: DVector<f64>,
    xt: DVector<f64>,
}

impl Toy {
    fn new() -> Self {
        let (prior, lik) = quadratic_toy(1.5, 0.5);
        Self {
            prior,
            lik,
            sched: linear_schedule(),
            x0: v(&[0.8]),
            xt: v(&[0.1]),
        }
    }

    fn target(&self) -> ConditionalTarget<'_> {
        ConditionalTarget::new(
            &self.lik,
            &self.prior,
            &self.sched,
            S,
            T,
            &self.x0,
            &self.xt,
        )
        .unwrap()
    }
}

/// Normalized target density on a grid.
struct GridTarget {
    grid: Grid1d,
    log_density: Vec<f64>,
}

impl GridTarget {
    fn new(target: &ConditionalTarget<'_>) -> Self {
        let grid = Grid1d::new(-8.0, 8.0, 8001).unwrap();
        let raw = tabulate(&grid, |x| target.log_density(x)).unwrap();
        let log_z = grid.log_integral(&raw);
        Self {
            log_density: raw.iter().map(|l| l - log_z).collect(),
            grid,
        }
    }

    /// `KL(lambda || target)` by quadrature over the same grid.
    fn kl(&self, params: &VariationalParams) -> f64 {
        let vals: Vec<f64> = self
            .grid
            .points()
            .iter()
            .zip(&self.log_density)
            .map(|(&x, lt)| {
                let ll = params.log_density(&v(&[x])).unwrap();
                ll.exp() * (ll - lt)
            })
            .collect();
        self.grid.integrate(&vals)
    }

    fn cdf(&self) -> Vec<f64> {
        let p = self.grid.points();
        let mut out = vec![0.0];
        for j in 1..p.len() {
            let step = 0.5
                * (self.log_density[j - 1].exp() + self.log_density[j].exp())
                * (p[j] - p[j - 1]);
            out.push(out[j - 1] + step);
        }
        out
    }

    fn moments(&self) -> (f64, f64) {
        let m = self.grid.moments(&self.log_density).unwrap();
        (m.mean, m.var)
    }
}

#[test]
fn expected_gradient_matches_finite_differences_of_quadrature_kl() {
    let toy = Toy::new();
    let target = toy.target();
    let quad = GridTarget::new(&target);
    let init = target.bridge_init();
    let params = VariationalParams::new(&init.mu + v(&[0.3]), &init.rho - v(&[0.2])).unwrap();

    let h = 1e-4;
    let shifted = |dmu: f64, drho: f64| {
        VariationalParams::new(&params.mu + v(&[dmu]), &params.rho + v(&[drho])).unwrap()
    };
    let fd_mu = (quad.kl(&shifted(h, 0.0)) - quad.kl(&shifted(-h, 0.0))) / (2.0 * h);
    let fd_rho = (quad.kl(&shifted(0.0, h)) - quad.kl(&shifted(0.0, -h))) / (2.0 * h);

    let mut r = rng(11);
    let n = 100_000;
    let (mut g_mu, mut g_rho) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let g = vi::kl_gradient_estimate(&target, &params, 1, &mut r).unwrap();
        g_mu.push(g.mu[0]);
        g_rho.push(g.rho[0]);
    }
    let (m_mu, v_mu) = mean_var(&g_mu);
    let (m_rho, v_rho) = mean_var(&g_rho);
    let se_mu = (v_mu / n as f64).sqrt();
    let se_rho = (v_rho / n as f64).sqrt();
    assert!(
        (m_mu - fd_mu).abs() < 3.0 * se_mu,
        "mu: {m_mu} vs {fd_mu} (se {se_mu})"
    );
    assert!(
        (m_rho - fd_rho).abs() < 3.0 * se_rho,
        "rho: {m_rho} vs {fd_rho} (se {se_rho})"
    );
}

#[test]
fn reverse_kl_decreases_in_expectation() {
    let toy = Toy::new();
    let target = toy.target();
    let quad = GridTarget::new(&target);
    let before = quad.kl(&target.bridge_init());
    let cfg = ViConfig::new(50, 0.03);
    let seeds = 200;
    let after: f64 = (0..seeds)
        .map(|seed| quad.kl(&vi::fit_gauss_vi(&target, &cfg, &mut rng(1000 + seed)).unwrap()))
        .sum::<f64>()
        / seeds as f64;
    assert!(
        after < before,
        "KL after {after} vs at initialization {before}"
    );
}

#[test]
fn zero_steps_draws_from_the_bridge() {
    let toy = Toy::new();
    let target = toy.target();
    let bridge = toy.sched.bridge_params(S, T).unwrap();
    let init = target.bridge_init();
    assert_eq!(init.mu, bridge.mean(&toy.x0, &toy.xt));
    assert_eq!(init.rho[0], bridge.variance.ln());

    let mut r = rng(12);
    let cfg = ViConfig::new(0, 0.03);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| vi::gauss_vi(&target, &cfg, &mut r).unwrap()[0])
        .collect();
    let (zm, zv) = gaussian_z(&draws, init.mu[0], bridge.variance);
    assert!(zm < 4.0 && zv < 4.0, "z = ({zm}, {zv})");
}

#[test]
fn diagonal_variances_agree_when_conditional_is_diagonal() {
    let sched = linear_schedule();
    let g = mgdm::priors::GaussianPrior::isotropic(v(&[0.2, -0.1]), 0.9).unwrap();
    let lin =
        mgdm::likelihoods::LinearGaussian::new(DMatrix::identity(2, 2) * 1.5, v(&[0.7, -0.5]), 0.4)
            .unwrap();
    let prior = Prior::Gaussian(g.clone());
    let lik = Likelihood::Linear(lin.clone());
    let (s, t) = (200, 450);
    let (x0, xt) = (v(&[0.5, 0.1]), v(&[-0.2, 0.4]));
    let exact = vi::exact_conditional(&lin, &g, &sched, s, t, &x0, &xt).unwrap();
    assert!(exact.cov[(0, 1)].abs() < 1e-14);

    let target = ConditionalTarget::new(&lik, &prior, &sched, s, t, &x0, &xt).unwrap();
    let cfg = ViConfig {
        mc_samples: 16,
        ..ViConfig::new(2000, 0.005)
    };
    let seeds = 50;
    let mut mean_var = DVector::zeros(2);
    let mut mean_mu = DVector::zeros(2);
    for seed in 0..seeds {
        let fit = vi::fit_gauss_vi(&target, &cfg, &mut rng(seed)).unwrap();
        mean_var += fit.variances() / seeds as f64;
        mean_mu += fit.mu / seeds as f64;
    }
    for i in 0..2 {
        let rel = (mean_var[i] / exact.cov[(i, i)] - 1.0).abs();
        assert!(
            rel < 0.05,
            "variance {i}: {} vs {}",
            mean_var[i],
            exact.cov[(i, i)]
        );
    }
    assert!((&mean_mu - &exact.mean).norm() / exact.mean.norm() < 0.02);
}

#[test]
fn long_mh_chain_matches_quadrature_target() {
    let toy = Toy::new();
    let target = toy.target();
    let quad = GridTarget::new(&target);
    let (mean, var) = quad.moments();
    let proposal = VariationalParams::new(v(&[mean]), v(&[(1.5 * var).ln()])).unwrap();

    let mut r = rng(13);
    let n = 100_000;
    let mut x = proposal.sample(&mut r);
    let mut chain = Vec::with_capacity(n);
    for _ in 0..n {
        x = vi::mh_correct(&target, &x, &proposal, 1, &mut r)
            .unwrap()
            .state;
        chain.push(x[0]);
    }
    chain.sort_by(f64::total_cmp);

    let cdf = quad.cdf();
    let diffs: Vec<f64> = quad
        .grid
        .points()
        .iter()
        .zip(&cdf)
        .map(|(&p, f)| (chain.partition_point(|&c| c <= p) as f64 / n as f64 - f).abs())
        .collect();
    let w1 = quad.grid.integrate(&diffs);
    assert!(w1 < 0.02, "W1 = {w1}");
}

#[test]
fn nonlinear_toy_target_is_bimodal() {
    let toy = Toy::new();
    let quad = GridTarget::new(&toy.target());
    let d = &quad.log_density;
    let peaks = (1..d.len() - 1)
        .filter(|&j| d[j] > d[j - 1] && d[j] > d[j + 1] && d[j].exp() > 0.01)
        .count();
    assert_eq!(peaks, 2);
}
