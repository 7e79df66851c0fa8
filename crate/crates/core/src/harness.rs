//! Seeded experiment runner behind the `mgdm` CLI.
//!
//! Every run draws from its own `ChaCha8Rng` whose seed is derived from the
//! master seed and the run index, so results do not depend on thread count or
//! scheduling. Output files embed the config hash and master seed; the
//! `summary.json` written by [`write_run_outputs`] is itself a valid config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMoments;
use crate::likelihoods::{Likelihood, LinearGaussian};
use crate::metrics::{self, SampleSet, DEFAULT_PROJECTIONS};
use crate::oracle::{self, OracleResult};
use crate::priors::{GaussianPrior, Prior};
use crate::sampler::{self, ConditionalBackend, IndexDistribution, MgdmConfig, ViSchedule};
use crate::schedule::{NoiseSchedule, ScheduleFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpsConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerConfig {
    Mgdm(MgdmConfig),
    Dps(DpsConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(rename = "R", default, skip_serializing_if = "Vec::is_empty")]
    pub r: Vec<usize>,
    #[serde(rename = "G", default, skip_serializing_if = "Vec::is_empty")]
    pub g: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub index: Vec<IndexDistribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "default_projections")]
    pub projections: usize,
    /// Draws from the exact posterior used as the sliced-W2 reference.
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
}

fn default_projections() -> usize {
    DEFAULT_PROJECTIONS
}

fn default_reference_samples() -> usize {
    10_000
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            projections: DEFAULT_PROJECTIONS,
            reference_samples: default_reference_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub prior: Prior,
    pub likelihood: Likelihood,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub n_runs: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    /// Accepts either a bare config or a `summary.json` that embeds one.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let config = match value.get("config") {
            Some(inner) if value.get("config_hash").is_some() => inner.clone(),
            _ => value,
        };
        let config: Self = serde_json::from_value(config)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(Error::InvalidParameter("n_runs must be >= 1".into()));
        }
        if self.prior.dim() != self.likelihood.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.prior.dim(),
                got: self.likelihood.input_dim(),
            });
        }
        match &self.sampler {
            SamplerConfig::Mgdm(cfg) => {
                cfg.validate(self.schedule.horizon())?;
                if cfg.conditional == ConditionalBackend::Exact
                    && (self.prior.as_gaussian().is_none() || self.likelihood.as_linear().is_none())
                {
                    return Err(Error::Unsupported(
                        "exact backend needs a Gaussian prior and a linear-Gaussian likelihood"
                            .into(),
                    ));
                }
            }
            SamplerConfig::Dps(cfg) => {
                sampler::timesteps(cfg.k, self.schedule.horizon())?;
                if cfg.zeta.is_nan() || cfg.zeta < 0.0 {
                    return Err(Error::InvalidParameter("zeta must be >= 0".into()));
                }
            }
        }
        if self.metrics.projections == 0 || self.metrics.reference_samples == 0 {
            return Err(Error::InvalidParameter(
                "metric sample sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn with_backend(mut self, backend: ConditionalBackend) -> Self {
        if let SamplerConfig::Mgdm(cfg) = &mut self.sampler {
            cfg.conditional = backend;
        }
        self
    }

    /// Built-in quick check: 1-D Gaussian model, `K = 10`, `R = 1`, 10 runs.
    pub fn smoke() -> Self {
        let prior =
            Prior::Gaussian(GaussianPrior::isotropic(DVector::zeros(1), 1.0).expect("valid prior"));
        let likelihood =
            LinearGaussian::new(DMatrix::identity(1, 1), DVector::from_element(1, 1.0), 0.5)
                .expect("valid likelihood")
                .into();
        Self {
            prior,
            likelihood,
            schedule: NoiseSchedule::new(ScheduleFamily::Linear, 1000).expect("valid schedule"),
            sampler: SamplerConfig::Mgdm(MgdmConfig {
                k: 10,
                r: 1,
                ..MgdmConfig::default()
            }),
            n_runs: 10,
            master_seed: 0,
            output: None,
            sweep: SweepAxes::default(),
            metrics: MetricsConfig {
                projections: 64,
                reference_samples: 1000,
            },
        }
    }
}

/// Per-run stream seed: the first 8 bytes of `SHA-256(master_seed || run_index)`.
pub fn run_seed(master_seed: u64, run_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(run_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed reserved for metric randomness (reference draws and projections).
fn metric_seed(master_seed: u64) -> u64 {
    run_seed(master_seed, u64::MAX)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub x0: DVector<f64>,
    pub indices: Vec<usize>,
}

/// Executes `n_runs` independent runs of the configured sampler.
pub fn execute_runs(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let pool = pool(jobs)?;
    pool.install(|| {
        (0..config.n_runs)
            .into_par_iter()
            .map(|run_id| {
                let seed = run_seed(config.master_seed, run_id as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (x0, indices) = match &config.sampler {
                    SamplerConfig::Mgdm(cfg) => {
                        let out = sampler::mgdm_run(
                            &config.likelihood,
                            &config.prior,
                            &config.schedule,
                            cfg,
                            &mut rng,
                        )?;
                        (out.x0, out.indices)
                    }
                    SamplerConfig::Dps(cfg) => (
                        sampler::dps_run(
                            &config.likelihood,
                            &config.prior,
                            &config.schedule,
                            cfg.k,
                            cfg.zeta,
                            &mut rng,
                        )?,
                        Vec::new(),
                    ),
                };
                if x0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("run {run_id} output")));
                }
                Ok(RunRecord {
                    run_id,
                    seed,
                    x0,
                    indices,
                })
            })
            .collect()
    })
}

/// Exact posterior, when the model admits one in closed form.
pub fn exact_posterior(config: &ExperimentConfig) -> Option<Prior> {
    config
        .likelihood
        .as_linear()
        .and_then(|lin| config.prior.exact_posterior(lin).ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_runs: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sliced_w2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_error: Option<f64>,
    /// KL from the Gaussian fit of the outputs to the posterior (Gaussian posteriors only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian_kl: Option<f64>,
}

pub fn aggregate(config: &ExperimentConfig, records: &[RunRecord]) -> Result<AggregateMetrics> {
    let set = SampleSet::from_vectors(&records.iter().map(|r| r.x0.clone()).collect::<Vec<_>>())?;
    let moments = set.moments();
    let mut out = AggregateMetrics {
        n_runs: records.len(),
        mean: moments.mean.iter().copied().collect(),
        cov: crate::gaussian::matrix_to_rows(&moments.cov),
        sliced_w2: None,
        mean_error: None,
        cov_error: None,
        gaussian_kl: None,
    };
    if let Some(post) = exact_posterior(config) {
        let mut rng = ChaCha8Rng::seed_from_u64(metric_seed(config.master_seed));
        let reference: Vec<DVector<f64>> = (0..config.metrics.reference_samples)
            .map(|_| post.sample(&mut rng))
            .collect::<Result<_>>()?;
        let reference = SampleSet::from_vectors(&reference)?;
        out.sliced_w2 = Some(metrics::sliced_wasserstein2(
            &set,
            &reference,
            config.metrics.projections,
            &mut rng,
        )?);
        let post_moments = post.moments();
        let errors = metrics::moment_errors(&set, &post_moments)?;
        out.mean_error = Some(errors.mean_error);
        out.cov_error = Some(errors.cov_error);
        if matches!(post, Prior::Gaussian(_)) && records.len() > set.dim() {
            out.gaussian_kl = metrics::gaussian_kl(&moments, &post_moments).ok();
        }
    }
    Ok(out)
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn g_label(cfg: &SamplerConfig) -> String {
    match cfg {
        SamplerConfig::Mgdm(c) if c.conditional == ConditionalBackend::Exact => String::new(),
        SamplerConfig::Mgdm(c) if c.vi.steps == c.vi.late_steps => c.vi.steps.to_string(),
        SamplerConfig::Mgdm(c) => format!("{}|{}", c.vi.steps, c.vi.late_steps),
        SamplerConfig::Dps(_) => String::new(),
    }
}

fn labels(cfg: &SamplerConfig) -> (String, String, String) {
    match cfg {
        SamplerConfig::Mgdm(c) => (c.r.to_string(), g_label(cfg), c.index.name().to_string()),
        SamplerConfig::Dps(_) => (String::new(), String::new(), "dps".to_string()),
    }
}

fn header_lines(config: &ExperimentConfig) -> String {
    format!(
        "# config_hash={}\n# master_seed={}\n",
        config.hash(),
        config.master_seed
    )
}

/// `runs.csv`: one row per run, ordered by `run_id`.
pub fn runs_csv(config: &ExperimentConfig, records: &[RunRecord]) -> Result<String> {
    let posterior = exact_posterior(config);
    let post_mean = posterior.as_ref().map(|p| p.moments().mean);
    let d = config.prior.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["run_id", "seed", "R", "G", "index_dist"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if posterior.is_some() {
        header.push("log_posterior".into());
        header.push("dist_to_posterior_mean".into());
    }
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    let (r, g, index) = labels(&config.sampler);
    for rec in records {
        let mut row = vec![
            rec.run_id.to_string(),
            rec.seed.to_string(),
            r.clone(),
            g.clone(),
            index.clone(),
        ];
        if let (Some(post), Some(mean)) = (&posterior, &post_mean) {
            row.push(fmt_f64(post.log_density(&rec.x0)?));
            row.push(fmt_f64((&rec.x0 - mean).norm()));
        }
        row.extend(rec.x0.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    Ok(header_lines(config) + &body)
}

fn summary_json(config: &ExperimentConfig, aggregate: &AggregateMetrics) -> Result<String> {
    let value = json!({
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "config": config,
        "metrics": aggregate,
    });
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn output_dir(config: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("mgdm-out"))
}

/// Runs the experiment and writes `runs.csv` and `summary.json`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<PathBuf> {
    let dir = output_dir(config, out);
    fs::create_dir_all(&dir)?;
    info!("running {} runs (config {})", config.n_runs, config.hash());
    let records = execute_runs(config, jobs)?;
    let agg = aggregate(config, &records)?;
    write_run_outputs(config, &records, &agg, &dir)?;
    Ok(dir)
}

pub fn write_run_outputs(
    config: &ExperimentConfig,
    records: &[RunRecord],
    aggregate: &AggregateMetrics,
    dir: &Path,
) -> Result<()> {
    fs::write(dir.join("runs.csv"), runs_csv(config, records)?)?;
    fs::write(dir.join("summary.json"), summary_json(config, aggregate)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "R")]
    pub r: String,
    #[serde(rename = "G")]
    pub g: String,
    pub index_dist: String,
    pub metrics: AggregateMetrics,
    /// Sliced-W2 has not increased along `R` up to this row (same `G` and index).
    pub monotone: Option<bool>,
}

/// One configuration per point of the product of the sweep axes.
pub fn sweep_points(config: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let SamplerConfig::Mgdm(base) = &config.sampler else {
        return Err(Error::Unsupported(
            "sweeps are defined for the MGDM sampler only".into(),
        ));
    };
    let indices: Vec<IndexDistribution> = if config.sweep.index.is_empty() {
        vec![base.index.clone()]
    } else {
        config.sweep.index.clone()
    };
    let gs: Vec<Option<usize>> = if config.sweep.g.is_empty() {
        vec![None]
    } else {
        config.sweep.g.iter().copied().map(Some).collect()
    };
    let rs: Vec<usize> = if config.sweep.r.is_empty() {
        vec![base.r]
    } else {
        config.sweep.r.clone()
    };
    let mut out = Vec::new();
    for index in &indices {
        for g in &gs {
            for &r in &rs {
                let mut cfg = base.clone();
                cfg.index = index.clone();
                cfg.r = r;
                if let Some(g) = g {
                    cfg.vi = ViSchedule {
                        steps: *g,
                        late_steps: *g,
                        ..cfg.vi
                    };
                }
                let mut point = config.clone();
                point.sampler = SamplerConfig::Mgdm(cfg);
                point.sweep = SweepAxes::default();
                point.validate()?;
                out.push(point);
            }
        }
    }
    Ok(out)
}

/// Runs every sweep point with the same per-run seeds.
pub fn run_sweep(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<SweepRow>> {
    let points = sweep_points(config)?;
    let mut rows: Vec<SweepRow> = Vec::with_capacity(points.len());
    for point in &points {
        let records = execute_runs(point, jobs)?;
        let metrics = aggregate(point, &records)?;
        let (r, g, index_dist) = labels(&point.sampler);
        let prev = rows
            .last()
            .filter(|p| p.g == g && p.index_dist == index_dist);
        let monotone = match (prev, metrics.sliced_w2) {
            (Some(p), Some(cur)) => {
                Some(p.monotone.unwrap_or(false) && p.metrics.sliced_w2.is_some_and(|v| cur <= v))
            }
            (None, Some(_)) => Some(true),
            _ => None,
        };
        info!(
            "sweep point R={r} G={g} index={index_dist}: sliced_w2={:?}",
            metrics.sliced_w2
        );
        rows.push(SweepRow {
            r,
            g,
            index_dist,
            metrics,
            monotone,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(config: &ExperimentConfig, rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "R",
        "G",
        "index_dist",
        "n_runs",
        "sliced_w2",
        "mean_error",
        "cov_error",
        "monotone",
    ])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for row in rows {
        w.write_record([
            row.r.clone(),
            row.g.clone(),
            row.index_dist.clone(),
            row.metrics.n_runs.to_string(),
            opt(row.metrics.sliced_w2),
            opt(row.metrics.mean_error),
            opt(row.metrics.cov_error),
            row.monotone.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    Ok(header_lines(config) + &body)
}

pub fn write_sweep(
    config: &ExperimentConfig,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<PathBuf> {
    let dir = output_dir(config, out);
    fs::create_dir_all(&dir)?;
    let rows = run_sweep(config, jobs)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(config, &rows)?)?;
    let value = json!({
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "config": config,
        "rows": rows,
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok(dir)
}

fn gaussian_model(
    config: &ExperimentConfig,
) -> Result<(&GaussianPrior, &LinearGaussian, &MgdmConfig)> {
    let (Some(prior), Some(lik)) = (config.prior.as_gaussian(), config.likelihood.as_linear())
    else {
        return Err(Error::Unsupported(
            "oracle needs a Gaussian prior and a linear-Gaussian likelihood".into(),
        ));
    };
    let SamplerConfig::Mgdm(cfg) = &config.sampler else {
        return Err(Error::Unsupported(
            "oracle is defined for the MGDM sampler only".into(),
        ));
    };
    Ok((prior, lik, cfg))
}

/// Oracle moments with the exact conditional in place of the configured backend.
pub fn oracle_for(config: &ExperimentConfig) -> Result<OracleResult> {
    let (prior, lik, cfg) = gaussian_model(config)?;
    let exact = MgdmConfig {
        conditional: ConditionalBackend::Exact,
        ..cfg.clone()
    };
    oracle::oracle_recursion(prior, lik, &config.schedule, &exact)
}

pub fn write_oracle(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let (_, _, cfg) = gaussian_model(config)?;
    if cfg.conditional != ConditionalBackend::Exact {
        return Err(Error::Unsupported(format!(
            "oracle models the exact conditional backend, config uses '{}'",
            cfg.conditional.name()
        )));
    }
    let result = oracle_for(config)?;
    let dir = output_dir(config, out);
    fs::create_dir_all(&dir)?;
    let value = json!({
        "mean": result.moments.mean.iter().copied().collect::<Vec<_>>(),
        "cov": crate::gaussian::matrix_to_rows(&result.moments.cov),
        "index_sequence": result.index_sequence,
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
    });
    fs::write(
        dir.join("oracle.json"),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub n_runs: usize,
    pub backend: String,
    pub z_mean: Vec<f64>,
    pub z_cov: Vec<Vec<f64>>,
    pub max_abs_z: f64,
    /// `||empirical mean - oracle mean|| / ||oracle mean||`.
    pub mean_rel_discrepancy: f64,
    pub cov_rel_discrepancy: f64,
    /// `None` when the backend is not modeled by the oracle.
    pub pass: Option<bool>,
    pub oracle: GaussianMoments,
    pub empirical: GaussianMoments,
}

/// Empirical output moments vs oracle moments, as per-entry z-scores.
pub fn compare_to_oracle(
    config: &ExperimentConfig,
    measure_vi_error: bool,
    jobs: Option<usize>,
) -> Result<CompareReport> {
    let (_, _, cfg) = gaussian_model(config)?;
    let exact = cfg.conditional == ConditionalBackend::Exact;
    if !exact && !measure_vi_error {
        return Err(Error::Unsupported(format!(
            "compare refuses the '{}' backend: the oracle models exact conditionals only (pass --measure-vi-error to report the discrepancy)",
            cfg.conditional.name()
        )));
    }
    if config.n_runs < 2 {
        return Err(Error::InvalidParameter(
            "compare needs n_runs >= 2 to form z-scores".into(),
        ));
    }
    let oracle = oracle_for(config)?.moments;
    let records = execute_runs(config, jobs)?;
    let set = SampleSet::from_vectors(&records.iter().map(|r| r.x0.clone()).collect::<Vec<_>>())?;
    let empirical = set.moments();
    let (mean_se, cov_se) = metrics::gaussian_standard_errors(&oracle, records.len());
    let d = oracle.dim();
    let z = |diff: f64, se: f64| {
        if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let z_mean: Vec<f64> = (0..d)
        .map(|i| z(empirical.mean[i] - oracle.mean[i], mean_se[i]))
        .collect();
    let z_cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| z(empirical.cov[(i, j)] - oracle.cov[(i, j)], cov_se[(i, j)]))
                .collect()
        })
        .collect();
    let max_abs_z = z_mean
        .iter()
        .chain(z_cov.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mean_norm = oracle.mean.norm();
    Ok(CompareReport {
        n_runs: records.len(),
        backend: cfg.conditional.name().to_string(),
        z_mean,
        z_cov,
        max_abs_z,
        mean_rel_discrepancy: (&empirical.mean - &oracle.mean).norm()
            / if mean_norm > 0.0 { mean_norm } else { 1.0 },
        cov_rel_discrepancy: metrics::relative_frobenius(&empirical.cov, &oracle.cov)?,
        pass: exact.then_some(max_abs_z < 3.0),
        oracle,
        empirical,
    })
}

pub fn write_compare(
    config: &ExperimentConfig,
    measure_vi_error: bool,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<(PathBuf, CompareReport)> {
    let report = compare_to_oracle(config, measure_vi_error, jobs)?;
    let dir = output_dir(config, out);
    fs::create_dir_all(&dir)?;
    let value = json!({
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "config": config,
        "report": report,
    });
    fs::write(
        dir.join("compare.json"),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok((dir, report))
}

/// Human-readable one-line summary of a compare report.
pub fn describe_compare(report: &CompareReport) -> String {
    let mut s = String::new();
    let verdict = match report.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "REPORT",
    };
    let _ = write!(
        s,
        "{verdict}: backend={} n_runs={} max|z|={:.3} mean_rel={:.4} cov_rel={:.4}",
        report.backend,
        report.n_runs,
        report.max_abs_z,
        report.mean_rel_discrepancy,
        report.cov_rel_discrepancy
    );
    s
}
