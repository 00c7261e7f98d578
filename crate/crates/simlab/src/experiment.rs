//! Multi-replication experiments and their reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use convmmd::asymptotics::{sandwich_covariance, SandwichEstimate};
use convmmd::baselines::{em_gmm, logistic_mle, ols};
use convmmd::kernels::{
    convolved_gaussian_amplitude, convolved_gaussian_bandwidth, lipschitz_constant_gaussian,
};
use convmmd::mmd::{deviation_bound, mmd2_biased_with, mmd2_unbiased_with, variance_inflation_bound};
use convmmd::models::{Mixture, NaturalParams};
use convmmd::optim::{fit_problem, warm_start, ConvMmdProblem, FitConfig, FitResult};
use convmmd::rng::{derive_seed, rng_from_seed, role_seed, Role};
use convmmd::{Backend, CoordNoise, Dataset, KernelMixture, KernelSums, Model, NoiseModel, ParamVector, ScaleLaw};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{gaussian_tau, Design, ExperimentSpec, Method, ResolvedTruth};
use crate::error::{Result, SimError};
use crate::generate::{base_seed, generate_holdout, generate_with, setting_seed, truth_model};
use crate::io::{csv_bytes, fmt_opt, write_atomic};
use crate::metrics::{brier, density_mae, mae_sorted, sigmoid, Block, DensityGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Grid resolution for the two-sample statistic designs.
pub const STATISTIC_RESOLUTION: f64 = 32.0;
pub const DEFAULT_HOLDOUT: usize = 5000;
pub const DEFAULT_GAMMA: f64 = 0.05;
const EM_ITER: usize = 100;
const EM_TOL: f64 = 1e-3;
const GLM_ITER: usize = 100;
const GLM_TOL: f64 = 1e-8;
/// Estimated weights closer than this count as tied.
const WEIGHT_TIE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Failed,
}

/// One sweep point of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub label: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub rep: usize,
    pub seed: u64,
    pub setting: String,
    pub method: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: String,
    pub method: String,
    pub metric: String,
    /// Successful replications carrying this metric.
    pub n: usize,
    pub n_failed: usize,
    pub mean: f64,
    /// `sd / sqrt(n)`; absent when `n < 2`.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub seed: u64,
    pub spec: ExperimentSpec,
    pub settings: Vec<Setting>,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub failed: usize,
    pub notes: Vec<String>,
    /// Written to a sidecar so the report itself is reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn aggregate(&self, setting: &str, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.setting == setting && a.method == method && a.metric == metric)
    }

    /// Values of `metric` over successful rows of `(setting, method)`, in
    /// replication order.
    pub fn values(&self, setting: &str, method: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.setting == setting && r.method == method && r.status == Status::Ok)
            .filter_map(|r| r.values.get(metric).copied())
            .collect()
    }

    /// Recompute aggregates from rows and compare with the stored ones.
    pub fn check_aggregates(&self) -> Result<()> {
        let fresh = aggregate_rows(&self.rows);
        if fresh.len() != self.aggregates.len() {
            return Err(SimError::Inconsistent(format!(
                "{} stored aggregates, {} recomputed",
                self.aggregates.len(),
                fresh.len()
            )));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        for (a, b) in self.aggregates.iter().zip(&fresh) {
            let same_key = a.setting == b.setting && a.method == b.method && a.metric == b.metric;
            let same_se = match (a.se, b.se) {
                (Some(x), Some(y)) => close(x, y),
                (None, None) => true,
                _ => false,
            };
            if !same_key || a.n != b.n || a.n_failed != b.n_failed || !close(a.mean, b.mean) || !same_se {
                return Err(SimError::Inconsistent(format!(
                    "aggregate {}/{}/{} does not match its rows",
                    a.setting, a.method, a.metric
                )));
            }
        }
        let failed = self.rows.iter().filter(|r| r.status == Status::Failed).count();
        if failed != self.failed {
            return Err(SimError::Inconsistent(format!(
                "failure count {} but {} failed rows",
                self.failed, failed
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parse a report and verify its aggregates.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.check_aggregates()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut keys: Vec<&String> = self.rows.iter().flat_map(|r| r.values.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut header = vec!["rep", "seed", "setting", "method", "status", "error"];
        header.extend(keys.iter().map(|k| k.as_str()));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![
                    r.rep.to_string(),
                    r.seed.to_string(),
                    r.setting.clone(),
                    r.method.clone(),
                    match r.status {
                        Status::Ok => "ok".into(),
                        Status::Failed => "failed".into(),
                    },
                    r.error.clone().unwrap_or_default(),
                ];
                v.extend(keys.iter().map(|k| fmt_opt(r.values.get(*k).copied())));
                v
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn aggregates_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .aggregates
            .iter()
            .map(|a| {
                vec![
                    a.setting.clone(),
                    a.method.clone(),
                    a.metric.clone(),
                    a.n.to_string(),
                    a.n_failed.to_string(),
                    a.mean.to_string(),
                    fmt_opt(a.se),
                ]
            })
            .collect();
        csv_bytes(&["setting", "method", "metric", "n", "n_failed", "mean", "se"], &rows)
    }

    /// Write `rows.csv`, `aggregates.csv`, `report.json` and the
    /// `timing.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let files = [
            ("rows.csv", self.rows_csv()?),
            ("aggregates.csv", self.aggregates_csv()?),
            ("report.json", self.to_json()?.into_bytes()),
            (
                "timing.json",
                (serde_json::to_string_pretty(&serde_json::json!({
                    "wall_time_secs": self.wall_time_secs
                }))? + "\n")
                    .into_bytes(),
            ),
        ];
        let mut out = Vec::new();
        for (name, bytes) in files {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Mean and standard error per `(setting, method, metric)`, in order of
/// first appearance of `(setting, method)` and then by metric name.
pub fn aggregate_rows(rows: &[Row]) -> Vec<Aggregate> {
    let mut groups: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.setting.clone(), r.method.clone());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut out = Vec::new();
    for (setting, method) in groups {
        let members: Vec<&Row> = rows
            .iter()
            .filter(|r| r.setting == setting && r.method == method)
            .collect();
        let n_failed = members.iter().filter(|r| r.status == Status::Failed).count();
        let mut metrics: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in members.iter().filter(|r| r.status == Status::Ok) {
            for (k, v) in &r.values {
                metrics.entry(k.as_str()).or_default().push(*v);
            }
        }
        for (metric, vs) in metrics {
            let n = vs.len();
            let mean = vs.iter().sum::<f64>() / n as f64;
            let se = (n >= 2).then(|| {
                let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            });
            out.push(Aggregate {
                setting: setting.clone(),
                method: method.clone(),
                metric: metric.to_string(),
                n,
                n_failed,
                mean,
                se,
            });
        }
    }
    out
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Sweep points of `spec`.
pub fn settings(spec: &ExperimentSpec) -> Vec<Setting> {
    let ns = spec.n_grid();
    match spec.design {
        Design::Equivalence => {
            let thetas = spec
                .thetas
                .clone()
                .unwrap_or_else(|| vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
            let multi = ns.len() > 1;
            ns.iter()
                .flat_map(|&n| {
                    thetas.iter().map(move |&t| Setting {
                        label: if multi {
                            format!("N={n},theta={}", fmt_num(t))
                        } else {
                            format!("theta={}", fmt_num(t))
                        },
                        n,
                        theta: Some(t),
                        tau2: None,
                    })
                })
                .collect()
        }
        Design::Bounds => {
            let taus = spec.tau2_grid.clone().unwrap_or_else(|| vec![1.0]);
            ns.iter()
                .flat_map(|&n| {
                    taus.iter().map(move |&t| Setting {
                        label: format!("N={n},tau2={}", fmt_num(t)),
                        n,
                        theta: None,
                        tau2: Some(t),
                    })
                })
                .collect()
        }
        _ => ns
            .iter()
            .map(|&n| Setting {
                label: format!("N={n}"),
                n,
                theta: None,
                tau2: None,
            })
            .collect(),
    }
}

/// Run every replication of `spec`; `log` receives one line per finished
/// replication.
pub fn run_experiment_with(spec: &ExperimentSpec, log: &(dyn Fn(&str) + Sync)) -> Result<ExperimentReport> {
    spec.validate()?;
    let seed = base_seed(spec)?;
    let start = Instant::now();
    let ctx = Ctx::new(spec)?;
    let settings = settings(spec);
    let tasks: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..spec.replications).map(move |r| (s, r)))
        .collect();
    let rows: Vec<Vec<Row>> = tasks
        .par_iter()
        .map(|&(s, rep)| {
            let t0 = Instant::now();
            let rows = ctx.run_rep(&settings[s], setting_seed(seed, s), rep);
            let failed = rows.iter().filter(|r| r.status == Status::Failed).count();
            log(&format!(
                "[{}] rep {rep}: {} rows, {failed} failed, {:.2}s",
                settings[s].label,
                rows.len(),
                t0.elapsed().as_secs_f64()
            ));
            rows
        })
        .collect();
    let rows: Vec<Row> = rows.into_iter().flatten().collect();
    let aggregates = aggregate_rows(&rows);
    let failed = rows.iter().filter(|r| r.status == Status::Failed).count();
    let mut notes = ctx.notes.clone();
    if failed > 0 {
        notes.push(format!("{failed} failed rows excluded from aggregates"));
    }
    let ties = rows
        .iter()
        .filter(|r| {
            let w: Vec<f64> = r
                .values
                .iter()
                .filter(|(k, _)| k.starts_with("weight["))
                .map(|(_, v)| *v)
                .collect();
            w.windows(2).any(|p| (p[1] - p[0]).abs() < WEIGHT_TIE)
        })
        .count();
    if ties > 0 {
        notes.push(format!(
            "{ties} rows have estimated weights within {WEIGHT_TIE} of each other; their weight-sorted component order is fragile"
        ));
    }
    let mut echo = spec.clone();
    echo.seed = Some(seed);
    Ok(ExperimentReport {
        version: VERSION.to_string(),
        seed,
        spec: echo,
        settings,
        rows,
        aggregates,
        failed,
        notes,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment_with(spec, &|_| {})
}

/// Point estimate in the terms the metrics compare.
enum Estimate {
    Mixture(Mixture),
    Regression {
        alpha: f64,
        beta: Vec<f64>,
        sigma_reg: Option<f64>,
    },
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    truth: ResolvedTruth,
    model: Model,
    noise: NoiseModel,
    methods: Vec<Method>,
    density_grid: Option<DensityGrid>,
    fixed: Vec<usize>,
    notes: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn new(spec: &'a ExperimentSpec) -> Result<Self> {
        let truth = spec.truth()?;
        let model = spec.model()?;
        let noise = spec.noise_model()?;
        let mut notes = Vec::new();
        let density_grid = match &truth {
            ResolvedTruth::Gmm(m) => {
                let g = spec.density_grid.unwrap_or_else(|| DensityGrid::for_truth(m));
                notes.push(format!(
                    "density MAE grid: {} points on [{}, {}]",
                    g.points, g.lo, g.hi
                ));
                Some(g)
            }
            _ => None,
        };
        if spec.design == Design::Logistic {
            notes.push("logistic truth coefficients are synthetic defaults, not data-derived".into());
        }
        let fixed = if spec.design == Design::Clt {
            vec![model.index_of("mean[1]").expect("gmm mean")]
        } else {
            vec![]
        };
        let ctx = Self {
            spec,
            truth,
            model,
            noise,
            methods: spec.methods(),
            density_grid,
            fixed,
            notes,
        };
        if spec.design.fits_models() && ctx.methods.contains(&Method::Convmmd) {
            let cfg = ctx.fit_config(spec.n, 0)?;
            let mut shown = serde_json::to_value(&cfg)?;
            if let Some(o) = shown.as_object_mut() {
                o.remove("seed");
            }
            let mut ctx = ctx;
            ctx.notes.push(format!("convmmd fit config at N={}: {shown}", spec.n));
            return Ok(ctx);
        }
        Ok(ctx)
    }

    fn fit_config(&self, n: usize, seed: u64) -> Result<FitConfig> {
        let (n_iter, m) = match self.spec.design {
            Design::Gmm | Design::Clt => (2000, n),
            _ => (3000, n.min(1000)),
        };
        let backend = self.spec.kernel.backend(Backend::for_fitting(self.model.data_dim()));
        self.spec
            .fit
            .to_fit_config(n_iter, m, seed, backend, self.fixed.clone())
    }

    fn run_rep(&self, setting: &Setting, sseed: u64, rep: usize) -> Vec<Row> {
        let seed = derive_seed(sseed, rep as u64);
        let row = |method: &str, r: Result<BTreeMap<String, f64>>| match r {
            Ok(values) if values.values().all(|v| v.is_finite()) => Row {
                rep,
                seed,
                setting: setting.label.clone(),
                method: method.to_string(),
                status: Status::Ok,
                error: None,
                values,
            },
            other => Row {
                rep,
                seed,
                setting: setting.label.clone(),
                method: method.to_string(),
                status: Status::Failed,
                error: Some(match other {
                    Err(e) => e.to_string(),
                    Ok(_) => "non-finite metric".into(),
                }),
                values: BTreeMap::new(),
            },
        };
        match self.spec.design {
            Design::Equivalence => match self.equivalence_rep(setting, sseed, rep) {
                Ok((a, b)) => vec![row("convmmd", Ok(a)), row("mmd-tilde", Ok(b))],
                Err(e) => {
                    let msg = e.to_string();
                    vec![
                        row("convmmd", Err(SimError::Inconsistent(msg.clone()))),
                        row("mmd-tilde", Err(SimError::Inconsistent(msg))),
                    ]
                }
            },
            Design::Bounds => match self.bounds_rep(setting, sseed, rep) {
                Ok((a, b)) => vec![row("mmd", Ok(a)), row("convmmd", Ok(b))],
                Err(e) => {
                    let msg = e.to_string();
                    vec![
                        row("mmd", Err(SimError::Inconsistent(msg.clone()))),
                        row("convmmd", Err(SimError::Inconsistent(msg))),
                    ]
                }
            },
            _ => {
                let data = generate_with(self.spec, setting.n, sseed, rep);
                let holdout = if self.spec.design == Design::Logistic {
                    Some(generate_holdout(
                        self.spec,
                        self.spec.holdout_n.unwrap_or(DEFAULT_HOLDOUT),
                        sseed,
                        rep,
                    ))
                } else {
                    None
                };
                self.methods
                    .iter()
                    .map(|&m| {
                        let r = match (&data, &holdout) {
                            (Err(e), _) | (_, Some(Err(e))) => {
                                Err(SimError::Inconsistent(format!("data generation: {e}")))
                            }
                            (Ok(g), h) => self.run_method(
                                m,
                                &g.noisy,
                                h.as_ref().and_then(|h| h.as_ref().ok()),
                                sseed,
                                rep,
                            ),
                        };
                        row(m.name(), r)
                    })
                    .collect()
            }
        }
    }

    fn run_method(
        &self,
        method: Method,
        noisy: &Dataset,
        holdout: Option<&Dataset>,
        sseed: u64,
        rep: usize,
    ) -> Result<BTreeMap<String, f64>> {
        let baseline_seed = role_seed(sseed, rep as u64, Role::Baseline);
        let mut extra = BTreeMap::new();
        let est = match method {
            Method::Convmmd => {
                let (theta, fit, sandwich) = self.fit_convmmd(noisy, sseed, rep)?;
                extra.extend(fit_diagnostics(&fit));
                if let Some(s) = &sandwich {
                    extra.extend(self.sandwich_values(s, &theta, noisy.len())?);
                }
                self.estimate_from_theta(&theta)?
            }
            Method::NaiveGmm => {
                let mut rng = rng_from_seed(baseline_seed);
                Estimate::Mixture(em_gmm(noisy, self.model.components(), EM_ITER, EM_TOL, &mut rng)?.mixture)
            }
            Method::Ols => {
                let f = ols(&noisy.column(0), &noisy.column(1))?;
                Estimate::Regression {
                    alpha: f.alpha,
                    beta: vec![f.beta],
                    sigma_reg: Some(f.residual_sd),
                }
            }
            Method::NaiveGlm => {
                let p = noisy.dim() - 1;
                let x = noisy.select_columns(&(0..p).collect::<Vec<_>>())?;
                let v = logistic_mle(&x, &noisy.column(p), GLM_ITER, GLM_TOL)?;
                Estimate::Regression {
                    alpha: v[0],
                    beta: v[1..].to_vec(),
                    sigma_reg: None,
                }
            }
        };
        let mut values = self.evaluate(&est, holdout)?;
        values.extend(extra);
        Ok(values)
    }

    fn fit_convmmd(
        &self,
        noisy: &Dataset,
        sseed: u64,
        rep: usize,
    ) -> Result<(ParamVector, FitResult, Option<SandwichEstimate>)> {
        let fit_seed = role_seed(sseed, rep as u64, Role::Fit);
        let kernel = self.spec.kernel.kernel_for(noisy, fit_seed)?;
        let cfg = self.fit_config(noisy.len(), fit_seed)?;
        let mut init = if self.spec.fit.warm_start.unwrap_or(true) {
            warm_start(&self.model, noisy, role_seed(sseed, rep as u64, Role::Baseline))?
        } else {
            truth_model(self.spec)?.1
        };
        if self.spec.design == Design::Clt {
            let (_, truth) = truth_model(self.spec)?;
            for &i in &self.fixed {
                init.0[i] = truth.0[i];
            }
        }
        let problem = ConvMmdProblem::new(&self.model, noisy, &self.noise, &kernel, cfg.backend)?;
        let fit = fit_problem(&problem, &cfg, &init)?;
        let sandwich = if self.spec.covariance.enabled {
            let free = cfg.free_indices(&self.model);
            let m = self.spec.covariance.batch_m.unwrap_or(noisy.len());
            Some(sandwich_covariance(
                &problem,
                &fit.theta_hat,
                &free,
                self.spec.covariance.batches(),
                m,
                role_seed(sseed, rep as u64, Role::Sandwich),
            )?)
        } else {
            None
        };
        Ok((fit.theta_hat.clone(), fit, sandwich))
    }

    fn sandwich_values(
        &self,
        s: &SandwichEstimate,
        theta: &ParamVector,
        n: usize,
    ) -> Result<BTreeMap<String, f64>> {
        let names = self.model.param_names();
        let mut v = BTreeMap::new();
        for (j, &i) in s.free.iter().enumerate() {
            v.insert(format!("se.{}", names[i]), (s.variance(j) / n as f64).sqrt());
        }
        v.insert("sandwich_warnings".into(), s.warnings.len() as f64);
        if self.spec.design == Design::Clt {
            let i = self.model.index_of("log_sd[1]").expect("gmm log sd");
            let j = s.free.iter().position(|&f| f == i).expect("log sd is free");
            let sigma = theta.0[i].exp();
            let c = s.variance(j);
            let se = sigma * (c / n as f64).sqrt();
            let z = Normal::standard().inverse_cdf(0.5 + 0.5 * self.spec.covariance.level());
            let ResolvedTruth::Normal { sigma: truth, .. } = self.truth else {
                unreachable!("clt truth is normal")
            };
            v.insert("sigma_se".into(), se);
            v.insert("n_var_sandwich".into(), sigma * sigma * c);
            v.insert(
                "ci_covered".into(),
                f64::from(u8::from((sigma - truth).abs() <= z * se)),
            );
        }
        Ok(v)
    }

    fn estimate_from_theta(&self, theta: &ParamVector) -> Result<Estimate> {
        Ok(match self.model.natural(theta)? {
            NaturalParams::Gmm { mixture } => Estimate::Mixture(mixture),
            NaturalParams::LinearEiv {
                alpha,
                beta,
                sigma_reg,
                ..
            } => Estimate::Regression {
                alpha,
                beta: vec![beta],
                sigma_reg: Some(sigma_reg),
            },
            NaturalParams::LogisticEiv { alpha, beta, .. } => Estimate::Regression {
                alpha,
                beta,
                sigma_reg: None,
            },
        })
    }

    fn evaluate(&self, est: &Estimate, holdout: Option<&Dataset>) -> Result<BTreeMap<String, f64>> {
        let mut v = BTreeMap::new();
        match (&self.truth, est) {
            (ResolvedTruth::Gmm(truth), Estimate::Mixture(m)) => {
                let s = m.sorted_by_weight();
                for k in 0..s.components() {
                    v.insert(format!("weight[{}]", k + 1), s.weights[k]);
                    v.insert(format!("mean[{}]", k + 1), s.means[k]);
                    v.insert(format!("sd[{}]", k + 1), s.sds[k]);
                }
                if s.components() == truth.components() {
                    v.insert("weights_mae".into(), mae_sorted(&s, truth, Block::Weights)?);
                    v.insert("means_mae".into(), mae_sorted(&s, truth, Block::Means)?);
                    v.insert("sds_mae".into(), mae_sorted(&s, truth, Block::Sds)?);
                }
                let grid = self.density_grid.expect("gmm grid");
                v.insert("density_mae".into(), density_mae(&s, truth, &grid)?);
            }
            (ResolvedTruth::Normal { sigma, .. }, Estimate::Mixture(m)) => {
                v.insert("sigma".into(), m.sds[0]);
                v.insert("sigma_mae".into(), (m.sds[0] - sigma).abs());
            }
            (
                ResolvedTruth::Eivr {
                    alpha,
                    beta,
                    sigma_reg,
                    ..
                },
                Estimate::Regression {
                    alpha: a,
                    beta: b,
                    sigma_reg: s,
                },
            ) => {
                v.insert("alpha".into(), *a);
                v.insert("beta".into(), b[0]);
                v.insert("alpha_mae".into(), (a - alpha).abs());
                v.insert("beta_mae".into(), (b[0] - beta).abs());
                if let Some(s) = s {
                    v.insert("sigma_reg".into(), *s);
                    v.insert("sigma_reg_mae".into(), (s - sigma_reg).abs());
                }
            }
            (
                ResolvedTruth::Logistic { alpha, beta, .. },
                Estimate::Regression { alpha: a, beta: b, .. },
            ) => {
                v.insert("alpha".into(), *a);
                v.insert("alpha_mae".into(), (a - alpha).abs());
                for (f, (bf, tf)) in b.iter().zip(beta).enumerate() {
                    v.insert(format!("beta[{}]", f + 1), *bf);
                    v.insert(format!("beta{}_mae", f + 1), (bf - tf).abs());
                }
                if let Some(h) = holdout {
                    let p = b.len();
                    let probs: Vec<f64> = h
                        .rows()
                        .map(|r| sigmoid(a + b.iter().zip(&r[..p]).map(|(c, x)| c * x).sum::<f64>()))
                        .collect();
                    v.insert("brier".into(), brier(&probs, &h.column(p))?);
                }
            }
            _ => return Err(SimError::Inconsistent("estimate does not match the design".into())),
        }
        Ok(v)
    }

    fn normal_pair(&self, n: usize, shift: f64, sseed: u64, rep: usize) -> (Dataset, Dataset) {
        let ResolvedTruth::Normal { mean, sigma } = self.truth else {
            unreachable!("two-sample designs use a normal truth")
        };
        let mut rng = rng_from_seed(role_seed(sseed, rep as u64, Role::Data));
        let mut draw = |m: f64| -> Dataset {
            let v: Vec<f64> = (0..n)
                .map(|_| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Dataset::from_column(&v)
        };
        let xs = draw(mean);
        let ys = draw(mean + shift);
        (xs, ys)
    }

    fn perturb_pair(&self, noise: &NoiseModel, xs: &Dataset, ys: &Dataset, sseed: u64, rep: usize) -> Result<(Dataset, Dataset)> {
        let mut rng = rng_from_seed(role_seed(sseed, rep as u64, Role::Noise));
        let (mut a, mut b) = (xs.clone(), ys.clone());
        noise.perturb(&mut a, &mut rng)?;
        noise.perturb(&mut b, &mut rng)?;
        Ok((a, b))
    }

    fn statistic_backend(&self) -> Backend {
        self.spec.kernel.backend(Backend::grid(STATISTIC_RESOLUTION))
    }

    fn equivalence_rep(
        &self,
        setting: &Setting,
        sseed: u64,
        rep: usize,
    ) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
        let l = self.spec.kernel.fixed_bandwidths(1)?[0];
        let tau = gaussian_tau(&self.noise)?;
        let (xs, ys) = self.normal_pair(setting.n, setting.theta.unwrap_or(0.0), sseed, rep);
        let (xn, yn) = self.perturb_pair(&self.noise, &xs, &ys, sseed, rep)?;
        let backend = self.statistic_backend();
        let noisy = KernelSums::new(KernelMixture::single(&[l])?, backend, &[&xn, &yn])?;
        let conv = mmd2_unbiased_with(&xn, &yn, &noisy)?;
        let lt = convolved_gaussian_bandwidth(l, tau)?;
        let amp = convolved_gaussian_amplitude(l, tau)?;
        let clean = KernelSums::new(KernelMixture::single(&[lt])?, backend, &[&xs, &ys])?;
        let tilde = amp * mmd2_unbiased_with(&xs, &ys, &clean)?;
        Ok((
            BTreeMap::from([("statistic".to_string(), conv)]),
            BTreeMap::from([("statistic".to_string(), tilde)]),
        ))
    }

    fn bounds_rep(
        &self,
        setting: &Setting,
        sseed: u64,
        rep: usize,
    ) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
        let l = self.spec.kernel.fixed_bandwidths(1)?[0];
        let tau2 = setting.tau2.unwrap_or(0.0);
        let noise = if tau2 > 0.0 {
            NoiseModel::new(vec![CoordNoise::Gaussian {
                scale: ScaleLaw::fixed(tau2.sqrt()),
            }])?
        } else {
            NoiseModel::none(1)
        };
        let (xs, ys) = self.normal_pair(setting.n, 0.0, sseed, rep);
        let (xn, yn) = self.perturb_pair(&noise, &xs, &ys, sseed, rep)?;
        let kernel = KernelMixture::single(&[l])?;
        let sums = KernelSums::new(kernel.clone(), self.statistic_backend(), &[&xs, &ys, &xn, &yn])?;
        let stats = |a: &Dataset, b: &Dataset| -> Result<BTreeMap<String, f64>> {
            let biased = mmd2_biased_with(a, b, &sums)?;
            let unbiased = mmd2_unbiased_with(a, b, &sums)?;
            Ok(BTreeMap::from([
                ("mmd2_biased".to_string(), biased),
                ("mmd2_unbiased".to_string(), unbiased),
                ("abs_dev".to_string(), biased.max(0.0).sqrt()),
                ("u_sq".to_string(), unbiased * unbiased),
            ]))
        };
        let clean = stats(&xs, &ys)?;
        let mut conv = stats(&xn, &yn)?;
        let gamma = self.spec.gamma.unwrap_or(DEFAULT_GAMMA);
        let dev = deviation_bound(kernel.bound_k(), setting.n, gamma)?;
        conv.insert("dev_bound".into(), dev);
        conv.insert("violated".into(), f64::from(u8::from(conv["abs_dev"] > dev)));
        conv.insert(
            "var_bound".into(),
            variance_inflation_bound(lipschitz_constant_gaussian(l)?, kernel.bound_k(), setting.n, tau2)?,
        );
        Ok((clean, conv))
    }
}

fn fit_diagnostics(fit: &FitResult) -> BTreeMap<String, f64> {
    let mut v = BTreeMap::new();
    let losses: Vec<f64> = fit.loss_trace.iter().map(|&(_, l)| l).collect();
    if !losses.is_empty() {
        let k = (losses.len() / 10).max(1);
        let med = |s: &[f64]| {
            let mut s = s.to_vec();
            s.sort_unstable_by(f64::total_cmp);
            let m = s.len();
            if m % 2 == 1 {
                s[m / 2]
            } else {
                0.5 * (s[m / 2 - 1] + s[m / 2])
            }
        };
        let first = med(&losses[..k]);
        let last = med(&losses[losses.len() - k..]);
        v.insert("loss_first".into(), first);
        v.insert("loss_last".into(), last);
        v.insert("trend_ok".into(), f64::from(u8::from(last <= first)));
    }
    v
}
