//! Verification targets: each runs a property at configured scale and
//! reports PASS/FAIL per check together with the per-replication data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use convmmd::asymptotics::{closed_form_gaussian_scalar, sandwich_covariance};
use convmmd::models::{Mixture, NaturalParams};
use convmmd::optim::ConvMmdProblem;
use convmmd::rng::{derive_seed, rng_from_seed, role_seed, Role};
use convmmd::{Backend, Dataset, KernelMixture, Model, NoiseModel, ParamVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Design, ExperimentSpec};
use crate::error::{Result, SimError};
use crate::experiment::{run_experiment_with, ExperimentReport};
use crate::generate::{generate_with, setting_seed, truth_model};
use crate::io::{csv_bytes, write_atomic};
use crate::metrics::{mean, normal_qq_correlation, sample_variance, skewness, slope};
use crate::presets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Equivalence,
    DeviationBound,
    VarianceBound,
    CltRate,
    GradientCheck,
    ClosedForm,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Equivalence,
        Target::DeviationBound,
        Target::VarianceBound,
        Target::CltRate,
        Target::GradientCheck,
        Target::ClosedForm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Equivalence => "equivalence",
            Target::DeviationBound => "deviation-bound",
            Target::VarianceBound => "variance-bound",
            Target::CltRate => "clt-rate",
            Target::GradientCheck => "gradient-check",
            Target::ClosedForm => "closed-form",
        }
    }

    /// Bundled experiment preset, for targets that run one.
    pub fn preset(self) -> Option<&'static str> {
        match self {
            Target::Equivalence => Some("equivalence"),
            Target::DeviationBound => Some("deviation_bound"),
            Target::VarianceBound => Some("variance_bound"),
            Target::CltRate => Some("clt"),
            Target::GradientCheck | Target::ClosedForm => None,
        }
    }

    fn design(self) -> Option<Design> {
        match self {
            Target::Equivalence => Some(Design::Equivalence),
            Target::DeviationBound | Target::VarianceBound => Some(Design::Bounds),
            Target::CltRate => Some(Design::Clt),
            Target::GradientCheck | Target::ClosedForm => None,
        }
    }

    fn default_seed(self) -> u64 {
        match self {
            Target::Equivalence => 501,
            Target::DeviationBound => 502,
            Target::VarianceBound => 503,
            Target::CltRate => 401,
            Target::GradientCheck => 504,
            Target::ClosedForm => 505,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Target::ALL.iter().map(|t| t.name()).collect();
                SimError::config(format!("unknown verify target `{s}`; valid: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub tolerance: String,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, measured: impl Into<String>, tolerance: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            measured: measured.into(),
            tolerance: tolerance.into(),
            pass,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} (want {})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Reduced replication counts.
    pub quick: bool,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    /// Replaces the bundled preset of experiment-backed targets.
    pub spec: Option<ExperimentSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub target: Target,
    pub seed: u64,
    pub quick: bool,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ExperimentSpec>,
    #[serde(skip)]
    pub files: Vec<(String, Vec<u8>)>,
    #[serde(skip)]
    pub report: Option<ExperimentReport>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks.iter().map(Check::line).collect()
    }

    /// Writes the data CSVs, `verify.json` and, for experiment-backed
    /// targets, the experiment report files.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            write_atomic(&p, bytes)?;
            out.push(p);
        }
        if let Some(r) = &self.report {
            out.extend(r.write(&dir.join("experiment"))?);
        }
        let p = dir.join("verify.json");
        write_atomic(&p, (serde_json::to_string_pretty(self)? + "\n").as_bytes())?;
        out.push(p);
        Ok(out)
    }
}

/// The experiment a target runs by default, scaled down in quick mode.
pub fn default_spec(target: Target, quick: bool) -> Result<Option<ExperimentSpec>> {
    let Some(name) = target.preset() else {
        return Ok(None);
    };
    let mut spec = presets::load(name)?;
    if quick {
        spec.replications = match target {
            Target::CltRate => 100,
            Target::Equivalence => spec.replications,
            _ => 200,
        };
    }
    Ok(Some(spec))
}

pub fn verify(target: Target, opts: &VerifyOptions) -> Result<VerifyOutcome> {
    verify_with(target, opts, &|_| {})
}

pub fn verify_with(target: Target, opts: &VerifyOptions, log: &(dyn Fn(&str) + Sync)) -> Result<VerifyOutcome> {
    let start = Instant::now();
    let seed = opts.seed.unwrap_or(target.default_seed());
    let spec = match (target.design(), &opts.spec) {
        (None, Some(_)) => {
            return Err(SimError::config(format!("`{target}` does not take an experiment config")))
        }
        (Some(d), Some(s)) if s.design != d => {
            return Err(SimError::config(format!(
                "`{target}` needs design `{}`, config has `{}`",
                d.name(),
                s.design.name()
            )))
        }
        (_, Some(s)) => Some(s.clone()),
        (_, None) => default_spec(target, opts.quick)?,
    };
    let spec = spec.map(|mut s| {
        s.seed = Some(opts.seed.or(s.seed).unwrap_or(seed));
        if let Some(r) = opts.replications {
            s.replications = r;
        }
        s
    });
    let seed = spec.as_ref().and_then(|s| s.seed).unwrap_or(seed);
    let report = match &spec {
        Some(s) => Some(run_experiment_with(s, log)?),
        None => None,
    };
    let mut out = match target {
        Target::Equivalence => equivalence(report.as_ref().expect("experiment"))?,
        Target::DeviationBound => deviation(report.as_ref().expect("experiment"))?,
        Target::VarianceBound => variance(report.as_ref().expect("experiment"))?,
        Target::CltRate => clt(report.as_ref().expect("experiment"))?,
        Target::GradientCheck => gradient_check(seed, if opts.quick { 5 } else { 20 }, log)?,
        Target::ClosedForm => closed_form(seed, if opts.quick { 20 } else { 50 })?,
    };
    if let Some(r) = &report {
        if r.failed > 0 {
            out.notes.push(format!("{} failed rows excluded", r.failed));
        }
    }
    Ok(VerifyOutcome {
        target,
        seed,
        quick: opts.quick,
        checks: out.checks,
        notes: out.notes,
        spec: report.as_ref().map(|r| r.spec.clone()),
        files: out.files,
        report,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Default)]
struct Partial {
    checks: Vec<Check>,
    notes: Vec<String>,
    files: Vec<(String, Vec<u8>)>,
}

fn f(v: f64) -> String {
    v.to_string()
}

fn se_of(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

fn equivalence(r: &ExperimentReport) -> Result<Partial> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut worst_theta = 0.0;
    for s in &r.settings {
        let a = r.values(&s.label, "convmmd", "statistic");
        let b = r.values(&s.label, "mmd-tilde", "statistic");
        if a.is_empty() || b.is_empty() {
            return Err(SimError::Inconsistent(format!("no statistics for {}", s.label)));
        }
        let se = (se_of(&a).powi(2) + se_of(&b).powi(2)).sqrt();
        let z = (mean(&a) - mean(&b)).abs() / se;
        if !(z <= worst) {
            worst = z;
            worst_theta = s.theta.unwrap_or(f64::NAN);
        }
        rows.push(vec![
            f(s.theta.unwrap_or(f64::NAN)),
            f(mean(&a)),
            f(mean(&b)),
            f(se),
        ]);
    }
    Ok(Partial {
        checks: vec![Check::new(
            "equivalence",
            format!("max |mean difference| = {worst:.3} combined SE (theta = {worst_theta})"),
            "<= 3 SE at every theta",
            worst <= 3.0,
        )],
        files: vec![(
            "equivalence.csv".into(),
            csv_bytes(&["theta", "convmmd2_mean", "mmd2_tilde_mean", "se"], &rows)?,
        )],
        ..Default::default()
    })
}

fn bounds_csv(r: &ExperimentReport, value: &str) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for row in &r.rows {
        let s = r
            .settings
            .iter()
            .find(|s| s.label == row.setting)
            .ok_or_else(|| SimError::Inconsistent(format!("unknown setting {}", row.setting)))?;
        let get = |k: &str| row.values.get(k).copied().map(f).unwrap_or_default();
        rows.push(vec![
            row.seed.to_string(),
            s.n.to_string(),
            f(s.tau2.unwrap_or(0.0)),
            row.method.clone(),
            get(value),
            get("dev_bound"),
            get("violated"),
        ]);
    }
    csv_bytes(&["seed", "N", "tau2", "method", "statistic", "bound", "violated"], &rows)
}

fn deviation(r: &ExperimentReport) -> Result<Partial> {
    let mut p = Partial::default();
    let mut worst_rate: f64 = 0.0;
    let mut worst_n = 0;
    for s in &r.settings {
        let v = r.values(&s.label, "convmmd", "violated");
        let rate = mean(&v);
        if rate >= worst_rate {
            worst_rate = rate;
            worst_n = s.n;
        }
    }
    p.checks.push(Check::new(
        "deviation bound violations",
        format!("max rate {:.4} (N = {worst_n})", worst_rate),
        "<= 0.05 at every N",
        worst_rate <= 0.05,
    ));
    let tau2 = r.settings.first().and_then(|s| s.tau2);
    for method in ["mmd", "convmmd"] {
        let (mut ln, mut lm) = (Vec::new(), Vec::new());
        for s in r.settings.iter().filter(|s| s.tau2 == tau2) {
            let v = r.values(&s.label, method, "abs_dev");
            ln.push((s.n as f64).ln());
            lm.push(mean(&v).ln());
        }
        let b = slope(&ln, &lm);
        p.checks.push(Check::new(
            format!("{method} log-MAE slope"),
            format!("{b:.4}"),
            "in [-0.65, -0.35]",
            (-0.65..=-0.35).contains(&b),
        ));
    }
    p.files.push(("deviation_bound.csv".into(), bounds_csv(r, "abs_dev")?));
    Ok(p)
}

fn variance(r: &ExperimentReport) -> Result<Partial> {
    let mut rows = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_label = String::new();
    for s in &r.settings {
        let noisy = mean(&r.values(&s.label, "convmmd", "u_sq"));
        let clean = mean(&r.values(&s.label, "mmd", "u_sq"));
        let bound = r
            .values(&s.label, "convmmd", "var_bound")
            .first()
            .copied()
            .ok_or_else(|| SimError::Inconsistent(format!("no bound for {}", s.label)))?;
        let margin = (noisy - clean - bound) / bound.max(f64::MIN_POSITIVE);
        if margin > worst {
            worst = margin;
            worst_label = s.label.clone();
        }
        rows.push(vec![
            s.n.to_string(),
            f(s.tau2.unwrap_or(0.0)),
            f(noisy),
            f(clean),
            f(bound),
        ]);
    }
    Ok(Partial {
        checks: vec![Check::new(
            "variance inflation bound",
            format!("worst (noisy - clean - bound) / bound = {worst:.4} at {worst_label}"),
            "<= 0 at every (N, tau2)",
            worst <= 0.0,
        )],
        files: vec![(
            "variance_bound.csv".into(),
            csv_bytes(
                &["N", "tau2", "second_moment_noisy", "second_moment_clean", "bound"],
                &rows,
            )?,
        )],
        ..Default::default()
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn clt(r: &ExperimentReport) -> Result<Partial> {
    let mut p = Partial::default();
    let largest = r
        .settings
        .iter()
        .max_by_key(|s| s.n)
        .ok_or_else(|| SimError::Inconsistent("no settings".into()))?;
    let sig = r.values(&largest.label, "convmmd", "sigma");
    if sig.len() < 3 {
        return Err(SimError::Inconsistent("too few successful replications".into()));
    }
    let sk = skewness(&sig);
    p.checks.push(Check::new(
        format!("skewness at N = {}", largest.n),
        format!("{sk:.4}"),
        "|.| < 0.3",
        sk.abs() < 0.3,
    ));
    let qq = normal_qq_correlation(&sig);
    p.checks.push(Check::new(
        format!("normal QQ correlation at N = {}", largest.n),
        format!("{qq:.5}"),
        "> 0.99",
        qq > 0.99,
    ));
    let (mut ln, mut lv) = (Vec::new(), Vec::new());
    for s in &r.settings {
        ln.push((s.n as f64).ln());
        lv.push(sample_variance(&r.values(&s.label, "convmmd", "sigma")).ln());
    }
    if r.settings.len() >= 2 {
        let b = slope(&ln, &lv);
        p.checks.push(Check::new(
            "log var(sigma) vs log N slope",
            format!("{b:.4}"),
            "in [-1.15, -0.85]",
            (-1.15..=-0.85).contains(&b),
        ));
    }
    let emp = largest.n as f64 * sample_variance(&sig);
    let sand = median(&r.values(&largest.label, "convmmd", "n_var_sandwich"));
    let rel = (emp / sand - 1.0).abs();
    p.checks.push(Check::new(
        format!("N var(sigma) vs sandwich at N = {}", largest.n),
        format!("empirical {emp:.4}, sandwich {sand:.4}, relative gap {rel:.4}"),
        "gap <= 0.25",
        rel <= 0.25,
    ));
    let mut rows = Vec::new();
    for row in &r.rows {
        let Some(s) = r.settings.iter().find(|s| s.label == row.setting) else {
            continue;
        };
        let get = |k: &str| row.values.get(k).copied().map(f).unwrap_or_default();
        rows.push(vec![
            s.n.to_string(),
            row.rep.to_string(),
            row.seed.to_string(),
            get("sigma"),
            get("n_var_sandwich"),
        ]);
    }
    p.files.push((
        "clt_rate.csv".into(),
        csv_bytes(&["N", "rep", "seed", "sigma_hat", "n_var_sandwich"], &rows)?,
    ));
    let mut summary = Vec::new();
    for s in &r.settings {
        let v = r.values(&s.label, "convmmd", "sigma");
        summary.push(vec![s.n.to_string(), v.len().to_string(), f(sample_variance(&v))]);
    }
    p.files
        .push(("clt_variance.csv".into(), csv_bytes(&["N", "reps", "var_sigma_hat"], &summary)?));
    Ok(p)
}

/// Batch size and data size of the gradient check.
const GRADIENT_M: usize = 500;
/// Finite-difference step of the gradient check.
const GRADIENT_H: f64 = 1e-4;
/// Spread of the random parameter perturbations around the truth.
const GRADIENT_JITTER: f64 = 0.1;

/// Importance-weighted objective of one fixed batch.
///
/// With latent draws `y_j ~ q_θ0` and their noisy versions `ỹ_j`,
/// `L(θ) = data_self + Σ_{j≠l} w_j w_l k(ỹ_j, ỹ_l) / (M(M−1)) − (2/M) Σ_j w_j c_j`
/// where `w_j = q_θ(y_j) / q_θ0(y_j)` and `c_j` is the mean kernel value of
/// `ỹ_j` against the data. Its gradient at `θ0` is the score-function
/// estimate computed from the same batch.
struct WeightedObjective<'a> {
    model: &'a Model,
    latent: Dataset,
    base_logq: Vec<f64>,
    gram: Vec<f64>,
    cross: Vec<f64>,
    data_self: f64,
}

impl WeightedObjective<'_> {
    fn value(&self, theta: &ParamVector) -> Result<f64> {
        let m = self.latent.len();
        let mut w = Vec::with_capacity(m);
        for j in 0..m {
            let lq = self.model.log_density(theta, self.latent.row(j))?;
            w.push((lq - self.base_logq[j]).exp());
        }
        let mut pair = 0.0;
        for j in 0..m {
            let row = &self.gram[j * m..(j + 1) * m];
            let s: f64 = row.iter().zip(&w).map(|(k, wl)| k * wl).sum::<f64>() - row[j] * w[j];
            pair += w[j] * s;
        }
        let cross: f64 = w.iter().zip(&self.cross).map(|(a, b)| a * b).sum();
        Ok(self.data_self + pair / (m * (m - 1)) as f64 - 2.0 * cross / m as f64)
    }
}

fn gradient_family(preset: &str) -> Result<(Model, ParamVector, Dataset, NoiseModel)> {
    let mut spec = presets::load(preset)?;
    spec.n = GRADIENT_M;
    let seed = spec.seed.unwrap_or(0);
    let (model, theta) = truth_model(&spec)?;
    let g = generate_with(&spec, GRADIENT_M, setting_seed(seed, 0), 0)?;
    Ok((model, theta, g.noisy, spec.noise_model()?))
}

fn gradient_check(seed: u64, pairs: usize, log: &(dyn Fn(&str) + Sync)) -> Result<Partial> {
    let mut p = Partial::default();
    let mut rows = Vec::new();
    for (fi, (family, preset)) in [
        ("gmm", "table1_gaussian_homo"),
        ("linear-eiv", "table2_gaussian_homo"),
        ("logistic-eiv", "logistic"),
    ]
    .into_iter()
    .enumerate()
    {
        let (model, truth, data, noise) = gradient_family(preset)?;
        let kernel = KernelMixture::median_multiscale(&data, seed)?;
        let problem = ConvMmdProblem::new(&model, &data, &noise, &kernel, Backend::Exact)?;
        let names = model.param_names();
        let (mut worst, mut worst_rel, mut failures) = (0.0f64, 0.0f64, 0usize);
        for pair in 0..pairs {
            let pseed = derive_seed(derive_seed(seed, fi as u64), pair as u64);
            let mut jitter = rng_from_seed(role_seed(pseed, 0, Role::Data));
            let theta0 = ParamVector(
                truth
                    .0
                    .iter()
                    .map(|t| t + GRADIENT_JITTER * jitter.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let mut rng = rng_from_seed(role_seed(pseed, 0, Role::Fit));
            let latent_batch = model.sample_batch(&theta0, GRADIENT_M, &mut rng)?;
            let mut batch = latent_batch.clone();
            noise.perturb(&mut batch.draws, &mut rng)?;
            let est = problem.gradient_from_batch(&batch)?;
            let m = batch.len();
            let mut gram = vec![0.0; m * m];
            for j in 0..m {
                for l in j..m {
                    let k = kernel.eval(batch.draws.row(j), batch.draws.row(l));
                    gram[j * m + l] = k;
                    gram[l * m + j] = k;
                }
            }
            let base_logq = (0..m)
                .map(|j| model.log_density(&theta0, latent_batch.draws.row(j)))
                .collect::<convmmd::Result<Vec<f64>>>()?;
            let obj = WeightedObjective {
                model: &model,
                latent: latent_batch.draws.clone(),
                base_logq,
                gram,
                cross: problem.data_means(&batch.draws)?,
                data_self: problem.data_self_term(),
            };
            for (i, name) in names.iter().enumerate() {
                let (mut up, mut dn) = (theta0.clone(), theta0.clone());
                up.0[i] += GRADIENT_H;
                dn.0[i] -= GRADIENT_H;
                let fd = (obj.value(&up)? - obj.value(&dn)?) / (2.0 * GRADIENT_H);
                let mc = est.gradient[i];
                let dev = (mc - fd).abs();
                let allowed = (0.05 * fd.abs()).max(1e-4);
                let ok = dev <= allowed;
                worst = worst.max(dev / allowed);
                if fd.abs() > 1e-4 {
                    worst_rel = worst_rel.max(dev / fd.abs());
                }
                failures += usize::from(!ok);
                rows.push(vec![
                    family.to_string(),
                    pair.to_string(),
                    pseed.to_string(),
                    name.clone(),
                    f(mc),
                    f(fd),
                    f(dev),
                    u8::from(ok).to_string(),
                ]);
            }
        }
        log(&format!("[gradient-check] {family}: {pairs} pairs done"));
        p.checks.push(Check::new(
            format!("{family} score gradient vs finite difference"),
            format!(
                "{failures} failing components over {pairs} pairs; max relative deviation {worst_rel:.2e}; max deviation / allowance {worst:.3}"
            ),
            "within 5% relative, 1e-4 absolute floor",
            failures == 0,
        ));
    }
    p.notes.push(format!(
        "finite differences of the importance-weighted objective of each fixed batch; M = N = {GRADIENT_M}, h = {GRADIENT_H}, exact kernel sums"
    ));
    p.files.push((
        "gradient_check.csv".into(),
        csv_bytes(
            &["family", "pair", "seed", "param", "mc_gradient", "fd_gradient", "abs_dev", "pass"],
            &rows,
        )?,
    ));
    Ok(p)
}

/// Closed form of the worked Gaussian-mean example, as usually quoted
/// (the formula evaluates to `250 / 21^1.5 = 2.597832`).
pub const REFERENCE_VALUE: f64 = 2.59829;
const CLOSED_FORM_N: usize = 5000;
const CLOSED_FORM_SWEEP: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Monte Carlo sandwich variance of the mean for `N(θ, 1)` data under
/// `N(0, 1)` noise and a single Gaussian kernel of bandwidth `l`.
fn gaussian_mean_sandwich(seed: u64, l: f64, batches: usize) -> Result<f64> {
    let model = Model::gmm(1);
    let truth = model.from_natural(&NaturalParams::Gmm {
        mixture: Mixture::new(vec![1.0], vec![0.0], vec![1.0])?,
    })?;
    let noise = NoiseModel::gaussian(1.0)?;
    let mut rng = rng_from_seed(role_seed(seed, 0, Role::Data));
    let mut data = model.sample_latent(&truth, CLOSED_FORM_N, &mut rng)?;
    noise.perturb(&mut data, &mut rng_from_seed(role_seed(seed, 0, Role::Noise)))?;
    let kernel = KernelMixture::single(&[l])?;
    let problem = ConvMmdProblem::new(&model, &data, &noise, &kernel, Backend::for_fitting(1))?;
    let mean_idx = model
        .index_of("mean[1]")
        .ok_or_else(|| SimError::Inconsistent("no mean parameter".into()))?;
    let s = sandwich_covariance(
        &problem,
        &truth,
        &[mean_idx],
        batches,
        CLOSED_FORM_N,
        role_seed(seed, 0, Role::Sandwich),
    )?;
    Ok(s.variance(0))
}

fn closed_form(seed: u64, batches: usize) -> Result<Partial> {
    let mut p = Partial::default();
    let cf = closed_form_gaussian_scalar(1.0, 1.0, 1.0, 1)?;
    let exact = 250.0 / 21f64.powf(1.5);
    let rel_printed = (cf / REFERENCE_VALUE - 1.0).abs();
    p.checks.push(Check::new(
        "closed form at sigma = tau = l = 1, d = 1",
        format!("{cf:.6} (250 / 21^1.5 = {exact:.6}; relative gap to {REFERENCE_VALUE} is {rel_printed:.1e})"),
        format!("equals 250 / 21^1.5 and within 5e-4 relative of {REFERENCE_VALUE}"),
        (cf - exact).abs() <= 1e-12 && rel_printed <= 5e-4,
    ));
    let mc = gaussian_mean_sandwich(seed, 1.0, batches)?;
    let rel = (mc / cf - 1.0).abs();
    p.checks.push(Check::new(
        format!("Monte Carlo sandwich at N = {CLOSED_FORM_N}"),
        format!("{mc:.4}, relative gap {rel:.4}"),
        "gap <= 0.15",
        rel <= 0.15,
    ));
    let mut rows = Vec::new();
    let mut closed = Vec::new();
    for (i, &l) in CLOSED_FORM_SWEEP.iter().enumerate() {
        let c = closed_form_gaussian_scalar(1.0, 1.0, l, 1)?;
        let m = gaussian_mean_sandwich(derive_seed(seed, i as u64 + 1), l, batches)?;
        closed.push(c);
        rows.push(vec![f(l), f(c), f(m)]);
    }
    let argmin = closed
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let interior = argmin > 0 && argmin + 1 < closed.len();
    p.checks.push(Check::new(
        "bandwidth sweep has an interior minimum",
        format!(
            "closed form minimized at l = {} over {:?}; values {}",
            CLOSED_FORM_SWEEP[argmin],
            CLOSED_FORM_SWEEP,
            closed.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(", ")
        ),
        "argmin strictly inside the sweep",
        interior,
    ));
    if !interior {
        p.notes.push(
            "the closed form decreases monotonically in l toward sigma^2 + tau^2, so no interior minimum exists for this model"
                .into(),
        );
    }
    p.files.push((
        "closed_form_sweep.csv".into(),
        csv_bytes(&["l", "closed_form", "mc_sandwich"], &rows)?,
    ));
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        let e = "bogus".parse::<Target>().unwrap_err().to_string();
        assert!(e.contains("gradient-check"));
    }

    #[test]
    fn config_design_must_match_target() {
        let opts = VerifyOptions {
            spec: Some(presets::load("clt").unwrap()),
            ..Default::default()
        };
        assert!(verify(Target::Equivalence, &opts).unwrap_err().is_usage());
        assert!(verify(Target::GradientCheck, &opts).unwrap_err().is_usage());
    }

    #[test]
    fn median_helper() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
