//! `fit` and `cov`: estimation on a user dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use convmmd::asymptotics::{ci_from_covariance, sandwich_covariance, SandwichEstimate};
use convmmd::models::NaturalParams;
use convmmd::optim::{fit_problem, warm_start, ConvMmdProblem, FitResult};
use convmmd::rng::{role_seed, Role};
use convmmd::{Backend, Dataset, KernelMixture, Model, NoiseModel, ParamVector};
use convmmd_simlab::config::{
    build_noise_model, with_empirical_scales, CovarianceSection, FitSection, KernelSection,
};
use convmmd_simlab::NoiseBlock;
use serde::{Deserialize, Serialize};

use crate::data::{read_csv, Table};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gmm,
    LinearEiv,
    LogisticEiv,
}

/// Contents of a `fit` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    /// CSV path, relative to the config file.
    pub data: PathBuf,
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// CSV columns feeding the model coordinates, in model order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Parameter names held at their initial values.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<String>,
    /// Starting values by parameter name; override the warm start.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub init: BTreeMap<String, f64>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub covariance: CovarianceSection,
    #[serde(default)]
    pub noise: Vec<NoiseBlock>,
}

/// Default number of iterations and cap on the model batch size.
const DEFAULT_ITER: usize = 2000;
const DEFAULT_BATCH_CAP: usize = 1000;

impl FitSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CliError::usage(format!("fit config: {e}")))
    }

    fn components(&self) -> usize {
        self.components.unwrap_or(1)
    }

    /// Model and the CSV column behind each of its coordinates.
    fn model_and_columns(&self, table: &Table) -> Result<(Model, Vec<String>)> {
        let k = self.components();
        let model = match self.model {
            ModelKind::Gmm => Model::gmm(k),
            ModelKind::LinearEiv => Model::LinearEiv { components: k },
            ModelKind::LogisticEiv => {
                let features = match &self.columns {
                    Some(c) if c.len() >= 2 => c.len() - 1,
                    Some(_) => {
                        return Err(CliError::usage(
                            "logistic-eiv needs at least one feature column and the response column",
                        ))
                    }
                    None => (1..)
                        .take_while(|f| table.column(&format!("x{f}")).is_some())
                        .count(),
                };
                if features == 0 {
                    return Err(CliError::usage(
                        "logistic-eiv: no feature columns; name them x1, x2, ... or set `columns`",
                    ));
                }
                Model::LogisticEiv { features, components: k }
            }
        };
        let columns = match &self.columns {
            Some(c) if c.len() != model.data_dim() => {
                return Err(CliError::usage(format!(
                    "`columns` lists {} names but the model has {} coordinates ({})",
                    c.len(),
                    model.data_dim(),
                    model.coordinate_names().join(", ")
                )))
            }
            Some(c) => c.clone(),
            None => model.coordinate_names(),
        };
        Ok((model, columns))
    }
}

/// Everything a fit needs, rebuilt identically by `cov`.
pub struct Prepared {
    pub model: Model,
    pub columns: Vec<String>,
    pub data: Dataset,
    pub noise: NoiseModel,
    pub kernel: KernelMixture,
    pub backend: Backend,
    pub empirical_scales: Vec<String>,
}

impl Prepared {
    pub fn problem(&self) -> Result<ConvMmdProblem<'_>> {
        Ok(ConvMmdProblem::new(
            &self.model,
            &self.data,
            &self.noise,
            &self.kernel,
            self.backend,
        )?)
    }
}

pub fn prepare(spec: &FitSpec, data_path: &Path, seed: u64) -> Result<Prepared> {
    let table = read_csv(data_path)?;
    let (model, columns) = spec.model_and_columns(&table)?;
    let data = table.select(&columns, data_path)?;
    let noiseless = model.noiseless_coordinates();
    let noise = build_noise_model(&spec.noise, &columns, &noiseless)?;
    let mut coords = noise.coords().to_vec();
    let mut empirical_scales = Vec::new();
    for (j, name) in columns.iter().enumerate() {
        let key = format!("scale_{name}");
        if let Some(scales) = table.column(&key) {
            if noiseless.contains(&j) {
                return Err(CliError::usage(format!(
                    "column `{key}` given for `{name}`, which is observed without noise"
                )));
            }
            coords[j] = with_empirical_scales(&coords[j], scales.to_vec())?;
            empirical_scales.push(key);
        }
    }
    let noise = NoiseModel::new(coords)?;
    let kernel = spec.kernel.kernel_for(&data, role_seed(seed, 0, Role::Data))?;
    let backend = spec.kernel.backend(Backend::for_fitting(model.data_dim()));
    Ok(Prepared {
        model,
        columns,
        data,
        noise,
        kernel,
        backend,
        empirical_scales,
    })
}

fn param_index(model: &Model, name: &str) -> Result<usize> {
    model.index_of(name).ok_or_else(|| {
        CliError::usage(format!(
            "unknown parameter `{name}`; valid: {}",
            model.param_names().join(", ")
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub param: String,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub level: f64,
    pub n: usize,
    pub sandwich: SandwichEstimate,
    pub intervals: Vec<Interval>,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub seed: u64,
    /// The config as given, with the seed filled in.
    pub config: FitSpec,
    /// The data file actually read.
    pub data_path: PathBuf,
    pub n: usize,
    pub model: Model,
    pub columns: Vec<String>,
    pub empirical_scales: Vec<String>,
    pub kernel: KernelMixture,
    pub param_names: Vec<String>,
    pub theta_hat: ParamVector,
    pub natural: NaturalParams,
    pub fit: FitResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceReport>,
}

pub fn covariance_report(
    prepared: &Prepared,
    theta: &ParamVector,
    free: &[usize],
    section: &CovarianceSection,
    seed: u64,
) -> Result<CovarianceReport> {
    let n = prepared.data.len();
    let problem = prepared.problem()?;
    let s = sandwich_covariance(
        &problem,
        theta,
        free,
        section.batches(),
        section.batch_m.unwrap_or(n),
        role_seed(seed, 0, Role::Sandwich),
    )?;
    let level = section.level();
    let full = s.full_covariance(theta.len());
    let ci = ci_from_covariance(theta.as_slice(), &full, n, level)?;
    let intervals = prepared
        .model
        .param_names()
        .into_iter()
        .zip(theta.as_slice())
        .zip(ci)
        .map(|((param, &estimate), (lo, hi))| Interval { param, estimate, lo, hi })
        .collect();
    Ok(CovarianceReport {
        level,
        n,
        sandwich: s,
        intervals,
    })
}

/// Runs the fit described by `spec`; `base` resolves the data path.
pub fn run_fit(spec: &FitSpec, base: &Path, seed: u64) -> Result<FitReport> {
    let data_path = base.join(&spec.data);
    let prepared = prepare(spec, &data_path, seed)?;
    let model = &prepared.model;
    let n = prepared.data.len();
    let fixed = spec
        .fixed
        .iter()
        .map(|name| param_index(model, name))
        .collect::<Result<Vec<_>>>()?;
    let mut init = if spec.fit.warm_start.unwrap_or(true) {
        warm_start(model, &prepared.data, role_seed(seed, 0, Role::Baseline))?
    } else {
        let missing: Vec<String> = model
            .param_names()
            .into_iter()
            .filter(|p| !spec.init.contains_key(p))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::usage(format!(
                "warm_start = false needs every parameter in [init]; missing {}",
                missing.join(", ")
            )));
        }
        ParamVector(vec![0.0; model.n_params()])
    };
    for (name, v) in &spec.init {
        init.0[param_index(model, name)?] = *v;
    }
    model.validate_params(&init)?;
    let config = spec.fit.to_fit_config(
        DEFAULT_ITER,
        n.min(DEFAULT_BATCH_CAP),
        role_seed(seed, 0, Role::Fit),
        prepared.backend,
        fixed.clone(),
    )?;
    let problem = prepared.problem()?;
    let fit = fit_problem(&problem, &config, &init)?;
    let theta_hat = fit.theta_hat.clone();
    let covariance = if spec.covariance.enabled {
        let free = fit.config.free_indices(model);
        Some(covariance_report(&prepared, &theta_hat, &free, &spec.covariance, seed)?)
    } else {
        None
    };
    let mut echo = spec.clone();
    echo.seed = Some(seed);
    Ok(FitReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: echo,
        data_path,
        n,
        model: model.clone(),
        columns: prepared.columns.clone(),
        empirical_scales: prepared.empirical_scales.clone(),
        kernel: prepared.kernel.clone(),
        param_names: model.param_names(),
        natural: model.natural(&theta_hat)?,
        theta_hat,
        fit,
        covariance,
    })
}

/// Natural-scale name and transform of an unconstrained parameter.
fn natural_name(name: &str) -> Option<String> {
    if name.contains("logit[") {
        None
    } else if let Some(i) = name.find("log_") {
        Some(format!("{}{}", &name[..i], &name[i + 4..]))
    } else {
        Some(name.to_string())
    }
}

/// Text table of estimates, with intervals when present.
pub fn summary(report: &FitReport) -> String {
    let mut s = String::new();
    let ci: BTreeMap<&str, &Interval> = report
        .covariance
        .iter()
        .flat_map(|c| c.intervals.iter().map(|i| (i.param.as_str(), i)))
        .collect();
    let level = report.covariance.as_ref().map(|c| c.level);
    let _ = writeln!(s, "model {:?}, n = {}, seed = {}", report.model, report.n, report.seed);
    match level {
        Some(l) => {
            let _ = writeln!(s, "{:<18} {:>12} {:>12} {:>12}", "param", "estimate", "lo", "hi");
            let _ = writeln!(s, "{:<18} {:>12} {:>12} {:>12}", "", "", format!("{}%", l * 100.0), "");
        }
        None => {
            let _ = writeln!(s, "{:<18} {:>12}", "param", "estimate");
        }
    }
    for (name, &v) in report.param_names.iter().zip(report.theta_hat.as_slice()) {
        let Some(nat) = natural_name(name) else {
            continue;
        };
        let exp = nat != *name;
        let t = |x: f64| if exp { x.exp() } else { x };
        match ci.get(name.as_str()) {
            Some(i) => {
                let _ = writeln!(s, "{nat:<18} {:>12.6} {:>12.6} {:>12.6}", t(v), t(i.lo), t(i.hi));
            }
            None => {
                let _ = writeln!(s, "{nat:<18} {:>12.6}", t(v));
            }
        }
    }
    let weights = |m: &convmmd::models::Mixture| {
        m.weights
            .iter()
            .map(|w| format!("{w:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    match &report.natural {
        NaturalParams::Gmm { mixture } if mixture.components() > 1 => {
            let _ = writeln!(s, "weights [{}]", weights(mixture));
        }
        NaturalParams::LinearEiv { x, .. } if x.components() > 1 => {
            let _ = writeln!(s, "x weights [{}]", weights(x));
        }
        NaturalParams::LogisticEiv { features, .. } => {
            for (f, m) in features.iter().enumerate().filter(|(_, m)| m.components() > 1) {
                let _ = writeln!(s, "x{} weights [{}]", f + 1, weights(m));
            }
        }
        _ => {}
    }
    if let Some(c) = &report.covariance {
        for w in &c.sandwich.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_names() {
        assert_eq!(natural_name("log_sd[2]").as_deref(), Some("sd[2]"));
        assert_eq!(natural_name("x1.log_sd[1]").as_deref(), Some("x1.sd[1]"));
        assert_eq!(natural_name("log_sigma_reg").as_deref(), Some("sigma_reg"));
        assert_eq!(natural_name("beta[1]").as_deref(), Some("beta[1]"));
        assert_eq!(natural_name("x.logit[1]"), None);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let src = r#"
data = "d.csv"
model = "gmm"
components = 2
fixed = ["logit[1]"]

[init]
"mean[1]" = 0.5

[[noise]]
coord = "x"
family = "gaussian"
scale = 1.0
"#;
        let s = FitSpec::from_toml_str(src).unwrap();
        assert_eq!(s.components(), 2);
        let again = FitSpec::from_toml_str(&toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, again);
        assert!(FitSpec::from_toml_str("data = \"d.csv\"\nmodel = \"gmm\"\nbogus = 1\n").is_err());
        assert!(FitSpec::from_toml_str("data = \"d.csv\"\nmodel = \"probit\"\n").is_err());
    }
}
