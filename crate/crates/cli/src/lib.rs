//! The `convmmd` command-line tool.
//!
//! Exit codes: 0 on success, 1 when `verify` reports a failed check, 2 for
//! usage, config, data or I/O errors.

pub mod data;
pub mod error;
pub mod fit;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use convmmd::rng::role_seed;
use convmmd_simlab::experiment::settings;
use convmmd_simlab::generate::{generate_with, setting_seed};
use convmmd_simlab::io::{csv_bytes, write_atomic};
use convmmd_simlab::verify::verify_with;
use convmmd_simlab::{presets, run_experiment_with, ExperimentSpec, Target, VerifyOptions};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::fit::{covariance_report, prepare, run_fit, summary, FitReport, FitSpec};

#[derive(Debug, Parser)]
#[command(name = "convmmd", version, about = "Deconvolution fits by minimizing MMD between noisy samples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV dataset.
    Fit(FitArgs),
    /// Run a simulation experiment.
    Experiment(ExperimentArgs),
    /// Run a verification target and report PASS/FAIL per check.
    Verify(VerifyArgs),
    /// Recompute the sandwich covariance of a saved fit.
    Cov(CovArgs),
    /// Write synthetic datasets without fitting anything.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Fit config (TOML).
    pub config: PathBuf,
    /// Output directory for fit.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SpecSource {
    /// Experiment config (TOML).
    #[arg(conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in experiment instead of a config file.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// One of: equivalence, deviation-bound, variance-bound, clt-rate,
    /// gradient-check, closed-form.
    pub target: String,
    /// Experiment config replacing the target's default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fewer replications.
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CovArgs {
    /// A fit.json written by `fit`.
    pub fit: PathBuf,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch_m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Where to write cov.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    Failed,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(Done::Ok) => 0,
        Ok(Done::Failed) => 1,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<Done> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, out, err),
        Command::Experiment(a) => cmd_experiment(a, out, err),
        Command::Verify(a) => cmd_verify(a, out, err),
        Command::Cov(a) => cmd_cov(a, out),
        Command::Simulate(a) => cmd_simulate(a, out, err),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn json_bytes<T: Serialize>(v: &T, path: &Path) -> Result<Vec<u8>> {
    let s = serde_json::to_string_pretty(v).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((s + "\n").into_bytes())
}

/// Seed from the flag, then the config, then fresh entropy (announced).
fn resolve_seed(flag: Option<u64>, config: Option<u64>, err: &mut dyn Write) -> u64 {
    flag.or(config).unwrap_or_else(|| {
        let s = rand::random::<u64>() >> 1;
        let _ = writeln!(err, "seed: {s}");
        s
    })
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_spec(source: &SpecSource) -> Result<ExperimentSpec> {
    match (&source.config, &source.preset) {
        (Some(p), _) => Ok(ExperimentSpec::from_toml_str(&read_text(p)?)
            .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?),
        (None, Some(name)) => Ok(presets::load(name)?),
        (None, None) => Err(CliError::usage("give a config file or --preset")),
    }
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Done> {
    let spec = FitSpec::from_toml_str(&read_text(&a.config)?)?;
    let seed = resolve_seed(a.seed, spec.seed, err);
    let base = a.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let report = run_fit(&spec, &base, seed)?;
    let path = a.out.join("fit.json");
    write_atomic(&path, &json_bytes(&report, &path)?)?;
    let _ = write!(out, "{}", summary(&report));
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(Done::Ok)
}

fn cmd_cov(a: CovArgs, out: &mut dyn Write) -> Result<Done> {
    let text = read_text(&a.fit)?;
    let report: FitReport = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: a.fit.clone(),
        source,
    })?;
    let mut section = report.config.covariance.clone();
    if let Some(b) = a.batches {
        section.batches = Some(b);
    }
    if let Some(m) = a.batch_m {
        section.batch_m = Some(m);
    }
    if let Some(l) = a.level {
        if !(l > 0.0 && l < 1.0) {
            return Err(CliError::usage("--level must lie in (0, 1)"));
        }
        section.level = Some(l);
    }
    let seed = a.seed.unwrap_or(report.seed);
    let prepared = prepare(&report.config, &report.data_path, report.seed)?;
    let free = report.fit.config.free_indices(&report.model);
    let cov = covariance_report(&prepared, &report.theta_hat, &free, &section, seed)?;
    let mut shown = report.clone();
    shown.covariance = Some(cov.clone());
    let _ = write!(out, "{}", summary(&shown));
    if let Some(p) = a.out {
        write_atomic(&p, &json_bytes(&cov, &p)?)?;
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(Done::Ok)
}

fn cmd_experiment(a: ExperimentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Done> {
    set_threads(a.threads)?;
    let mut spec = load_spec(&a.source)?;
    spec.seed = Some(resolve_seed(a.seed, spec.seed, err));
    if let Some(r) = a.replications {
        spec.replications = r;
    }
    let report = run_experiment_with(&spec, &|line| eprintln!("{line}"))?;
    let files = report.write(&a.out)?;
    let _ = writeln!(
        out,
        "{:<24} {:<12} {:<24} {:>5} {:>14} {:>12}",
        "setting", "method", "metric", "n", "mean", "se"
    );
    for g in &report.aggregates {
        let se = g.se.map(|s| format!("{s:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:<24} {:>5} {:>14.6} {:>12}",
            g.setting, g.method, g.metric, g.n, g.mean, se
        );
    }
    for n in &report.notes {
        let _ = writeln!(out, "note: {n}");
    }
    for f in files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    Ok(Done::Ok)
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Done> {
    let target: Target = a.target.parse().map_err(CliError::Sim)?;
    set_threads(a.threads)?;
    let spec = match &a.config {
        Some(p) => Some(
            ExperimentSpec::from_toml_str(&read_text(p)?)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let opts = VerifyOptions {
        quick: a.quick,
        seed: a.seed,
        replications: a.replications,
        spec,
    };
    let outcome = verify_with(target, &opts, &|line| eprintln!("{line}"))?;
    let _ = writeln!(err, "{} seed {}", target.name(), outcome.seed);
    for line in outcome.lines() {
        let _ = writeln!(out, "{line}");
    }
    for n in &outcome.notes {
        let _ = writeln!(out, "note: {n}");
    }
    if let Some(dir) = &a.out {
        for f in outcome.write(dir)? {
            let _ = writeln!(out, "wrote {}", f.display());
        }
    }
    Ok(if outcome.passed() { Done::Ok } else { Done::Failed })
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    spec: &'a ExperimentSpec,
    files: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    setting: String,
    rep: usize,
    n: usize,
    seed: u64,
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<Done> {
    let mut spec = load_spec(&a.source)?;
    if !spec.design.fits_models() {
        return Err(CliError::usage(format!(
            "design `{}` produces statistics, not datasets; simulate supports gmm, eivr, logistic and clt",
            spec.design.name()
        )));
    }
    let seed = resolve_seed(a.seed, spec.seed, err);
    spec.seed = Some(seed);
    if let Some(r) = a.replications {
        spec.replications = r;
    }
    spec.validate()?;
    let coords = spec.coordinates()?;
    let mut header: Vec<String> = coords.clone();
    header.extend(coords.iter().map(|c| format!("clean_{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut entries = Vec::new();
    for (s, setting) in settings(&spec).iter().enumerate() {
        let sseed = setting_seed(seed, s);
        for rep in 0..spec.replications {
            let g = generate_with(&spec, setting.n, sseed, rep)?;
            let d = coords.len();
            let rows: Vec<Vec<String>> = (0..g.noisy.len())
                .map(|i| {
                    let mut r: Vec<String> = (0..d).map(|j| g.noisy.row(i)[j].to_string()).collect();
                    r.extend((0..d).map(|j| g.clean.row(i)[j].to_string()));
                    r
                })
                .collect();
            let name = format!("s{s}_rep{rep}.csv");
            write_atomic(&a.out.join(&name), &csv_bytes(&header, &rows)?)?;
            entries.push(ManifestEntry {
                file: name,
                setting: setting.label.clone(),
                rep,
                n: setting.n,
                seed: role_seed(sseed, rep as u64, convmmd::rng::Role::Data),
            });
        }
    }
    let n_files = entries.len();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed,
        spec: &spec,
        files: entries,
    };
    let p = a.out.join("manifest.json");
    write_atomic(&p, &json_bytes(&manifest, &p)?)?;
    let _ = writeln!(out, "wrote {n_files} datasets and {}", p.display());
    Ok(Done::Ok)
}
