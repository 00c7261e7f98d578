//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! ```text
//! cargo test --release -p convmmd-cli --test acceptance            # everything
//! cargo test --release -p convmmd-cli --test acceptance -- 4 6 10  # a subset
//! CONVMMD_QUICK=1 cargo test --release -p convmmd-cli --test acceptance
//! ```
//!
//! Quick mode runs the verification targets with their reduced replication
//! counts (100 for the CLT rate, 200 for the bound checks). Exits nonzero if
//! any criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use convmmd_simlab::experiment::ExperimentReport;
use convmmd_simlab::verify::{verify_with, Target, VerifyOptions};
use convmmd_simlab::{presets, run_experiment};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn target(t: Target, quick: bool) -> Verdict {
    let opts = VerifyOptions {
        quick,
        ..Default::default()
    };
    match verify_with(t, &opts, &|_| {}) {
        Ok(o) => {
            let failed: Vec<String> = o.checks.iter().filter(|c| !c.pass).map(|c| c.line()).collect();
            let detail = if failed.is_empty() {
                o.checks.iter().map(|c| format!("{}: {}", c.name, c.measured)).collect::<Vec<_>>().join("; ")
            } else {
                failed.join("; ")
            };
            verdict(o.passed(), detail)
        }
        Err(e) => verdict(false, format!("error: {e}")),
    }
}

fn experiment(preset: &str) -> Result<ExperimentReport, String> {
    let spec = presets::load(preset).map_err(|e| e.to_string())?;
    let r = run_experiment(&spec).map_err(|e| e.to_string())?;
    r.check_aggregates().map_err(|e| e.to_string())?;
    Ok(r)
}

fn mean(r: &ExperimentReport, method: &str, metric: &str) -> Option<f64> {
    r.aggregates
        .iter()
        .find(|a| a.method == method && a.metric == metric)
        .map(|a| a.mean)
}

fn mixture_fits() -> Verdict {
    let homo = match experiment("table1_gaussian_homo") {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("table1_gaussian_homo: {e}")),
    };
    let t = match experiment("table1_student_t_hetero") {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("table1_student_t_hetero: {e}")),
    };
    let (Some(c_sd), Some(n_sd), Some(c_mean), Some(c_dens), Some(n_dens)) = (
        mean(&homo, "convmmd", "sds_mae"),
        mean(&homo, "naive-gmm", "sds_mae"),
        mean(&homo, "convmmd", "means_mae"),
        mean(&t, "convmmd", "density_mae"),
        mean(&t, "naive-gmm", "density_mae"),
    ) else {
        return verdict(false, "missing aggregates");
    };
    let a = c_sd < n_sd && (0.05..=0.60).contains(&c_mean);
    let b = c_dens < n_dens;
    verdict(
        a && b,
        format!(
            "(a) sd MAE convmmd {c_sd:.3} vs naive {n_sd:.3}, means MAE {c_mean:.3} (want in [0.05, 0.60]); \
             (b) student-t density MAE convmmd {c_dens:.4} vs naive {n_dens:.4}"
        ),
    )
}

fn regression_fits() -> Verdict {
    let cases = [
        ("table2_gaussian_homo", true),
        ("table2_uniform_homo", false),
        ("table2_gaussian_hetero", true),
        ("table2_laplace_hetero", false),
        ("table2_student_t_hetero", false),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (preset, gaussian_x) in cases {
        let r = match experiment(preset) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("{preset}: {e}")),
        };
        let (Some(c), Some(o), Some(ob)) = (
            mean(&r, "convmmd", "beta_mae"),
            mean(&r, "ols", "beta_mae"),
            mean(&r, "ols", "beta"),
        ) else {
            return verdict(false, format!("{preset}: missing aggregates"));
        };
        let mut ok = c < o;
        let mut part = format!("{}: beta MAE {c:.3} vs ols {o:.3}", preset.trim_start_matches("table2_"));
        if gaussian_x {
            ok &= ob < 0.7;
            part += &format!(", ols beta mean {ob:.3}");
        }
        if preset == "table2_gaussian_homo" {
            ok &= c <= 0.25;
        }
        pass &= ok;
        parts.push(part);
    }
    verdict(pass, parts.join("; "))
}

fn logistic() -> Verdict {
    let r = match experiment("logistic") {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("logistic: {e}")),
    };
    let get = |m: &str, k: &str| mean(&r, m, k).unwrap_or(f64::NAN);
    let (c1, n1) = (get("convmmd", "beta1_mae"), get("naive-glm", "beta1_mae"));
    let (c2, n2) = (get("convmmd", "beta2_mae"), get("naive-glm", "beta2_mae"));
    let (cb, nb) = (get("convmmd", "brier"), get("naive-glm", "brier"));
    verdict(
        c1 <= n1 && c2 <= n2 && cb <= nb,
        format!(
            "beta1 MAE {c1:.3} vs {n1:.3}; beta2 MAE {c2:.3} vs {n2:.3}; Brier {cb:.4} vs {nb:.4}"
        ),
    )
}

fn plumbing() -> Verdict {
    let mut spec = match presets::load("clt") {
        Ok(s) => s,
        Err(e) => return verdict(false, e.to_string()),
    };
    spec.n = 300;
    spec.n_grid = None;
    spec.replications = 3;
    spec.fit.n_iter = Some(200);
    spec.covariance.enabled = false;
    let runs: Vec<_> = (0..2).map(|_| run_experiment(&spec)).collect();
    let (a, b) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return verdict(false, "experiment failed"),
    };
    let same = matches!((a.to_json(), b.to_json()), (Ok(x), Ok(y)) if x == y);
    let recompute = a.check_aggregates().is_ok();

    let exe = env!("CARGO_BIN_EXE_convmmd");
    let status = |args: &[&str]| Command::new(exe).args(args).output().ok().and_then(|o| o.status.code());
    let codes = [
        (status(&["verify", "gradient-check", "--quick"]), 0),
        (status(&["verify", "closed-form", "--quick"]), 1),
        (status(&["verify", "no-such-target"]), 2),
        (status(&["experiment", "--preset", "no-such-preset"]), 2),
    ];
    let exit_ok = codes.iter().all(|(got, want)| *got == Some(*want));
    verdict(
        same && recompute && exit_ok,
        format!(
            "byte-identical report: {same}; aggregates recompute: {recompute}; exit codes {:?} (want 0, 1, 2, 2)",
            codes.iter().map(|(c, _)| c.unwrap_or(-1)).collect::<Vec<_>>()
        ),
    )
}

type Criterion = (usize, &'static str, f64, Box<dyn Fn(bool) -> Verdict>);

fn main() -> ExitCode {
    let quick = std::env::var("CONVMMD_QUICK").is_ok_and(|v| v != "0" && !v.is_empty());
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<Criterion> = vec![
        (1, "equivalence of convMMD and noise-kernel MMD", 300.0, Box::new(|q| target(Target::Equivalence, q))),
        (2, "deviation bound and 1/sqrt(N) rate", 600.0, Box::new(|q| target(Target::DeviationBound, q))),
        (3, "variance inflation bound", 600.0, Box::new(|q| target(Target::VarianceBound, q))),
        (4, "score-function gradient vs finite differences", 120.0, Box::new(|q| target(Target::GradientCheck, q))),
        (5, "CLT and variance rate for scale estimation", 1800.0, Box::new(|q| target(Target::CltRate, q))),
        (6, "closed-form sandwich variance and bandwidth sweep", 600.0, Box::new(|q| target(Target::ClosedForm, q))),
        (7, "mixture fits against naive EM", 1500.0, Box::new(|_| mixture_fits())),
        (8, "errors-in-variables fits against least squares", 1500.0, Box::new(|_| regression_fits())),
        (9, "logistic fits against the naive GLM", 1200.0, Box::new(|_| logistic())),
        (10, "determinism and CLI plumbing", 120.0, Box::new(|_| plumbing())),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let v = run(quick);
        let secs = t0.elapsed().as_secs_f64();
        let pass = v.pass && secs <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} [{secs:.1}s, budget {budget:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
