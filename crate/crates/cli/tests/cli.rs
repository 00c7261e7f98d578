use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn convmmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convmmd"))
        .args(args)
        .output()
        .expect("spawn convmmd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SCALE_DATA: &str = r#"
design = "clt"
n = 5000
replications = 1
seed = 17

[truth]
mean = 0.0
sigma = 2.0

[[noise]]
coord = "x"
family = "gaussian"
scale = 1.0
"#;

const SCALE_FIT: &str = r#"
data = "s0_rep0.csv"
model = "gmm"
components = 1
seed = 5

[fit]
learning_rate = 0.01
n_iter = 2000

[kernel]
mode = "fixed"
bandwidths = [1.0]

[covariance]
enabled = true
batches = 10
batch_m = 2000

[[noise]]
coord = "x"
family = "gaussian"
scale = 1.0
"#;

fn simulate_scale_data(dir: &Path) {
    let cfg = dir.join("sim.toml");
    fs::write(&cfg, SCALE_DATA).unwrap();
    let o = convmmd(&["simulate", p(&cfg), "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn fit_recovers_scale_with_interval_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate_scale_data(dir.path());
    let head = fs::read_to_string(dir.path().join("s0_rep0.csv")).unwrap();
    assert!(head.starts_with("x,clean_x\n"));

    let cfg = dir.path().join("fit.toml");
    fs::write(&cfg, SCALE_FIT).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = convmmd(&["fit", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("sd[1]"), "{}", stdout(&o));

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("fit.json")).unwrap()).unwrap();
    let iv = report["covariance"]["intervals"]
        .as_array()
        .unwrap()
        .iter()
        .find(|i| i["param"] == "log_sd[1]")
        .unwrap();
    let (lo, hi) = (iv["lo"].as_f64().unwrap().exp(), iv["hi"].as_f64().unwrap().exp());
    assert!(lo < 2.0 && 2.0 < hi, "interval [{lo}, {hi}]");
    assert_eq!(report["seed"], 5);
    assert_eq!(report["config"]["seed"], 5);

    let o = convmmd(&["fit", p(&cfg), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(a.join("fit.json")).unwrap(), fs::read(b.join("fit.json")).unwrap());

    let cov_out = dir.path().join("cov.json");
    let o = convmmd(&["cov", p(&a.join("fit.json")), "--batches", "4", "--batch-m", "500", "--out", p(&cov_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cov: serde_json::Value = serde_json::from_slice(&fs::read(&cov_out).unwrap()).unwrap();
    assert_eq!(cov["sandwich"]["n_batches"], 4);
}

#[test]
fn per_row_scale_columns_are_used() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x,scale_x\n");
    for i in 0..400 {
        let v = ((i * 37) % 101) as f64 / 25.0 - 2.0;
        csv.push_str(&format!("{v},{}\n", 0.5 + (i % 3) as f64 * 0.25));
    }
    fs::write(dir.path().join("d.csv"), csv).unwrap();
    let cfg = dir.path().join("fit.toml");
    fs::write(
        &cfg,
        "data = \"d.csv\"\nmodel = \"gmm\"\nseed = 1\n[fit]\nn_iter = 20\n[[noise]]\ncoord = \"x\"\nfamily = \"gaussian\"\nscale = 1.0\n",
    )
    .unwrap();
    let o = convmmd(&["fit", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["empirical_scales"][0], "scale_x");
}

#[test]
fn empty_csv_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "x\n").unwrap();
    let cfg = dir.path().join("fit.toml");
    fs::write(&cfg, "data = \"d.csv\"\nmodel = \"gmm\"\nseed = 1\n").unwrap();
    let o = convmmd(&["fit", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty dataset"), "{}", stderr(&o));
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "x\n1.0\n2.0\n").unwrap();
    let cfg = dir.path().join("fit.toml");
    fs::write(&cfg, "data = \"d.csv\"\nmodel = \"linear-eiv\"\nseed = 1\n").unwrap();
    let o = convmmd(&["fit", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing column `y`"), "{}", stderr(&o));
}

#[test]
fn unreadable_config_and_bad_flags_exit_2() {
    assert_eq!(code(&convmmd(&["fit", "/nonexistent/fit.toml"])), 2);
    assert_eq!(code(&convmmd(&["experiment"])), 2);
    assert_eq!(code(&convmmd(&["no-such-command"])), 2);
    assert_eq!(code(&convmmd(&["experiment", "--preset", "no_such_preset"])), 2);
    assert_eq!(code(&convmmd(&["--help"])), 0);
}

#[test]
fn unknown_design_lists_valid_designs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    fs::write(&cfg, "design = \"probit\"\nn = 100\nreplications = 1\n").unwrap();
    let o = convmmd(&["experiment", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for d in ["gmm", "eivr", "logistic", "clt", "equivalence", "bounds"] {
        assert!(e.contains(d), "{e}");
    }
}

#[test]
fn unknown_verify_target_lists_targets() {
    let o = convmmd(&["verify", "everything"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for t in ["equivalence", "deviation-bound", "variance-bound", "clt-rate", "gradient-check"] {
        assert!(e.contains(t), "{e}");
    }
}

fn aggregates(dir: &Path) -> Vec<(String, String, String)> {
    let mut r = csv::Reader::from_path(dir.join("aggregates.csv")).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            rec[5].parse::<f64>().unwrap();
            (rec[0].to_string(), rec[1].to_string(), rec[2].to_string())
        })
        .collect()
}

#[test]
fn table1_preset_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let o = convmmd(&["experiment", "--preset", "table1_gaussian_homo", "--replications", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["rows.csv", "aggregates.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let methods: std::collections::BTreeSet<String> =
        aggregates(dir.path()).into_iter().map(|(_, m, _)| m).collect();
    assert_eq!(methods.into_iter().collect::<Vec<_>>(), ["convmmd", "naive-gmm"]);
    assert_eq!(stderr(&o).lines().filter(|l| l.contains(" rep ")).count(), 2);
}

#[test]
fn table2_preset_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let o = convmmd(&["experiment", "--preset", "table2_laplace_hetero", "--replications", "2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let aggs = aggregates(dir.path());
    for m in ["convmmd", "ols"] {
        assert!(aggs.iter().any(|(_, mm, metric)| mm == m && metric == "beta_mae"), "{m}: {aggs:?}");
    }
}

#[test]
fn experiment_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    fs::write(
        &cfg,
        "design = \"clt\"\nn = 200\nreplications = 2\n[fit]\nn_iter = 50\n[kernel]\nmode = \"fixed\"\nbandwidths = [1.0]\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = convmmd(&["experiment", p(&cfg), "--seed", "9", "--threads", "2", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("rows.csv")).unwrap(), fs::read(b.join("rows.csv")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["spec"]["seed"], 9);
}

#[test]
fn missing_seed_is_drawn_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    fs::write(&cfg, "design = \"gmm\"\nn = 50\nreplications = 1\n").unwrap();
    let o = convmmd(&["simulate", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: u64 = stderr(&o)
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .expect("seed line")
        .parse()
        .unwrap();
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"].as_u64(), Some(printed));
}

#[test]
fn simulate_rejects_statistic_designs() {
    let dir = tempfile::tempdir().unwrap();
    let o = convmmd(&["simulate", "--preset", "equivalence", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_equivalence_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = convmmd(&["verify", "equivalence", "--replications", "20", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS"), "{}", stdout(&o));
    let mut r = csv::Reader::from_path(dir.path().join("equivalence.csv")).unwrap();
    let h: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(h, ["theta", "convmmd2_mean", "mmd2_tilde_mean", "se"]);
    assert_eq!(r.records().count(), 5);
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn verify_gradient_check_passes() {
    let o = convmmd(&["verify", "gradient-check", "--quick"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("relative"), "{}", stdout(&o));
}

#[test]
fn verify_config_on_wrong_target_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.toml");
    fs::write(&cfg, "design = \"gmm\"\nn = 50\nreplications = 1\n").unwrap();
    assert_eq!(code(&convmmd(&["verify", "equivalence", "--config", p(&cfg)])), 2);
    assert_eq!(code(&convmmd(&["verify", "gradient-check", "--config", p(&cfg)])), 2);
}

#[test]
fn failed_check_exits_1() {
    // The bandwidth sweep has no interior minimum for this model.
    let o = convmmd(&["verify", "closed-form", "--quick"]);
    assert_eq!(code(&o), 1, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("FAIL")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("PASS closed form")), "{out}");
}
