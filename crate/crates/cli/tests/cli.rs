use std::path::Path;
use std::process::{Command, Output};

use gep_cli::metrics::read_metrics;

fn gep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gep")).args(args).output().expect("spawn gep")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .parse()
        .unwrap()
}

const SMALL: &str = r#"
[run]
name = "small"
methods = ["gep", "gp"]
epsilons = [4.0]
seeds = [0]
steps = 5

[data]
source = "synth"
n_private = 80
n_aux = 20
n_eval = 40
task = { kind = "gaussian-mixture", n = 0, dim = 5, classes = 3 }

[gep]
k = 4
m = 10
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_exits_with_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps = 5", "steps = 5\nepochs = 3"));
    let o = gep(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_with_2() {
    assert_eq!(gep(&["accountant", "--eps", "8"]).status.code(), Some(2));
    assert_eq!(gep(&["accountant", "--eps", "-1", "--steps", "10"]).status.code(), Some(2));
    assert_eq!(gep(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn accountant_modes() {
    let closed = gep(&["accountant", "--eps", "8", "--delta", "1e-5", "--steps", "100", "--mode", "closed"]);
    assert!(closed.status.success(), "{}", stderr(&closed));
    let closed_sigma = field(&stdout(&closed), "sigma");
    assert!((closed_sigma - 11.996).abs() < 1e-3, "{closed_sigma}");

    let search = gep(&["accountant", "--eps", "8", "--delta", "1e-5", "--steps", "100"]);
    assert!(search.status.success());
    let text = stdout(&search);
    assert!(field(&text, "sigma") <= closed_sigma);
    assert!(field(&text, "epsilon") <= 8.0);

    let huge = gep(&["accountant", "--eps", "1e7", "--steps", "10"]);
    assert!(huge.status.success());
    assert!(field(&stdout(&huge), "unit_sigma") <= 1.01e-2);

    let sub = gep(&["accountant", "--eps", "8", "--steps", "100", "--q", "0.1", "--mode", "closed"]);
    assert_eq!(sub.status.code(), Some(2));
    assert!(stderr(&sub).contains("--mode search"));
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = gep(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy (%) by epsilon, k = 4, m = 10"));

    let records = read_metrics(&out.join("metrics.ndjson")).unwrap();
    assert_eq!(records.len(), 2 * 5);
    assert!(records.iter().all(|r| r.epsilon_spent.is_some_and(|e| e <= 4.0 * (1.0 + 1e-9))));
    // The copied configuration reloads from elsewhere.
    let again = gep(&["train", "--config", out.join("config.toml").to_str().unwrap(), "--out", dir.path().join("again").to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));

    let report_dir = dir.path().join("report");
    let r = gep(&["report", out.join("metrics.ndjson").to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(stdout(&r).contains("gep"));
    let tsv = std::fs::read_to_string(report_dir.join("summary.tsv")).unwrap();
    assert_eq!(tsv, std::fs::read_to_string(out.join("summary.tsv")).unwrap());
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn sigma_override_and_method_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps = 5", "steps = 5\nsigma = 0.0"));
    let out = dir.path().join("out");
    let o = gep(&["train", "--config", &cfg, "--method", "gp", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_metrics(&out.join("metrics.ndjson")).unwrap();
    assert!(records.iter().all(|r| r.sigma == 0.0 && r.method.name() == "gp"));
}

#[test]
fn csv_data_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,label\n");
    for i in 0..60 {
        let x = i as f64 / 10.0 - 3.0;
        text.push_str(&format!("{x},{},{}\n", (i % 7) as f64, u8::from(x > 0.0)));
    }
    std::fs::write(dir.path().join("train.csv"), &text).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[run]
out = "out"
steps = 5

[data]
source = "csv"
train = "train.csv"
label = "label"
holdout = 10
normalize = "standardize"

[gep]
k = 2
m = 10
"#,
    );
    let o = gep(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_metrics(&dir.path().join("out/metrics.ndjson")).unwrap().len(), 5);

    std::fs::write(dir.path().join("train.csv"), "a,b,label\n1,2,0\n1,x,1\n").unwrap();
    let o = gep(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3, column b"), "{}", stderr(&o));
}

#[test]
fn k_sweep_adds_a_by_k_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[sweep]\nk = [1, 2, 4]\n").replace("\"gep\", \"gp\"", "\"gep\""));
    let out = dir.path().join("out");
    let o = gep(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_metrics(&out.join("metrics.ndjson")).unwrap();
    let mut runs: Vec<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
    runs.dedup();
    assert_eq!(runs.len(), 3);
    assert!(stdout(&o).contains("accuracy (%) by k, eps = 4, m = 10"));
}

#[test]
fn bench_and_project_error_run() {
    let b = gep(&["bench"]);
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(stdout(&b).lines().count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("err.tsv");
    let p = gep(&[
        "project-error", "--k", "5,20", "--m", "50", "--seeds", "2", "--aux", "random-label,synthetic",
        "--out", tsv.to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", stderr(&p));
    let table = std::fs::read_to_string(&tsv).unwrap();
    assert_eq!(table, stdout(&p));
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 2);
    assert!(table.starts_with("aux\tbasis\tk\tm\tmean\tstd"));
}
