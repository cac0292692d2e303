use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hydiff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydiff"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
model = "ou-1d"
replications = 3
seed = 11
modes = ["bayes-init", "ml-true-init", "ml-uniform-init", "hybrid"]

[simulation]
alpha = [1.0]
beta = [1.0]
x0 = [0.0]
lambda_diag = [1e-3]

[tuning]
n = 20000
h = 1e-3
gamma = 0.71
gamma_prime = 0.69
eta1 = 0.9
eta2 = 0.9

[mcmc_alpha]
n_iters = 600
burn_in = 200
target_accept = 0.35

[mcmc_beta]
n_iters = 1200
burn_in = 400
target_accept = 0.35
"#;

#[test]
fn simulate_then_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    for file in ["obs.bin", "obs.csv"] {
        let sim = hydiff(
            &[
                "simulate", "--model", "ou-1d", "--n", "50000", "--seed", "5", "--out", file,
            ],
            tmp.path(),
        );
        assert!(
            sim.status.success(),
            "{}",
            String::from_utf8_lossy(&sim.stderr)
        );
        assert!(tmp.path().join(file).exists());

        let est = hydiff(
            &[
                "estimate",
                "--input",
                file,
                "--model",
                "ou-1d",
                "--output-dir",
                "est",
            ],
            tmp.path(),
        );
        assert!(
            est.status.success(),
            "{}",
            String::from_utf8_lossy(&est.stderr)
        );
        let text = stdout(&est);
        let alpha: f64 = text
            .lines()
            .find_map(|l| l.strip_prefix("alpha_hat = ["))
            .and_then(|l| l.strip_suffix(']'))
            .unwrap()
            .parse()
            .unwrap();
        assert!((alpha - 1.0).abs() < 0.2, "alpha_hat {alpha}");
        assert!(tmp.path().join("est/estimate.json").exists());
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a.bin", "b.bin"] {
        let o = hydiff(
            &["simulate", "--n", "5000", "--seed", "9", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success());
    }
    assert_eq!(
        fs::read(tmp.path().join("a.bin")).unwrap(),
        fs::read(tmp.path().join("b.bin")).unwrap()
    );
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hydiff(&["simulate", "--no-such-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_configuration_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.toml"),
        TINY.replace("replications = 3", "replications = 0"),
    )
    .unwrap();
    let o = hydiff(&["experiment", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replications"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hydiff(
        &["estimate", "--input", "absent.bin", "--model", "ou-1d"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_writes_all_tables() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let o = hydiff(
        &[
            "experiment",
            "--config",
            "tiny.toml",
            "--output-dir",
            "out",
            "--threads",
            "1",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for t in 1..=9 {
        let csv = fs::read_to_string(tmp.path().join(format!("out/table{t}.csv"))).unwrap();
        assert!(csv.starts_with("coordinate,mean,sd,truth"), "table{t}");
        assert!(csv.lines().count() >= 2);
    }
    let rendered = hydiff(&["tables", "--report", "out/report.json"], tmp.path());
    assert!(rendered.status.success());
    let text = stdout(&rendered);
    assert!(text.contains("Table 1") && text.contains("Table 9"));
    assert_eq!(
        text,
        stdout(&o)
            .lines()
            .filter(|l| !l.starts_with("tables and"))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
}
