use hybrid_diffusion::harness::*;

const SMALL: &str = r#"
model = "ou-1d"
replications = 4
seed = 77
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

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

#[test]
fn config_survives_a_toml_round_trip() {
    let cfg = small();
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, again);
    let desk = include_str!("../../../presets/paper4-desk.toml");
    let desk = ExperimentConfig::from_toml(desk).unwrap();
    assert_eq!(
        ExperimentConfig::from_toml(&desk.to_toml().unwrap()).unwrap(),
        desk
    );
}

#[test]
fn unknown_keys_are_rejected() {
    let text = SMALL.replace("seed = 77", "seed = 77\ncolour = 3");
    assert!(ExperimentConfig::from_toml(&text).unwrap_err().is_config());
}

#[test]
fn tables_follow_the_replications() {
    let report = run_experiment(&small()).unwrap();
    assert_eq!(report.succeeded, vec![0, 1, 2, 3]);
    assert!(report.failures.is_empty());
    let numbers: Vec<u8> = report.tables.iter().map(|t| t.table).collect();
    assert_eq!(numbers, (1..=9).collect::<Vec<_>>());
    for t in &report.tables {
        let est = report.estimates(t.table);
        assert_eq!(est.len(), 4);
        for i in 0..t.mean.len() {
            let col: Vec<f64> = est.iter().map(|e| e[i]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            assert!((t.mean[i] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((t.sd[i] - sample_sd(&col)).abs() <= 1e-12 * t.sd[i].max(1.0));
        }
    }
    let again = run_experiment(&small()).unwrap();
    for (a, b) in again.outcomes.iter().zip(&report.outcomes) {
        assert_eq!(a.estimates, b.estimates);
    }
}

#[test]
fn one_replication_has_zero_spread() {
    let mut cfg = small();
    cfg.replications = 1;
    let report = run_experiment(&cfg).unwrap();
    assert!(report.tables.iter().all(|t| t.sd.iter().all(|s| *s == 0.0)));
}

#[test]
fn outputs_are_written_and_reloadable() {
    let mut cfg = small();
    cfg.replications = 2;
    cfg.modes = vec![Mode::Hybrid];
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path()).unwrap();
    for t in &report.tables {
        let text =
            std::fs::read_to_string(dir.path().join(format!("table{}.csv", t.table))).unwrap();
        assert_eq!(text, table_csv(t).unwrap());
        assert_eq!(text.lines().count(), t.coordinates.len() + 1);
    }
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert_eq!(ExperimentReport::from_json(&json).unwrap(), report);
}
