//! Aggregation of replication outcomes into per-estimator tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{vech, ExperimentConfig, Mode, ReplicationOutcome, SeedPlan};
use crate::error::{Error, Result};
use crate::schedule::{compute_j1, compute_j2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub stage: String,
    pub message: String,
}

/// Mean and sample standard deviation of one estimator over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub table: u8,
    pub title: String,
    pub coordinates: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub truth: Vec<f64>,
    /// Mean wall-clock seconds per replication of the stages behind this
    /// estimator.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: SeedPlan,
    pub j1: usize,
    pub j2: usize,
    pub replications: usize,
    pub succeeded: Vec<usize>,
    pub failures: Vec<ReplicationFailure>,
    pub tables: Vec<EstimatorSummary>,
    pub mean_timings: BTreeMap<String, f64>,
    pub total_seconds: f64,
    pub outcomes: Vec<ReplicationOutcome>,
}

impl ExperimentReport {
    pub fn table(&self, number: u8) -> Option<&EstimatorSummary> {
        self.tables.iter().find(|t| t.table == number)
    }

    /// Per-replication estimates of one table, in replication order.
    pub fn estimates(&self, number: u8) -> Vec<&[f64]> {
        self.outcomes
            .iter()
            .filter_map(|o| o.estimates.get(&number).map(|v| v.as_slice()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Two-pass sample standard deviation (denominator `n - 1`); zero for fewer
/// than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

struct TableSpec {
    number: u8,
    title: &'static str,
    mode: Option<Mode>,
    alpha: bool,
    timing_keys: &'static [&'static str],
}

const TABLES: [TableSpec; 9] = [
    TableSpec {
        number: 1,
        title: "estimator of Lambda",
        mode: None,
        alpha: false,
        timing_keys: &["noise"],
    },
    TableSpec {
        number: 2,
        title: "adaptive ML estimator of alpha, true initial value",
        mode: Some(Mode::MlTrueInit),
        alpha: true,
        timing_keys: &["ml_true_init"],
    },
    TableSpec {
        number: 3,
        title: "adaptive ML estimator of beta, true initial value",
        mode: Some(Mode::MlTrueInit),
        alpha: false,
        timing_keys: &["ml_true_init"],
    },
    TableSpec {
        number: 4,
        title: "adaptive ML estimator of alpha, uniform random initial value",
        mode: Some(Mode::MlUniformInit),
        alpha: true,
        timing_keys: &["ml_uniform_init"],
    },
    TableSpec {
        number: 5,
        title: "adaptive ML estimator of beta, uniform random initial value",
        mode: Some(Mode::MlUniformInit),
        alpha: false,
        timing_keys: &["ml_uniform_init"],
    },
    TableSpec {
        number: 6,
        title: "initial Bayes type estimator of alpha",
        mode: Some(Mode::BayesInit),
        alpha: true,
        timing_keys: &["bayes_alpha"],
    },
    TableSpec {
        number: 7,
        title: "initial Bayes type estimator of beta",
        mode: Some(Mode::BayesInit),
        alpha: false,
        timing_keys: &["bayes_beta"],
    },
    TableSpec {
        number: 8,
        title: "hybrid multi-step estimator of alpha",
        mode: Some(Mode::Hybrid),
        alpha: true,
        timing_keys: &["bayes_alpha", "newton_alpha"],
    },
    TableSpec {
        number: 9,
        title: "hybrid multi-step estimator of beta",
        mode: Some(Mode::Hybrid),
        alpha: false,
        timing_keys: &["bayes_beta", "newton_beta"],
    },
];

pub(super) fn aggregate(
    cfg: &ExperimentConfig,
    outcomes: Vec<ReplicationOutcome>,
    failures: Vec<ReplicationFailure>,
    total_seconds: f64,
) -> Result<ExperimentReport> {
    let model = cfg.model_spec()?;
    let tuning = cfg.tuning.to_config()?;
    let d = model.d;
    let lambda_truth = vech(&cfg.simulation.lambda_matrix(d)?);

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for o in &outcomes {
        for (k, v) in &o.timings {
            let e = sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mean_timings: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect();

    let mut tables = Vec::new();
    for spec in &TABLES {
        // Bayes-type initializers are a by-product of the hybrid pipeline
        let selected = match spec.mode {
            None => true,
            Some(Mode::BayesInit) => cfg.has(Mode::BayesInit) || cfg.has(Mode::Hybrid),
            Some(m) => cfg.has(m),
        };
        if !selected {
            continue;
        }
        let (coordinates, truth): (Vec<String>, Vec<f64>) = if spec.number == 1 {
            let mut names = Vec::new();
            for i in 1..=d {
                for j in i..=d {
                    names.push(format!("lambda_{i}{j}"));
                }
            }
            (names, lambda_truth.clone())
        } else if spec.alpha {
            (
                (1..=model.m1).map(|i| format!("alpha_{i}")).collect(),
                cfg.simulation.alpha.clone(),
            )
        } else {
            (
                (1..=model.m2).map(|i| format!("beta_{i}")).collect(),
                cfg.simulation.beta.clone(),
            )
        };
        let rows: Vec<&Vec<f64>> = outcomes
            .iter()
            .filter_map(|o| o.estimates.get(&spec.number))
            .collect();
        let m = coordinates.len();
        let column = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i]).collect() };
        let mean = (0..m)
            .map(|i| {
                let c = column(i);
                c.iter().sum::<f64>() / c.len().max(1) as f64
            })
            .collect();
        let sd = (0..m).map(|i| sample_sd(&column(i))).collect();
        let seconds = spec
            .timing_keys
            .iter()
            .map(|k| mean_timings.get(*k).copied().unwrap_or(0.0))
            .sum();
        tables.push(EstimatorSummary {
            table: spec.number,
            title: spec.title.to_string(),
            coordinates,
            mean,
            sd,
            truth,
            seconds,
        });
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds: SeedPlan::from_base(cfg.seed),
        j1: compute_j1(&tuning)?,
        j2: compute_j2(&tuning)?,
        replications: cfg.replications,
        succeeded: outcomes.iter().map(|o| o.replication).collect(),
        failures,
        tables,
        mean_timings,
        total_seconds,
        outcomes,
    })
}

/// CSV with header `coordinate,mean,sd,truth`.
pub fn table_csv(t: &EstimatorSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["coordinate", "mean", "sd", "truth"])
        .map_err(err)?;
    for i in 0..t.coordinates.len() {
        w.write_record([
            t.coordinates[i].clone(),
            t.mean[i].to_string(),
            t.sd[i].to_string(),
            t.truth[i].to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `tableN.csv` for every table and `report.json` into `dir`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in &report.tables {
        fs::write(dir.join(format!("table{}.csv", t.table)), table_csv(t)?)?;
    }
    fs::write(dir.join("report.json"), report.to_json()?)?;
    Ok(())
}

/// Aligned plain-text tables: one column per coordinate, rows for mean,
/// s.d., truth and the mean time per path.
pub fn render_tables(report: &ExperimentReport) -> String {
    let mut out = String::new();
    for t in &report.tables {
        let _ = writeln!(out, "Table {}: {}", t.table, t.title);
        let width = t
            .coordinates
            .iter()
            .map(|c| c.len())
            .chain(std::iter::once(10))
            .max()
            .unwrap();
        let _ = write!(out, "{:<8}", "");
        for c in &t.coordinates {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (label, values) in [("mean", &t.mean), ("s.d.", &t.sd), ("true", &t.truth)] {
            let _ = write!(out, "{label:<8}");
            for v in values {
                let cell = if t.table == 1 {
                    format!("{v:.3e}")
                } else {
                    format!("{v:.3}")
                };
                let _ = write!(out, " {cell:>width$}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{:<8} {:.3} s", "time", t.seconds);
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "replications: {} succeeded, {} failed",
        report.succeeded.len(),
        report.failures.len()
    );
    out
}
