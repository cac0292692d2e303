use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use hybrid_diffusion::bayes::McmcConfig;
use hybrid_diffusion::harness::{self, ExperimentConfig, ExperimentReport, SpaceSection};
use hybrid_diffusion::multistep::hybrid_estimate;
use hybrid_diffusion::preprocess::format;
use hybrid_diffusion::simulate::{simulate_path, SimulationConfig};
use hybrid_diffusion::{builtin_model, Error, ModelSpec, TuningConfig};

#[derive(Parser, Debug)]
#[command(
    name = "hydiff",
    version,
    about = "Hybrid multi-step estimation for noisy high-frequency diffusion data"
)]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the configuration)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replications
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for generated files
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Use A instead of A + 3Λ-type effective diffusion in the full-data H1
    #[arg(long = "drop-noise-in-A", global = true)]
    drop_noise_in_a: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one noisy path and write it as an observation file
    Simulate(SimulateArgs),
    /// Run the hybrid estimator on an observation file
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment and write table1.csv..table9.csv
    Experiment,
    /// Render a saved experiment report as text tables
    Tables(TablesArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Built-in model: paper-3d, ou-1d or bm-1d
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Sampling step; defaults to n^-0.7
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    alpha: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    beta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Option<Vec<f64>>,
    /// Diagonal of the noise covariance
    #[arg(long, value_delimiter = ',')]
    lambda_diag: Option<Vec<f64>>,
    #[arg(long)]
    substeps: Option<usize>,
    /// Generator stream (replication index)
    #[arg(long, default_value_t = 0)]
    replication: u64,
    /// Output file; `.csv` selects CSV, anything else the binary format
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Observation file written by `simulate` (binary or CSV)
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: Option<String>,
    /// Sampling step for CSV files without an `# h=` line
    #[arg(long)]
    h: Option<f64>,
}

#[derive(Args, Debug)]
struct TablesArgs {
    /// Report written by `experiment`; defaults to <output-dir>/report.json
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Estimation settings read from `--config` by `estimate`.
#[derive(Debug, Default, Deserialize)]
struct EstimateConfig {
    model: Option<String>,
    tuning: Option<TuningOverrides>,
    #[serde(default)]
    space: Option<SpaceSection>,
    mcmc_alpha: Option<McmcConfig>,
    mcmc_beta: Option<McmcConfig>,
}

#[derive(Debug, Default, Deserialize)]
struct TuningOverrides {
    tau1: Option<f64>,
    tau2: Option<f64>,
    tau3: Option<f64>,
    q1: Option<f64>,
    q2: Option<f64>,
    eta1: Option<f64>,
    eta2: Option<f64>,
    gamma: Option<f64>,
    gamma_prime: Option<f64>,
    drop_noise_in_a: Option<bool>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            let msg = e.to_string();
            Failure::Config(
                msg.strip_prefix("configuration error: ")
                    .unwrap_or(&msg)
                    .to_string(),
            )
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Estimate(a) => estimate(&cli, a),
        Command::Experiment => experiment(&cli),
        Command::Tables(a) => tables(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn model_named(name: &str) -> Result<ModelSpec, Failure> {
    builtin_model(name).ok_or_else(|| Failure::Config(format!("unknown model '{name}'")))
}

fn output_dir(cli: &Cli) -> PathBuf {
    cli.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Truth and starting state used when `simulate` is given no values.
fn model_defaults(name: &str) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    match name {
        "paper-3d" => (
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 2.0, 3.0, 3.0, 4.0],
            vec![1.0; 3],
        ),
        "ou-1d" => (vec![1.0], vec![1.0], vec![0.0]),
        _ => (vec![1.0], vec![0.0], vec![0.0]),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), Failure> {
    let mut sim = match &cli.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_toml(&read_config(path)?)?;
            cfg.simulation_config(&cfg.model_spec()?)?
        }
        None => {
            let name = a.model.clone().unwrap_or_else(|| "ou-1d".into());
            let model = model_named(&name)?;
            let (alpha, beta, x0) = model_defaults(&name);
            let n = a.n.unwrap_or(100_000);
            let d = model.d;
            let lambda = nalgebra::DMatrix::identity(d, d) * 1e-3;
            SimulationConfig::new(model, alpha, beta, x0, n, (n as f64).powf(-0.7), lambda, 0)
        }
    };
    if let Some(name) = &a.model {
        if cli.config.is_some() && *name != sim.model.name {
            sim.model = model_named(name)?;
        }
    }
    if let Some(n) = a.n {
        sim.n = n;
        if a.h.is_none() {
            sim.h = (n as f64).powf(-0.7);
        }
    }
    if let Some(h) = a.h {
        sim.h = h;
    }
    if let Some(v) = &a.alpha {
        sim.alpha = v.clone();
    }
    if let Some(v) = &a.beta {
        sim.beta = v.clone();
    }
    if let Some(v) = &a.x0 {
        sim.x0 = v.clone();
    }
    if let Some(v) = &a.lambda_diag {
        if v.len() != sim.model.d {
            return Err(Failure::Config(format!(
                "--lambda-diag needs {} values",
                sim.model.d
            )));
        }
        sim.lambda = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v));
    }
    if let Some(s) = a.substeps {
        sim.substeps = s;
    }
    if let Some(seed) = cli.seed {
        sim.seed = seed;
    }
    sim.stream = a.replication;
    let obs = simulate_path(&sim)?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| output_dir(cli).join("observations.bin"));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    format::save(&obs, &path)?;
    println!(
        "wrote {} observations of {} (d={}, h={:e}) to {}",
        obs.n() + 1,
        sim.model.name,
        obs.d(),
        obs.h(),
        path.display()
    );
    Ok(())
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> Result<(), Failure> {
    let ec: EstimateConfig = match &cli.config {
        Some(p) => toml::from_str(&read_config(p)?).map_err(|e| Failure::Config(e.to_string()))?,
        None => EstimateConfig::default(),
    };
    let name = a
        .model
        .clone()
        .or(ec.model.clone())
        .ok_or_else(|| Failure::Config("--model is required".into()))?;
    let model = model_named(&name)?;
    let obs = format::load(&a.input, a.h)?;
    let n = obs.n();
    let h = obs.h();
    let mut cfg = TuningConfig::new(n, h);
    // rate window centred on the data's own h = n^-gamma
    let g = -h.ln() / (n as f64).ln();
    if g > 2.0 / 3.0 && g < 1.0 {
        cfg.gamma = g;
        cfg.gamma_prime = g;
        if cfg.eta1 <= g {
            cfg.eta1 = 0.5 * (1.0 + g);
            cfg.eta2 = cfg.eta1;
        }
    }
    if let Some(t) = &ec.tuning {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = t.$f { cfg.$f = v; } )* };
        }
        set!(
            tau1,
            tau2,
            tau3,
            q1,
            q2,
            eta1,
            eta2,
            gamma,
            gamma_prime,
            drop_noise_in_a
        );
    }
    if cli.drop_noise_in_a {
        cfg.drop_noise_in_a = true;
    }
    let spaces = ec.space.unwrap_or_default().to_spaces(&model)?;
    let seed = cli.seed.unwrap_or(0);
    let mut ma = ec.mcmc_alpha.unwrap_or_else(|| default_chain(2_000, 500));
    let mut mb = ec.mcmc_beta.unwrap_or_else(|| default_chain(20_000, 5_000));
    ma.seed = seed;
    mb.seed = seed.wrapping_add(1);
    let res = hybrid_estimate(&obs, &model, &spaces, &cfg, &ma, &mb).map_err(|f| {
        let msg = format!("stage {}: {}", f.stage, f.error);
        if f.error.is_config() {
            Failure::Config(msg)
        } else {
            Failure::Runtime(msg)
        }
    })?;
    let dir = output_dir(cli);
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let path = dir.join("estimate.json");
    fs::write(&path, res.to_json()?).map_err(|e| Failure::Runtime(e.to_string()))?;
    let show = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("alpha_hat = [{}]", show(res.alpha_hat().unwrap()));
    println!("beta_hat  = [{}]", show(res.beta_hat().unwrap()));
    println!(
        "J1 = {}, J2 = {}; full result in {}",
        res.j1,
        res.j2,
        path.display()
    );
    Ok(())
}

fn default_chain(n_iters: usize, burn_in: usize) -> McmcConfig {
    let mut c = McmcConfig::new(n_iters, burn_in, 0);
    c.target_accept = Some(0.35);
    c
}

fn experiment(cli: &Cli) -> Result<(), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("experiment requires --config".into()))?;
    let mut cfg = ExperimentConfig::from_toml(&read_config(path)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.drop_noise_in_a {
        cfg.tuning.drop_noise_in_a = Some(true);
    }
    let dir = cli
        .output_dir
        .clone()
        .or(cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let report = harness::run_experiment(&cfg)?;
    harness::write_outputs(&report, &dir)?;
    print!("{}", harness::render_tables(&report));
    println!("tables and report.json written to {}", dir.display());
    Ok(())
}

fn tables(cli: &Cli, a: &TablesArgs) -> Result<(), Failure> {
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| output_dir(cli).join("report.json"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let report = ExperimentReport::from_json(&text)?;
    print!("{}", harness::render_tables(&report));
    Ok(())
}
