//! Command-line entry point: fit single-level or multilevel models to CSV
//! data, or run replication studies on the built-in scenarios.
//!
//! Exit codes: 0 success, 2 validation error, 3 sampler failure.

mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use bayes_fpca::model::PriorConfig;
use bayes_fpca::sampler::{self, SamplerConfig};
use bayes_fpca::simulate::{self, FitConfig, ScenarioName};
use bayes_fpca::{inference, multilevel};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Sampler(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Sampler(m) => write!(f, "sampler failure: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Sampler(_) | CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "bayes-fpca", version, about = "Bayesian functional PCA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON configuration file (priors, sampler, dimensions).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of chains (overrides the config file).
    #[arg(long)]
    chains: Option<usize>,
    /// Warm-up sweeps per chain (overrides the config file).
    #[arg(long)]
    warmup: Option<usize>,
    /// Retained draws per chain (overrides the config file).
    #[arg(long)]
    samples: Option<usize>,
    /// Suppress progress reporting.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the single-level model to a CSV of curves.
    Fit {
        /// Input CSV with header "id,t_1,...,t_M".
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the multilevel model to a CSV keyed by (subject, visit).
    FitMultilevel {
        /// Input CSV with header "subject,visit,t_1,...,t_M".
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a replication study on a built-in scenario.
    Simulate {
        /// Scenario name: S1, S2, or ML.
        #[arg(long)]
        scenario: String,
        /// Number of replicates.
        #[arg(short = 'B', long = "replicates", alias = "B", default_value_t = 20)]
        replicates: usize,
        /// Curves per dataset (subjects for ML).
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Grid points per curve.
        #[arg(long, default_value_t = 30)]
        m: usize,
        /// Reduced warm-up/samples for a quick pipeline check.
        #[arg(long)]
        smoke: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// JSON configuration schema; every field has a default.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct FileConfig {
    q: usize,
    degree: usize,
    k: usize,
    k1: usize,
    k2: usize,
    visit_means: bool,
    prior: PriorConfig,
    sampler: SamplerConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            q: 10,
            degree: 3,
            k: 3,
            k1: 2,
            k2: 3,
            visit_means: false,
            prior: PriorConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn load_config(path: Option<&Path>, common: &CommonArgs) -> Result<FileConfig, CliError> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config JSON invalid: {e}")))?
        }
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.sampler.seed = seed;
    }
    if let Some(chains) = common.chains {
        config.sampler.n_chains = chains;
    }
    if let Some(warmup) = common.warmup {
        config.sampler.n_warmup = warmup;
    }
    if let Some(samples) = common.samples {
        config.sampler.n_samples = samples;
    }
    config.sampler.progress = !common.quiet;
    config
        .prior
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    config
        .sampler
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(config)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: &FileConfig,
    input_hashes: serde_json::Value,
    elapsed: f64,
) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.sampler.seed,
        "config": config,
        "input_hashes": input_hashes,
        "elapsed_seconds": elapsed,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Validation(e.to_string()))?,
    )?;
    Ok(())
}

fn input_hashes(data: &Path, config: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let mut map = serde_json::Map::new();
    map.insert(
        data.display().to_string(),
        serde_json::json!(io::file_hash(data)?),
    );
    if let Some(c) = config {
        map.insert(c.display().to_string(), serde_json::json!(io::file_hash(c)?));
    }
    Ok(serde_json::Value::Object(map))
}

fn cmd_fit(data_path: &Path, common: &CommonArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let config = load_config(common.config.as_deref(), common)?;
    let data = io::read_single_csv(data_path)?;
    if config.k > config.q {
        return Err(CliError::Validation(format!(
            "K must not exceed Q (K = {}, Q = {})",
            config.k, config.q
        )));
    }
    let basis = io::build_basis_for(data.grid(), config.q, config.degree, config.prior.alpha)?;

    let (samples, diag) = sampler::run(&data, &basis, &config.prior, &config.sampler, config.k)
        .map_err(|e| match e {
            sampler::SamplerError::InvalidConfig(m) => CliError::Validation(m),
            sampler::SamplerError::RankTooLow { .. } => CliError::Validation(e.to_string()),
            other => CliError::Sampler(other.to_string()),
        })?;
    if !samples.complete {
        return Err(CliError::Sampler(
            "a chain diverged; partial output is invalid".into(),
        ));
    }
    let summary =
        inference::summarize(&samples, &basis).map_err(|e| CliError::Sampler(e.to_string()))?;

    std::fs::create_dir_all(&common.out)?;
    io::write_single_samples(&common.out, &samples)?;
    io::write_single_summary(&common.out, &summary)?;
    std::fs::write(
        common.out.join("diagnostics.json"),
        serde_json::to_string_pretty(&io::diagnostics_json(&diag))
            .map_err(|e| CliError::Validation(e.to_string()))?,
    )?;
    write_manifest(
        &common.out,
        "fit",
        &config,
        input_hashes(data_path, common.config.as_deref())?,
        started.elapsed().as_secs_f64(),
    )
}

fn cmd_fit_multilevel(data_path: &Path, common: &CommonArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let config = load_config(common.config.as_deref(), common)?;
    let data = io::read_multilevel_csv(data_path)?;
    if config.k1 + config.k2 > config.q {
        return Err(CliError::Validation(format!(
            "K1 + K2 must not exceed Q (K1 = {}, K2 = {}, Q = {})",
            config.k1, config.k2, config.q
        )));
    }
    let basis = io::build_basis_for(data.grid(), config.q, config.degree, config.prior.alpha)?;

    let (samples, diag) = multilevel::run_multilevel(
        &data,
        &basis,
        &config.prior,
        &config.sampler,
        config.k1,
        config.k2,
        config.visit_means,
    )
    .map_err(|e| match e {
        sampler::SamplerError::InvalidConfig(m) => CliError::Validation(m),
        sampler::SamplerError::RankTooLow { .. } => CliError::Validation(e.to_string()),
        other => CliError::Sampler(other.to_string()),
    })?;
    if !samples.complete {
        return Err(CliError::Sampler(
            "a chain diverged; partial output is invalid".into(),
        ));
    }
    let summary = inference::summarize_multilevel(&samples, &basis)
        .map_err(|e| CliError::Sampler(e.to_string()))?;

    std::fs::create_dir_all(&common.out)?;
    io::write_multilevel_samples(&common.out, &samples)?;
    io::write_multilevel_summary(&common.out, &summary)?;
    std::fs::write(
        common.out.join("diagnostics.json"),
        serde_json::to_string_pretty(&io::diagnostics_json(&diag))
            .map_err(|e| CliError::Validation(e.to_string()))?,
    )?;
    write_manifest(
        &common.out,
        "fit-multilevel",
        &config,
        input_hashes(data_path, common.config.as_deref())?,
        started.elapsed().as_secs_f64(),
    )
}

fn cmd_simulate(
    scenario: &str,
    replicates: usize,
    n: usize,
    m: usize,
    smoke: bool,
    common: &CommonArgs,
) -> Result<(), CliError> {
    let name =
        ScenarioName::from_str(scenario).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut config = load_config(common.config.as_deref(), common)?;
    if smoke {
        config.sampler.n_warmup = 200;
        config.sampler.n_samples = 100;
        config.sampler.n_chains = 2;
    }
    // Replicate fits log no per-chain progress.
    config.sampler.progress = false;

    let spec = simulate::make_scenario(name, n, m)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let fit = FitConfig {
        q: config.q,
        degree: config.degree,
        prior: config.prior.clone(),
        sampler: config.sampler.clone(),
    };
    std::fs::create_dir_all(&common.out)?;
    let report = simulate::replicate_study(&spec, replicates, &fit, Some(&common.out))
        .map_err(|e| CliError::Sampler(e.to_string()))?;
    if !common.quiet {
        eprintln!(
            "study complete: {} replicates, {} failed",
            report.rows.len(),
            report.n_failed
        );
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit { data, common } => cmd_fit(&data, &common),
        Command::FitMultilevel { data, common } => cmd_fit_multilevel(&data, &common),
        Command::Simulate {
            scenario,
            replicates,
            n,
            m,
            smoke,
            common,
        } => cmd_simulate(&scenario, replicates, n, m, smoke, &common),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
