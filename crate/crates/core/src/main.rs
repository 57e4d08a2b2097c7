//! Command-line front end: simulation, smoothing, filtering, the RMSE
//! experiment sweeps, and the self-test suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use varmap::config::ExperimentConfig;
use varmap::error::{Error, Result};
use varmap::experiments;
use varmap::map_solver::HessianMode;

#[derive(Parser)]
#[command(
    name = "varmap",
    about = "Optimization-based smoothing and filtering for partially observed bilinear chaotic ODEs",
    long_about = "Optimization-based smoothing and filtering for partially observed bilinear \
chaotic ODEs (Lorenz 96' and friends).\n\nEvery command is deterministic in (config, seed): \
observation noise is drawn from a seeded ChaCha8 counter-based stream, and trial t of a \
multi-trial experiment uses seed + t. Config files are `key = value` lines; command-line \
flags override file values."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Path to a key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial-level parallelism
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path stem; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hessian mode: dense | matfree
    #[arg(long)]
    hessian: Option<String>,
    /// Filter refresh stride K
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory and observations (CSV)
    Simulate(CommonArgs),
    /// One smoothing solve; prints the estimate report as JSON. Exit code 0
    /// iff Newton converged.
    Smooth(CommonArgs),
    /// Streaming filter over the generated observations; emits one CSV row
    /// per observation index.
    Filter(CommonArgs),
    /// RMSE of initializer and MAP as the observation count k grows
    #[command(name = "experiment-rmse-vs-k")]
    ExperimentRmseVsK(CommonArgs),
    /// RMSE of the MAP across a (sigma_z, h) grid at fixed horizon, with the
    /// fitted log-log slope against sigma_z sqrt(h)
    #[command(name = "experiment-rmse-vs-noise")]
    ExperimentRmseVsNoise(CommonArgs),
    /// Fast invariant suites of all modules
    Selftest,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.display().to_string());
    }
    if let Some(h) = &common.hessian {
        cfg.hessian = Some(match h.as_str() {
            "dense" => HessianMode::DenseFd,
            "matfree" => HessianMode::MatrixFreeGaussNewtonCg,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown hessian mode {other:?} (dense | matfree)"
                )))
            }
        });
    }
    if let Some(stride) = common.stride {
        cfg.stride = stride;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Print to stdout, treating a closed pipe as a normal end of output.
fn print_tolerant(content: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(content.as_bytes()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn emit(cfg: &ExperimentConfig, suffix: &str, content: &str) -> Result<()> {
    match &cfg.out {
        Some(stem) => {
            let path = format!("{stem}{suffix}");
            std::fs::write(&path, content)?;
            eprintln!("wrote {path}");
            Ok(())
        }
        None => {
            print_tolerant(content);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = load_config(&common)?;
            let sim = experiments::simulate(&cfg)?;
            emit(&cfg, ".obs.csv", &sim.obs_csv)?;
            emit(&cfg, ".truth.csv", &sim.truth_csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Smooth(common) => {
            let cfg = load_config(&common)?;
            let report = experiments::run_smooth(&cfg)?;
            let json = report.to_json()?;
            emit(&cfg, ".json", &format!("{json}\n"))?;
            if report.trace.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("{{\"error\": \"newton did not converge within the iteration cap\"}}");
                Ok(ExitCode::from(3))
            }
        }
        Command::Filter(common) => {
            let cfg = load_config(&common)?;
            let (_, csv) = experiments::run_filter(&cfg)?;
            emit(&cfg, ".csv", &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExperimentRmseVsK(common) => {
            let cfg = load_config(&common)?;
            let (_, csv) = experiments::rmse_vs_k(&cfg)?;
            emit(&cfg, ".csv", &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ExperimentRmseVsNoise(common) => {
            let cfg = load_config(&common)?;
            let sweep = experiments::rmse_vs_noise(&cfg)?;
            emit(&cfg, ".csv", &sweep.csv)?;
            print_tolerant(&format!(
                "{{\"slope\": {:.6}, \"intercept\": {:.6}}}\n",
                sweep.slope, sweep.intercept
            ));
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let modules = experiments::selftest();
            let summary = experiments::selftest_summary(&modules);
            print_tolerant(&summary);
            let failed: usize = modules.iter().map(|m| m.failed).sum();
            if failed == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(4))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{{\"error\": \"{e}\"}}");
            ExitCode::from(2)
        }
    }
}
