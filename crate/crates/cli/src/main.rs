//! `clicktomo` command-line front end.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clicktomo::memory::TrackingAllocator;

mod commands;
mod config;
mod error;
mod output;

use config::{ExperimentConfig, ProbeRule};
use error::{CliError, CliResult};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "clicktomo", version, about = "Tomography of multiplexed photon-number-resolving detectors")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Smoothing weight of the tomography objective [default: 1e-4].
    #[arg(long, global = true, value_name = "FLOAT")]
    gamma: Option<f64>,
    /// Entropy weight of the reconstruction [default: 0.02].
    #[arg(long, global = true, value_name = "FLOAT")]
    lambda: Option<f64>,
    /// Pulses per probe or per reconstructed input [default: 100000].
    #[arg(long, global = true, value_name = "INT")]
    pulses: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true, value_name = "INT")]
    threads: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a detector and simulate the probe measurements.
    Simulate(SimulateArgs),
    /// Recover the POVM from simulated measurements.
    Tomo(TomoArgs),
    /// Simulate an input state and reconstruct its photon-number distribution.
    Reconstruct(ReconstructArgs),
    /// Time SDT and MDT over pixel counts and fit power laws.
    Bench(BenchArgs),
    /// MDT dark-count probability and roughness over smoothing weights.
    SweepGamma(SweepGammaArgs),
    /// Mean reconstruction fidelity over entropy weights.
    SweepLambda(SweepLambdaArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Sample a detector with this many pixels instead of the config's.
    #[arg(long)]
    pub pixels: Option<usize>,
    #[arg(long, value_enum)]
    pub rule: Option<ProbeRule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Sdt,
    Mdt,
    Both,
}

#[derive(Args, Debug)]
pub struct TomoArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    /// Directory holding probes.csv and measurements.csv [default: the output directory].
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Also run the MDT smoothing-weight sweep and write gamma_sweep.csv.
    #[arg(long)]
    pub gamma_sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = commands::DEFAULT_GAMMAS)]
    pub gammas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InputState {
    Coherent,
    Thermal,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long, value_enum)]
    pub input: InputState,
    /// Mean photon number of the input.
    #[arg(long)]
    pub mean: f64,
    /// Independent simulate-and-reconstruct repetitions.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// POVM CSV [default: <output>/povm_mdt.csv].
    #[arg(long, value_name = "PATH")]
    pub povm: Option<PathBuf>,
    /// Detector JSON [default: <output>/detector.json, else the config's detector].
    #[arg(long, value_name = "PATH")]
    pub detector: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    pub pixels: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Memory budget in GiB; prints the largest N the MDT memory fit allows.
    #[arg(long, value_name = "GIB")]
    pub budget: Option<f64>,
    /// Solve-time budget in seconds; prints the largest N the MDT time fit allows.
    #[arg(long, value_name = "SECONDS")]
    pub time_budget: Option<f64>,
    /// Skip pixel counts whose estimated problem exceeds this many GiB.
    #[arg(long, value_name = "GIB")]
    pub memory_limit: Option<f64>,
    #[arg(long, value_enum, default_value = "relative")]
    pub weights: WeightArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum WeightArg {
    Relative,
    Uniform,
}

#[derive(Args, Debug)]
pub struct SweepGammaArgs {
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = commands::DEFAULT_GAMMAS)]
    pub gammas: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct SweepLambdaArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.01,0.02,0.05,0.1")]
    pub lambdas: Vec<f64>,
    /// Mean photon numbers; each gives one coherent and one thermal case.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    pub means: Vec<f64>,
    #[arg(long, value_name = "PATH")]
    pub povm: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub detector: Option<PathBuf>,
}

fn resolve_config(g: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = Some(s);
    }
    if let Some(v) = g.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = g.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = g.pulses {
        cfg.pulses = v;
    }
    if let Some(d) = &g.output {
        cfg.output_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(cfg, &a),
        Command::Tomo(a) => commands::tomo(cfg, &a),
        Command::Reconstruct(a) => commands::reconstruct(cfg, &a),
        Command::Bench(a) => commands::bench(cfg, &a),
        Command::SweepGamma(a) => commands::sweep_gamma(cfg, &a),
        Command::SweepLambda(a) => commands::sweep_lambda(cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
