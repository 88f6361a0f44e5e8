use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ricefield::sampler::PositivityMode;
use ricefield_cli::config::{BurnInSetting, FamilyName, HyperPrior, RunConfig, Theta0Prior};
use ricefield_cli::{run, CliError};

/// Bayesian diffusion-tensor field estimation under Rician noise.
#[derive(Parser)]
#[command(name = "ricefield", version)]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the standard crossing phantom.
    Simulate(SimulateArgs),
    /// Fit the WLS initializer and store it as a chain state.
    Init(InitArgs),
    /// Run the sampler; writes summary, trace and draws.
    Fit(FitArgs),
    /// DIC report and acceptance histogram of a finished run.
    Diagnose(DiagnoseArgs),
    /// FA/MD/acceptance/noise maps and diffusivity profiles.
    Export(ExportArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct ModelArgs {
    /// Model family.
    #[arg(long, value_enum)]
    model: Option<FamilyName>,
    /// SH order n (degrees 0, 2, ..., 2n).
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset stem to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise standard deviation (0 gives noiseless data).
    #[arg(long)]
    sigma: Option<f64>,
    /// Store floor(Y / STEP) instead of Y.
    #[arg(long, value_name = "STEP")]
    quantize: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated b-values in s/mm^2.
    #[arg(long, value_delimiter = ',')]
    shells: Option<Vec<f64>>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Chain-state file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Largest b-value used by the initializer.
    #[arg(long)]
    b_max: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Initial chain state; WLS is run when the file does not exist.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    cycles: Option<u64>,
    /// "auto" or a number of cycles.
    #[arg(long, value_parser = BurnInSetting::parse)]
    burn_in: Option<BurnInSetting>,
    #[arg(long)]
    thin: Option<u64>,
    /// Block radius r.
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_positivity)]
    positivity: Option<PositivityMode>,
    /// Intrinsic prior on log S0 differences with this precision.
    #[arg(long)]
    rho: Option<f64>,
    /// Hold hyperparameters fixed at these comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    hyper_fixed: Option<Vec<f64>>,
    #[arg(long)]
    workers: Option<usize>,
    /// Use the forward Laplace approximation for the reverse move too.
    #[arg(long)]
    single_scoring: bool,
    /// Proposal covariance multiplier.
    #[arg(long)]
    inflation: Option<f64>,
    /// Update log S0 with its Gamma conditional in every voxel each cycle.
    #[arg(long)]
    theta0_every_cycle: bool,
    /// Fit configuration file paths and b_max as for `init`.
    #[arg(long)]
    b_max: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_positivity(s: &str) -> Result<PositivityMode, String> {
    match s {
        "constrained" => Ok(PositivityMode::Constrained),
        "counting" => Ok(PositivityMode::Counting),
        _ => Err(format!("expected 'constrained' or 'counting', got '{s}'")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_model(cfg: &mut RunConfig, m: ModelArgs) {
    set(&mut cfg.model.family, m.model);
    set(&mut cfg.model.order, m.order);
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let command = match cli.command {
        Command::Simulate(a) => {
            set(&mut cfg.paths.data, a.out);
            set(&mut cfg.simulate.sigma, a.sigma);
            set(&mut cfg.simulate.seed, a.seed);
            set(&mut cfg.simulate.shells, a.shells);
            if a.quantize.is_some() {
                cfg.simulate.quantize = a.quantize;
            }
            run::simulate
        }
        Command::Init(a) => {
            set(&mut cfg.paths.data, a.data);
            set(&mut cfg.paths.init, a.out);
            apply_model(&mut cfg, a.model);
            set(&mut cfg.init.b_max, a.b_max);
            run::init
        }
        Command::Fit(a) => {
            set(&mut cfg.paths.data, a.data);
            set(&mut cfg.paths.init, a.init);
            set(&mut cfg.paths.run, a.run);
            apply_model(&mut cfg, a.model);
            let s = &mut cfg.sampler;
            set(&mut s.cycles, a.cycles);
            set(&mut s.burn_in, a.burn_in);
            set(&mut s.thin, a.thin);
            set(&mut s.block_radius, a.radius);
            set(&mut s.seed, a.seed);
            set(&mut s.positivity, a.positivity);
            set(&mut s.workers, a.workers);
            set(&mut s.inflation, a.inflation);
            if let Some(rho) = a.rho {
                s.theta0_prior = Theta0Prior::Intrinsic { rho };
            }
            if let Some(values) = a.hyper_fixed {
                s.hyper = HyperPrior::Fixed { values };
            }
            if a.single_scoring {
                s.double_scoring = false;
            }
            if a.theta0_every_cycle {
                s.theta0_every_cycle = true;
            }
            set(&mut cfg.init.b_max, a.b_max);
            run::fit
        }
        Command::Diagnose(a) => {
            set(&mut cfg.paths.data, a.data);
            set(&mut cfg.paths.run, a.run);
            run::diagnose
        }
        Command::Export(a) => {
            set(&mut cfg.paths.data, a.data);
            set(&mut cfg.paths.run, a.run);
            set(&mut cfg.paths.export, a.out);
            run::export
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    cfg.validate()?;
    command(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
