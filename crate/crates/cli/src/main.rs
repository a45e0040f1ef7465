mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Robust least squares over Grassmannian balls and data-driven tracking.
#[derive(Parser, Debug)]
#[command(name = "georls", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand. A flag overrides the config value.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; missing keys fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "georls-out")]
    pub out: PathBuf,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Independent runs with seeds `seed, seed+1, …`.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeat: u64,

    /// Noise-to-signal ratio of the measurement noise.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,

    /// Ball radius in degrees; the chordal radius is its sine.
    #[arg(long = "rho-deg", global = true)]
    pub rho_deg: Option<f64>,

    /// Weight of the past-consistency penalty.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Excite a plant, identify its restricted behavior, persist the estimate.
    Identify(IdentifyArgs),
    /// Solve one robust least-squares problem and write its trace.
    Solve(SolveArgs),
    /// Run the receding-horizon loop and the nominal baseline.
    Control(ControlArgs),
    /// Check the closed-form solver against brute-force oracles.
    Verify(VerifyArgs),
    /// Time the Gr(37, 70) benchmark solve and the structured eigensolver.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    /// Preset used when no config is given, or as the base of a partial one.
    #[arg(long, default_value = "double_integrator")]
    pub system: String,
    /// Identify from a trajectory CSV (`t,w_1..w_q`) instead of simulating.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Subspace dimension for `--data`; defaults to `m·L + n_x` of the system.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Problem center from a persisted estimate instead of the config.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Record the inner stationarity residual at every iterate.
    #[arg(long)]
    pub stationarity: bool,
}

#[derive(Args, Debug)]
pub struct ControlArgs {
    #[arg(long, default_value = "double_integrator")]
    pub system: String,
    /// Use a persisted estimate for the robust loop instead of identifying.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Skip the nominal baseline.
    #[arg(long)]
    pub no_nominal: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Selectors {
    Full,
    Partial,
    Any,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Flip the sign of the consistency term in the gradient formula.
    #[arg(long)]
    pub inject_fault: bool,
    /// Random instances per check.
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Which consistency selectors the `M`-dependent checks draw.
    #[arg(long, value_enum, default_value = "full")]
    pub selectors: Selectors,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Gradient-norm tolerance of the timed solve.
    #[arg(long, default_value_t = 1e-4)]
    pub tolx: f64,
    /// Skip the structured-vs-dense eigensolver comparison.
    #[arg(long)]
    pub no_eig: bool,
}

/// Process exit status by failure class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<georls::Error> for Failure {
    fn from(e: georls::Error) -> Self {
        use georls::Error as E;
        let msg = e.to_string();
        match e {
            E::RankDeficient { .. }
            | E::InsufficientColumns { .. }
            | E::NotDetectable { .. }
            | E::BracketFailure { .. }
            | E::ExcitationFailed { .. } => Failure::Numerical(msg),
            E::DimensionMismatch(_)
            | E::HorizonTooShort { .. }
            | E::InvalidStepSize { .. }
            | E::InvalidParameter(_)
            | E::Io(_)
            | E::Csv(_)
            | E::Json(_)
            | E::Parse(_) => Failure::Usage(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Identify(a) => commands::identify(&cli.common, a),
        Command::Solve(a) => commands::solve(&cli.common, a),
        Command::Control(a) => commands::control(&cli.common, a),
        Command::Verify(a) => commands::verify(&cli.common, a),
        Command::Bench(a) => commands::bench(&cli.common, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
