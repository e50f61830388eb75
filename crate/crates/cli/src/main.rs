//! `gridgp`: reconcile multi-rate feeder measurements, tune, estimate states, run experiments and verify invariants.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use gridgp_core::gp_recursive::Schedule;
use gridgp_core::impute::Method;
use gridgp_core::kernel::NoiseMode;

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<gridgp_core::Error> for CliError {
    fn from(e: gridgp_core::Error) -> Self {
        use gridgp_core::Error as E;
        match e {
            E::SingularSystem(_)
            | E::FactorizationFailure(_)
            | E::NotConverged(_)
            | E::AllCandidatesFailed
            | E::AllTargetsNearZero
            | E::StaleStep { .. }
            | E::NonCausalQuery { .. }
            | E::NoiseOnRectangular { .. }
            | E::EmptyObservations
            | E::EmptySeries { .. }
            | E::PartitionInfeasible(_) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridgp", version, about = "Multi-rate feeder measurement reconciliation and state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Impute every series on the fine grid.
    Impute(RunArgs),
    /// Cross-validate hyperparameters over the `[tune]` grid.
    Tune(RunArgs),
    /// Matrix-completion state estimation at each FAD level.
    Dsse(RunArgs),
    /// Seeded benchmark over methods, noise, missing levels and repeats.
    Experiment(RunArgs),
    /// Run the property battery and write JSON verdicts.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, action = ArgAction::Append)]
    method: Vec<MethodArg>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Graph smoothing strength.
    #[arg(long)]
    alpha: Option<f64>,
    /// Measurement CSV (`time,task,node,value,observed`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Edge-list CSV (`from,to`).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Write `trace_log.csv` with the covariance trace after each step.
    #[arg(long)]
    trace_log: bool,
    /// Check the covariance-trace theorems on this run; failure exits with 4.
    #[arg(long)]
    verify_theorems: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated subset of checks.
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    /// Fault injection: corrupt adjacency symmetry so the laplacian check must fail.
    #[arg(long)]
    break_symmetry: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    FullGp,
    Rgp,
    RgpG,
    Linear,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::FullGp => Method::FullGp,
            MethodArg::Rgp => Method::Rgp,
            MethodArg::RgpG => Method::RgpG,
            MethodArg::Linear => Method::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Interpolate,
    Predict,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    PaperLiteral,
}

/// Everything a subcommand needs after merging.
pub struct Run {
    pub cfg: RunConfig,
    pub digest: String,
    pub out: PathBuf,
    pub trace_log: bool,
    pub verify_theorems: bool,
    pub break_symmetry: bool,
}

impl Run {
    /// Comment line heading every CSV and text output.
    pub fn stamp(&self) -> String {
        format!(
            "# config_digest={} seed={} schema_version={}\n",
            self.digest, self.cfg.seed, self.cfg.schema_version
        )
    }
}

fn load(common: &CommonArgs, o: Overrides, name: &str) -> Result<(RunConfig, String), CliError> {
    let file = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.merged(&Overrides { seed: common.seed, ..o })?;
    let digest = cfg.digest(name);
    Ok((cfg, digest))
}

fn run_args(a: &RunArgs, name: &str) -> Result<Run, CliError> {
    if a.method.len() > 1 {
        return Err(CliError::Config("--method is mutually exclusive: give it at most once".into()));
    }
    let o = Overrides {
        method: a.method.first().map(|&m| m.into()),
        schedule: a.schedule.map(|s| match s {
            ScheduleArg::Interpolate => Schedule::Interpolation,
            ScheduleArg::Predict => Schedule::Prediction,
        }),
        mode: a.mode.map(|m| match m {
            ModeArg::Standard => NoiseMode::Standard,
            ModeArg::PaperLiteral => NoiseMode::PaperLiteral,
        }),
        alpha: a.alpha,
        measurements: a.input.clone(),
        graph: a.graph.clone(),
        ..Default::default()
    };
    let (cfg, digest) = load(&a.common, o, name)?;
    Ok(Run {
        cfg,
        digest,
        out: a.common.out.clone(),
        trace_log: a.trace_log,
        verify_theorems: a.verify_theorems,
        break_symmetry: false,
    })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Impute(a) => commands::impute(&run_args(&a, "impute")?),
        Command::Tune(a) => commands::tune(&run_args(&a, "tune")?),
        Command::Dsse(a) => commands::dsse(&run_args(&a, "dsse")?),
        Command::Experiment(a) => commands::experiment(&run_args(&a, "experiment")?),
        Command::Verify(a) => {
            let (cfg, digest) = load(&a.common, Overrides { checks: a.checks.clone(), ..Default::default() }, "verify")?;
            let run = Run {
                cfg,
                digest,
                out: a.common.out.clone(),
                trace_log: false,
                verify_theorems: false,
                break_symmetry: a.break_symmetry,
            };
            verify::run(&run)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridgp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
