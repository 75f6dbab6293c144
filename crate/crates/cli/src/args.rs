use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dualfilt", version, about = "Filtering and dual control experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. All of them are echoed into the report.
#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Model JSON (finite-state or linear-Gaussian, depending on the command).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, global = true, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, global = true, default_value_t = 1.0)]
    pub horizon: f64,
    /// Report file; printed to stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Model file checks.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Simulate one hidden path and its observations.
    Simulate(SimulateArgs),
    #[command(subcommand)]
    Filter(FilterCommand),
    #[command(subcommand)]
    Dual(DualCommand),
    #[command(subcommand)]
    Bsde(BsdeCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Finite,
    Lg,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelCommand {
    Validate {
        #[arg(long, value_enum, default_value_t = ModelKind::Finite)]
        kind: ModelKind,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Stream index of the path.
    #[arg(long, default_value_t = 0)]
    pub path: u64,
    /// Observation CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Where the observation path comes from.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ObservationArgs {
    /// Observation CSV (`t, Z_1..Z_m`); overrides the simulated path.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Stream index of the simulated path.
    #[arg(long, default_value_t = 0)]
    pub path: u64,
    /// CSV output for the computed trajectory.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterCommand {
    Wonham(ObservationArgs),
    Kalman(ObservationArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TerminalArgs {
    /// Terminal function or vector, e.g. `0,1`.
    #[arg(long, default_value = "0,1")]
    pub terminal: String,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualCommand {
    /// Exact cost against Monte Carlo for a constant deterministic control.
    DetCheck {
        #[command(flatten)]
        #[serde(flatten)]
        terminal: TerminalArgs,
        /// Constant control value per observation channel.
        #[arg(long, default_value = "0")]
        control: String,
    },
    /// Best piecewise-constant deterministic control.
    DetOpt {
        #[command(flatten)]
        #[serde(flatten)]
        terminal: TerminalArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Minimum-variance dual of the linear-Gaussian model.
    Lq {
        #[arg(long, default_value = "1")]
        terminal: String,
    },
    /// Minimum-energy dual on one observation path.
    Mee(ObservationArgs),
    /// Mean/variance cost split under two gain paths.
    MnCompare(ObservationArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BsdeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub terminal: TerminalArgs,
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
    /// Shift the optimal feedback by this amount in every channel.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BsdeCommand {
    /// Fit the dual on a training ensemble and evaluate it out of sample.
    Solve {
        #[command(flatten)]
        #[serde(flatten)]
        bsde: BsdeArgs,
        /// Dual trajectory CSV for the first training paths.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        csv_paths: usize,
    },
    Gap(BsdeArgs),
    Martingale(BsdeArgs),
    Prop1(BsdeArgs),
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::Model(ModelCommand::Validate { .. }) => "model validate".into(),
            Command::Simulate(_) => "simulate".into(),
            Command::Filter(FilterCommand::Wonham(_)) => "filter wonham".into(),
            Command::Filter(FilterCommand::Kalman(_)) => "filter kalman".into(),
            Command::Dual(c) => format!(
                "dual {}",
                match c {
                    DualCommand::DetCheck { .. } => "det-check",
                    DualCommand::DetOpt { .. } => "det-opt",
                    DualCommand::Lq { .. } => "lq",
                    DualCommand::Mee(_) => "mee",
                    DualCommand::MnCompare(_) => "mn-compare",
                }
            ),
            Command::Bsde(c) => format!(
                "bsde {}",
                match c {
                    BsdeCommand::Solve { .. } => "solve",
                    BsdeCommand::Gap(_) => "gap",
                    BsdeCommand::Martingale(_) => "martingale",
                    BsdeCommand::Prop1(_) => "prop1",
                }
            ),
        }
    }
}
