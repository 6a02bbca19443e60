use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use riskfield::ablations::PolicyVariant;
use riskfield::config::RunConfig;
use riskfield::world::Regime;

mod commands;
mod error;

use error::CliError;

/// Risk-aware Hamiltonian navigation: scenario generation, training,
/// paired evaluation and property checks.
#[derive(Debug, Parser)]
#[command(name = "riskfield", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override the config file, which
/// overrides the built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for episode parallelism (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Variant to train, evaluate or export; repeat for several.
    #[arg(long = "variant", global = true, value_name = "NAME", value_parser = parse_variant)]
    pub variants: Vec<PolicyVariant>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// CVaR level used for training (overrides the variant preset).
    #[arg(long, global = true, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub batch: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,
    /// Integrator step (s).
    #[arg(long, global = true, value_name = "F")]
    pub tau: Option<f64>,
    /// Lateral deviation threshold for evaluation and checks (m).
    #[arg(long, global = true, value_name = "F")]
    pub delta: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write scenario specs and their field grids.
    Generate,
    /// Train the selected variants and write checkpoints and logs.
    Train(TrainArgs),
    /// Paired evaluation of trained checkpoints.
    Eval(CheckpointArgs),
    /// Run the property-check table; exits 3 if any check fails.
    Theory(CheckpointArgs),
    /// Write per-step trajectory and gate traces for one scenario.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from checkpoints already in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Fit the geometry-only goal gain and damping before training.
    #[arg(long)]
    pub fit_geometry: bool,
    /// Geometry-only checkpoint whose parameters seed every variant.
    #[arg(long, value_name = "PATH", conflicts_with = "fit_geometry")]
    pub geometry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Directory holding the checkpoints (defaults to --out).
    #[arg(long, value_name = "DIR")]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub checkpoints: CheckpointArgs,
    #[arg(long, value_name = "NAME", default_value = "DelayedEscape", value_parser = parse_regime)]
    pub regime: Regime,
    /// Scenario seed (defaults to the global seed).
    #[arg(long, value_name = "U64")]
    pub scenario_seed: Option<u64>,
}

fn parse_variant(s: &str) -> Result<PolicyVariant, String> {
    s.parse().map_err(|e: riskfield::ablations::AblationError| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "r1" => Ok(Regime::R1),
        "r2" => Ok(Regime::R2),
        "r3" => Ok(Regime::R3),
        "delayedescape" | "de" => Ok(Regime::DelayedEscape),
        _ => Err(format!("unknown regime {s:?}; expected R1, R2, R3 or DelayedEscape")),
    }
}

fn config_keys_help() -> String {
    let mut text = String::from("Config keys (JSON path = default):\n");
    for (key, default) in RunConfig::documented_keys() {
        text.push_str(&format!("  {key} = {default}\n"));
    }
    text.push_str("\nExit codes: 0 ok, 1 usage, 2 runtime fault, 3 check failure.");
    text
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = commands::resolve_config(&cli.global)?;
    commands::init_workers(cfg.workers)?;
    let out = &cli.global.out;
    match cli.command {
        Command::Generate => commands::generate(&cfg, out),
        Command::Train(args) => commands::train(&cfg, out, &args),
        Command::Eval(args) => commands::eval(&cfg, out, &args),
        Command::Theory(args) => commands::theory(&cfg, out, &args),
        Command::Export(args) => commands::export(&cfg, out, &args),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_help(config_keys_help()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
