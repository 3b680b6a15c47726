use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use rcl_cli::{exit_code, run, run_sweep, sweep_threads, Command, RunConfig, SweepFile, DEFAULT_SEED};
use rcl_core::model::UtilitySpec;

/// Robust contracting under adverse selection and ambiguity.
#[derive(Parser)]
#[command(name = "rcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the principal's robust problem over IC/IR mechanisms.
    Solve(RunArgs),
    /// Find the best menu among seeded random candidate contracts.
    Menu(RunArgs),
    /// Compare the best menu with the best mechanism on the same candidates.
    Equivalence(RunArgs),
    /// Closed forms, entropies and oracle gaps for a drift-type market.
    Market(RunArgs),
    /// Tail estimate of the asymptotic elasticity of the agent's utility.
    AeCheck(RunArgs),
    /// Exhaustive grid search over mechanisms.
    Oracle(RunArgs),
    /// Run a JSON list of configurations in parallel (RCL_THREADS caps threads).
    Sweep {
        /// Sweep file: {"runs": [RunConfig, ...]}.
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// reinsurance_halfline, reinsurance_wholeline, cara_hedging or log_delegation.
    #[arg(long)]
    preset: Option<String>,
    /// Instance JSON (a drift file for `market`).
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Utility levels per atom for `oracle` (2 to 5).
    #[arg(long)]
    levels: Option<usize>,
    /// Agent's retained share of trading gains in delegation models.
    #[arg(long)]
    beta: Option<f64>,
    /// CARA coefficient of the agent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Gauss–Hermite nodes for the market models.
    #[arg(long)]
    nodes: Option<usize>,
    /// Number of candidate contracts for `menu` and `equivalence`.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    z_max: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Utility as JSON for `ae-check`, e.g. '{"family":"crra","gamma":0.5}'.
    #[arg(long)]
    utility: Option<String>,
}

impl RunArgs {
    fn into_config(self, command: Command) -> anyhow::Result<RunConfig> {
        let utility = self
            .utility
            .map(|s| serde_json::from_str::<UtilitySpec>(&s).context("parsing --utility"))
            .transpose()?;
        Ok(RunConfig {
            command,
            preset: self.preset,
            instance: self.instance,
            out: self.out,
            seed: self.seed,
            max_iters: self.max_iters,
            tol: self.tol,
            levels: self.levels,
            beta: self.beta,
            alpha: self.alpha,
            nodes: self.nodes,
            candidates: self.candidates,
            z_max: self.z_max,
            margin: self.margin,
            utility,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Menu(a) => (Command::Menu, a),
        Cmd::Equivalence(a) => (Command::Equivalence, a),
        Cmd::Market(a) => (Command::Market, a),
        Cmd::AeCheck(a) => (Command::AeCheck, a),
        Cmd::Oracle(a) => (Command::Oracle, a),
        Cmd::Sweep { config } => return sweep(&config),
    };
    let result = args.into_config(command).and_then(|cfg| {
        let outcome = run(&cfg)?;
        eprintln!("{}: {:?}, artifacts in {}", command.as_str(), outcome, cfg.out.display());
        Ok(outcome)
    });
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(exit_code(&result) as u8)
}

fn sweep(path: &PathBuf) -> ExitCode {
    let result = (|| -> anyhow::Result<i32> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: SweepFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let entries = run_sweep(&file.runs, sweep_threads()?)?;
        let mut worst = 0;
        for e in &entries {
            match &e.error {
                Some(msg) => eprintln!("{}: exit {} ({msg})", e.out.display(), e.exit_code),
                None => eprintln!("{}: exit {}", e.out.display(), e.exit_code),
            }
            // Input errors outrank non-convergence.
            worst = match (worst, e.exit_code) {
                (1, _) | (_, 1) => 1,
                (a, b) => a.max(b),
            };
        }
        Ok(worst)
    })();
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
