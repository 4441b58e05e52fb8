use clap::{Args, Parser, Subcommand};
use predrisk_cli::commands::{render_rows, run};
use predrisk_cli::config::{CliOverrides, Command as RunCommand, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Predictive-risk benchmark for empirical Bayes density estimation in
/// linear mixed models under covariate shift.
#[derive(Parser)]
#[command(name = "predrisk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dependency-fraction and improvement-factor curves over the n grid.
    Diagnose(RunArgs),
    /// Risk-estimator accuracy against quadrature ground truth.
    RiskCheck(RunArgs),
    /// Excess-KL-risk comparison of the proposed method and the baselines.
    Table1(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`key = value` lines with [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cases to run, e.g. --case A,B,E (default: all six).
    #[arg(long, value_delimiter = ',')]
    case: Vec<String>,
    /// Unit counts, e.g. --n-grid 100,400,1600.
    #[arg(long = "n-grid", value_delimiter = ',')]
    n_grid: Vec<usize>,
    /// Threshold policies: an integer, logn, n14, or n12.
    #[arg(long = "h-policy", value_delimiter = ',')]
    h_policy: Vec<String>,
    /// Replications per grid cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed (required here or in the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter mode: known | estimated.
    #[arg(long)]
    mode: Option<String>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Quadrature nodes for risk evaluation.
    #[arg(long)]
    nodes: Option<usize>,
    /// Output format: csv | json.
    #[arg(long)]
    format: Option<String>,
}

impl RunArgs {
    fn overrides(self) -> CliOverrides {
        CliOverrides {
            config: self.config,
            cases: self.case,
            n_grid: self.n_grid,
            h_policies: self.h_policy,
            reps: self.reps,
            seed: self.seed,
            mode: self.mode,
            out: self.out,
            nodes: self.nodes,
            format: self.format,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Diagnose(a) => (RunCommand::Diagnose, a),
        Cmd::RiskCheck(a) => (RunCommand::RiskCheck, a),
        Cmd::Table1(a) => (RunCommand::Table1, a),
    };
    let config = match RunConfig::resolve(command, &args.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let mut output = run(&config);
    let document = render_rows(&config, &mut output);
    match &config.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &document) {
                eprintln!("cannot write {}: {e}", path.display());
                return ExitCode::from(2);
            }
            if let Some(summary) = &output.summary_json {
                let summary_path = path.with_extension("summary.json");
                if let Err(e) = std::fs::write(&summary_path, summary) {
                    eprintln!("cannot write {}: {e}", summary_path.display());
                    return ExitCode::from(2);
                }
            }
        }
        None => {
            print!("{document}");
            if let Some(summary) = &output.summary_json {
                eprint!("{summary}");
            }
        }
    }
    if output.any_failed {
        eprintln!("warning: some cells failed; see status=failed rows");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
