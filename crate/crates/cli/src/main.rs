use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rulefit_hte_cli::commands::{cmd_fit, cmd_predict, cmd_report, cmd_simulate, print, simulate_summary, ReportFilter};
use rulefit_hte_cli::CliError;

/// Heterogeneous treatment effects from two-arm trial data with S-learner rule ensembles.
#[derive(Parser)]
#[command(name = "rulefit-hte", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write model.json, report.txt, report.json, tertiles.csv and forest.csv.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config value, e.g. `--set seed=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Write id,mu1,mu0,tau for every row of a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation grid and write its results ledger.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Print the rule report of a saved model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Keep the N most important rules.
        #[arg(long, conflicts_with = "min_importance")]
        top: Option<usize>,
        /// Keep rules above the mean importance (`mean`) or at least this raw importance.
        #[arg(long, value_name = "mean|VALUE")]
        min_importance: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit {
            config,
            data,
            out,
            sets,
        } => {
            let fit = cmd_fit(&config, &data, &out, &sets)?;
            print(&format!(
                "fitted: {} active treatment rule(s), lambda {}; wrote {}\n",
                fit.active_rules,
                fit.lambda,
                fit.out_dir.display()
            ));
        }
        Command::Predict { model, data, out } => {
            let n = cmd_predict(&model, &data, &out)?;
            print(&format!("predicted {n} row(s) into {}\n", out.display()));
        }
        Command::Simulate { grid, out, sets } => {
            let results = cmd_simulate(&grid, &out, &sets)?;
            print(&simulate_summary(&results));
        }
        Command::Report {
            model,
            top,
            min_importance,
        } => {
            let filter = match (top, min_importance) {
                (Some(k), _) => ReportFilter::Top(k),
                (None, Some(t)) => ReportFilter::min_importance(&t)?,
                (None, None) => ReportFilter::All,
            };
            print(&cmd_report(&model, filter)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // keep clap's reason, drop its usage and help hints
            let text = e.render().to_string();
            let reason: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", CliError::usage(reason.join(" ")));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
