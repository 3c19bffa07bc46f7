use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ordgee::cli::{exit_code, fit_command, report_command, simulate_command, ReportFormat};

#[derive(Parser)]
#[command(name = "ordgee", version, about = "Marginal proportional-odds models for incomplete longitudinal ordinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Txt,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; all cores by default.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Fit the configured estimators to a long-format CSV.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the results stored in an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "txt")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed, jobs } => simulate_command(&config, &out, seed, jobs).map(|r| {
            print!("{}", r.to_table());
            0
        }),
        Command::Fit { config, data, out } => fit_command(&config, &data, &out).map(|r| {
            print!("{}", r.to_table());
            if r.any_failed() {
                3
            } else {
                0
            }
        }),
        Command::Report { input, format } => {
            let f = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
                Format::Txt => ReportFormat::Txt,
            };
            report_command(&input, f).map(|s| {
                print!("{s}");
                0
            })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
