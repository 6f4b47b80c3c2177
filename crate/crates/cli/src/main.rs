use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dcmon_core::scenario::{run_scenario, ScenarioSpec};

#[derive(Parser)]
#[command(
    name = "dcmon",
    version,
    about = "Simulate the metrics pipeline against a scenario file"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its report. Exits 1 if any assertion fails.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        report: Format,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a scenario without running it.
    Validate { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { scenario } => match ScenarioSpec::load(&scenario) {
            Ok(spec) => {
                println!("{}: ok ({} nodes)", spec.name, spec.nodes().len());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{}: {e}", scenario.display());
                ExitCode::from(2)
            }
        },
        Command::Run {
            scenario,
            report,
            out,
        } => {
            let result = ScenarioSpec::load(&scenario).and_then(|spec| run_scenario(&spec));
            let r = match result {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{}: {e}", scenario.display());
                    return ExitCode::from(2);
                }
            };
            let text = match report {
                Format::Text => r.to_text(),
                Format::Csv => r.to_csv(),
            };
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, text) {
                        eprintln!("cannot write {}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                }
                None => print!("{text}"),
            }
            if r.all_passed() {
                ExitCode::SUCCESS
            } else {
                for a in r.assertions.iter().filter(|a| !a.passed) {
                    eprintln!("assertion failed: {} ({})", a.name, a.detail);
                }
                ExitCode::FAILURE
            }
        }
    }
}
