mod cmd;
mod config;
mod error;
mod par;

use std::process::ExitCode;

use clap::Parser;

const EXIT_CODE_HELP: &str = "Exit codes:
  0  success
  1  usage error (bad flags, bad config file)
  2  data error (missing or malformed inputs)
  3  internal error";

#[derive(Debug, Parser)]
#[command(
    name = "fsed",
    version,
    about = "Few-shot bioacoustic sound event detection",
    after_help = EXIT_CODE_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Train an embedding network on an annotated dataset root
    Train(cmd::train::Args),
    /// Detect events in evaluation files with a trained checkpoint
    Infer(cmd::infer::Args),
    /// Score a predictions CSV against ground-truth annotations
    Eval(cmd::eval::Args),
    /// Dump the feature matrix for one WAV file
    Features(cmd::features::Args),
    /// Convert run outputs into tidy plot-data CSVs
    Report(cmd::report::Args),
    /// Run an experiment plan of inference variants over one checkpoint
    Sweep(cmd::sweep::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too, and those exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd::train::run(args),
        Command::Infer(args) => cmd::infer::run(args),
        Command::Eval(args) => cmd::eval::run(args),
        Command::Features(args) => cmd::features::run(args),
        Command::Report(args) => cmd::report::run(args),
        Command::Sweep(args) => cmd::sweep::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
