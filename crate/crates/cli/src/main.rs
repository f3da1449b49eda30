use std::process::ExitCode;

use clap::Parser;
use entk_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("entk {command}: {e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
