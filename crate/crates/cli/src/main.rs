use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = pgae_cli::Cli::parse();
    match pgae_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pgae: {e}");
            e.exit_code()
        }
    }
}
