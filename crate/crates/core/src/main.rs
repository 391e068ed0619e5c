use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mmn::cli::Cli::parse();
    match mmn::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
