use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = zedit::cli::Cli::parse();
    match zedit::cli::run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
