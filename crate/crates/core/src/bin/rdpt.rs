use std::process::ExitCode;

use clap::Parser;
use rdp_core::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("rdpt: {e}");
            ExitCode::from(1)
        }
    }
}
