use std::process::ExitCode;

use clap::Parser;
use contourlab::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    ExitCode::from(run(cli, &mut stdout) as u8)
}
