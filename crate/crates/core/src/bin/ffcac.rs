use std::process::ExitCode;

use anyhow::anyhow;
use clap::Parser;
use ffcac::cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let command = format!("{:?}", cli.command).split('(').next().unwrap_or_default().to_lowercase();
    let result = execute(cli);
    if let Err(e) = &result {
        eprintln!("error: {:#}", anyhow!("{e}").context(format!("ffcac {command} failed")));
    }
    ExitCode::from(exit_code(&result) as u8)
}
