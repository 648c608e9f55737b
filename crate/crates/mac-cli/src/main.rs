mod cli;
mod commands;
mod config;
mod outputs;

use clap::Parser;

/// 2 for configuration or usage problems, 3 for data problems, 4 for
/// numerical failures during optimization.
fn exit_code(err: &mac::Error) -> i32 {
    use mac::Error;
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Contract(_) | Error::Shape { .. } => 2,
        Error::NonFiniteGradient { .. } => 4,
        _ => 3,
    }
}

fn main() {
    let parsed = cli::Cli::parse();
    if let Err(err) = commands::dispatch(&parsed.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
