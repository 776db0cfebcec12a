//! Command-line driver for `gatefuse`: dataset synthesis, training,
//! evaluation, attention/gate inspection and gradient checking.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use args::{Cli, Command};
pub use error::CliError;

/// Runs a parsed command line, writing reports to `out`.
pub fn run(cli: Cli, out: &mut impl std::io::Write) -> Result<(), CliError> {
    let config = config::RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&config, &a, out),
        Command::Train(a) => commands::train(&config, &a, out),
        Command::Eval(a) => commands::eval(&config, &a, out),
        Command::Inspect(a) => commands::inspect(&config, &a, out),
        Command::Gradcheck(a) => commands::gradcheck(cli.seed.unwrap_or(0), &a, out),
    }
}
