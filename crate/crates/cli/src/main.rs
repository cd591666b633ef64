use std::process::ExitCode;

use clap::Parser;
use qfrog_cli::{Cli, CliError, Command};
use tracing_subscriber::EnvFilter;

fn run(cli: Cli) -> Result<(), CliError> {
    let text = match cli.command {
        Command::Train(args) => qfrog_cli::train(&args)?,
        Command::Eval(args) => qfrog_cli::eval_run(&args.run_dir, args.densities)?,
        Command::Compare { run_a, run_b } => qfrog_cli::compare(&run_a, &run_b)?,
        Command::RenderEpisode(args) => qfrog_cli::render_episode(&args)?,
        Command::Play(args) => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(e.to_string()))?;
            rt.block_on(qfrog_cli::play(&args))?;
            String::new()
        }
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
