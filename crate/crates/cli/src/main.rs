use std::process::ExitCode;

use clap::Parser;
use segdetect_cli::cli::{Cli, Command};
use segdetect_cli::pipeline::configure_threads;
use segdetect_cli::Stage;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = configure_threads().and_then(|()| cli.execute());
    match result {
        Ok(pipeline) => {
            if matches!(cli.command, Command::RunAll | Command::Report) {
                println!("{}", pipeline.stage_dir(Stage::Report).join("report.csv").display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
