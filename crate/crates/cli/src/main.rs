use std::process::ExitCode;

use clap::Parser;

use shapeclust_cli::{error_line, init_threads, run, Cli, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads()
        .and_then(|()| RunConfig::resolve(&cli))
        .and_then(|config| run(&config));
    match result {
        Ok(artifacts) => {
            for f in &artifacts.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
