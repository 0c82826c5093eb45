use std::process::ExitCode;

use clap::Parser;
use drsim::cli::{exit_code, run, Args, ConfigError};

/// Worker threads; defaults to rayon's choice.
const THREADS_ENV: &str = "DRSIM_THREADS";

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match args.resolve() {
        Ok(cfg) => cfg,
        Err(ConfigError::Args(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}\n\nRun `drsim --help` for usage.");
            return ExitCode::from(1);
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(k) if k > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    match run(&cfg) {
        Ok(report) => {
            for table in &report.tables {
                println!("{}", table.to_markdown());
            }
            for f in &report.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
