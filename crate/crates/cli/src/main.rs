use std::process::ExitCode;

use clap::Parser;
use log::{error, LevelFilter};
use msp_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { LevelFilter::Warn } else { LevelFilter::Info })
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();
    if let Some(n) = std::env::var("MSP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            error!("MSP_THREADS ignored: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
