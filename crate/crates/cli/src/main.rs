use std::process::ExitCode;

use clap::Parser;
use online_wpe_cli::commands::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { online_wpe_cli::exit::USAGE as u8 } else { 0 });
        }
    };
    let cfg = match cli.resolve_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
