use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = beamlab_cli::Cli::parse();
    match beamlab_cli::run(&cli) {
        Ok(Some(s)) => {
            let names = |v: &[beamlab_cli::Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(" ");
            log::info!("executed: [{}] skipped: [{}]", names(&s.executed), names(&s.skipped));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
