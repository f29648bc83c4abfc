use clap::Parser;
use dgvc::cli::{run, Cli, LOG_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
