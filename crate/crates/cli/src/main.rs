use clap::Parser;
use progseg_cli::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = execute(cli) {
        log::error!("{e}");
        eprintln!("{}", e.record());
        std::process::exit(e.exit_code());
    }
}
