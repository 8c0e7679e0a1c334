use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use ethicrowd::cli::{run, Cli};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => {
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = out.flush();
            eprintln!(
                "{}",
                serde_json::to_string(&e).unwrap_or_else(|_| e.message.clone())
            );
            ExitCode::from(1)
        }
    }
}
