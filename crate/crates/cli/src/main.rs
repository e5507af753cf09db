use std::process::ExitCode;

use anyhow::anyhow;
use clap::error::ErrorKind;
use clap::Parser;
use spidernet_cli::{execute, Cli};

fn run() -> anyhow::Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            // first paragraph of clap's report, folded onto one line
            let text = e.to_string();
            let line: Vec<&str> = text.lines().map(str::trim).take_while(|l| !l.is_empty()).collect();
            return Err(anyhow!("{}", line.join(" ").trim_start_matches("error: ")));
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let out = execute(cli.command)?;
    if !out.is_empty() {
        println!("{out}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
