mod args;
mod commands;
mod report;
mod svg;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use args::Cli;
use report::{CliError, CliResult, Workspace};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::usage(e.to_string().trim().to_string())),
    };
    match run(&cli) {
        Ok(report) => {
            println!("{}", json!({ "status": "ok", "command": cli.command.name(), "report": report }));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.code as u8)
}

fn run(cli: &Cli) -> CliResult<String> {
    if let Some(n) = commands::thread_count()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let ws = Workspace { out: cli.out.clone() };
    let cfg = commands::resolve_config(cli, &ws)?;
    let report = cli.report.clone().unwrap_or_else(|| commands::default_report(&cli.command));
    let ctx = commands::Ctx { ws, cfg, report };
    commands::run(&ctx, &cli.command)?;
    Ok(report::rel(&ctx.report))
}
