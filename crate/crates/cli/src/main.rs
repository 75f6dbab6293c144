mod args;
mod report;
mod run;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use args::Cli;
use report::Report;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let start = Instant::now();
    let outcome = match run::run(&cli.global, &cli.command) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL };
            return ExitCode::from(code);
        }
    };
    let config = json!({
        "global": cli.global,
        "command": cli.command,
    });
    let report = Report::new(cli.command.name(), config, outcome.inputs, outcome.result, start.elapsed());
    if let Err(e) = report.emit(cli.global.out.as_deref()) {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    log::info!("{} finished in {:.2?}", cli.command.name(), start.elapsed());
    ExitCode::SUCCESS
}
