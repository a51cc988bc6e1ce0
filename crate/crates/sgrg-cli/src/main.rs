//! `sgrg`: command-line front end of the sine-Gordon RG engine.
//!
//! Exit codes: 0 when every check passes, 1 on a check failure, 2 on a usage error,
//! 3 when a resource cap would be exceeded.

mod args;
mod output;
mod run;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{expand_config, Cli};
use output::OutDir;

const PASS: u8 = 0;
const CHECK_FAILED: u8 = 1;
const USAGE: u8 = 2;
const RESOURCE_CAP: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<sgrg::Error>() {
        Some(sgrg::Error::InvalidParameter { .. }) => USAGE,
        Some(sgrg::Error::ResourceCap(_)) => RESOURCE_CAP,
        Some(_) => CHECK_FAILED,
        None => USAGE,
    }
}

fn execute(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut out = OutDir::create(&cli.out)?;
    let outcome = run::run(&cli.command, &mut out)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let mut outputs = out.written().to_vec();
    outputs.push("manifest.json".into());
    let manifest = json!({
        "tool": "sgrg",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "arguments": &cli.command,
        "config": outcome.resolved,
        "threads": cli.threads,
        "passed": outcome.passed,
        "warnings": outcome.warnings,
        "summary": outcome.summary,
        "outputs": outputs,
    });
    out.json("manifest.json", &manifest)?;
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { PASS });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::from(PASS),
        Ok(false) => ExitCode::from(CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
