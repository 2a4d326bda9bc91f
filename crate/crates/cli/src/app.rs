//! Command-line surface and the dispatch behind the binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use maxent_pref::verify::{run_verify, VerifyLevel, VerifyReport};

use crate::artifacts::{output_dir, parse_values, run_to_dir, sweep};
use crate::config::{parse_config, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "maxent-pref", version, about = "Preference-optimization laboratory on enumerable token environments")]
pub struct Cli {
    /// Print the default config and exit.
    #[arg(long)]
    pub print_defaults: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configured method and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the config once per value of a scalar key.
    Sweep {
        config: PathBuf,
        /// Dotted key, e.g. `method.gamma`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the derivation battery.
    Verify {
        /// 50 seeds per check instead of 5.
        #[arg(long)]
        full: bool,
        /// Where to write the JSON report.
        #[arg(long, default_value = "verify-report.json")]
        report: PathBuf,
    },
    /// Print the default config.
    PrintDefaults,
}

fn write_report(report: &VerifyReport, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Executes a parsed command line, printing to `out`, and returns the exit code.
pub fn dispatch(cli: Cli, out: &mut dyn Write) -> i32 {
    match dispatch_inner(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch_inner(cli: Cli, out: &mut dyn Write) -> CliResult<i32> {
    let stdout_err = |e: std::io::Error| CliError::Io { path: "<stdout>".into(), message: e.to_string() };
    if cli.print_defaults {
        write!(out, "{}", RunConfig::default().to_pretty_json()).map_err(stdout_err)?;
        return Ok(0);
    }
    let Some(command) = cli.command else {
        return Err(CliError::validation("command", "expected one of run, sweep, verify, print-defaults"));
    };
    match command {
        Command::PrintDefaults => {
            write!(out, "{}", RunConfig::default().to_pretty_json()).map_err(stdout_err)?;
            Ok(0)
        }
        Command::Run { config, output_dir: dir } => {
            let cfg = parse_config(&config)?;
            let dir = output_dir(&cfg, dir.as_deref());
            let summary = run_to_dir(&cfg, &dir)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("json")).map_err(stdout_err)?;
            writeln!(out, "artifacts written to {}", dir.display()).map_err(stdout_err)?;
            Ok(0)
        }
        Command::Sweep { config, axis, values, output_dir: dir } => {
            let cfg = parse_config(&config)?;
            let values = parse_values(&values)?;
            let dir = output_dir(&cfg, dir.as_deref());
            let index = sweep(&cfg, &axis, &values, &dir)?;
            for e in &index.entries {
                writeln!(
                    out,
                    "{} {} {}",
                    e.status,
                    e.dir,
                    e.error.clone().unwrap_or_default()
                )
                .map_err(stdout_err)?;
            }
            Ok(index.exit_code())
        }
        Command::Verify { full, report } => {
            let level = if full { VerifyLevel::Full } else { VerifyLevel::Fast };
            let r = run_verify(level);
            write_report(&r, &report)?;
            write!(out, "{}", r.render()).map_err(stdout_err)?;
            if r.passed() {
                Ok(0)
            } else {
                Err(CliError::Verification(r.failures().join(", ")))
            }
        }
    }
}

/// Parses `args` (including the program name) and dispatches.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli, out),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
