//! The `attnindex` command line: generate workloads, build indexes, sweep
//! recall against scan cost, run decode and measure query/key mismatch.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Outcome;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "attnindex", version, about = "Retrieval-based sparse attention experiments")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: engine.n_threads, or all cores when that is 0).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Check invariants after the command and exit nonzero on any failure.
    #[arg(long, global = true)]
    pub verify: bool,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override such as `workload.n_ctx=4096`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload and dump it with a manifest.
    Gen,
    /// Build one index per head and write a build report.
    Build,
    /// Recall versus scan fraction over each index's knob.
    Sweep,
    /// Run sparse decode steps and write a per-step trace.
    Decode,
    /// Mahalanobis gap and top-k attention error.
    Diagnose,
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> crate::Result<Outcome> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    let threads = cli.threads.unwrap_or(config.engine.n_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gen => commands::cmd_gen(&config, cli.verify),
        Command::Build => commands::cmd_build(&config, cli.verify),
        Command::Sweep => commands::cmd_sweep(&config, cli.verify),
        Command::Decode => commands::cmd_decode(&config, cli.verify),
        Command::Diagnose => commands::cmd_diagnose(&config, cli.verify),
    })
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> crate::Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| crate::Error::Config(e.to_string()))?;
    run(&cli)
}

/// Entry point for the binary. Returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTNINDEX_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) if out.failures.is_empty() => {
            if cli.verify {
                eprintln!("verify: ok");
            }
            0
        }
        Ok(out) => {
            let report = serde_json::json!({ "failures": out.failures });
            println!("{report}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
