use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptransfer_cli::commands::{cmd_evaluate, cmd_pretrain, cmd_search};
use ptransfer_cli::report::cmd_report;
use ptransfer_cli::{CliError, CliResult, RunConfig};

/// Partial transfer for few-shot learning: search which backbone layers to
/// fine-tune, and at which learning rate.
#[derive(Debug, Parser)]
#[command(name = "ptransfer", version)]
struct Cli {
    /// Log debug output.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Threads for parallel episode and fitness evaluation.
    #[arg(long, global = true, value_name = "INT")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Parent directory for the run directory; defaults to the config's out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train the backbone on the base classes.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Search per-layer learning-rate schemes on validation episodes.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Reuse fitness values from an interrupted run's trace.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a scheme on novel-class episodes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// `fixed`, `uniform`, `manual`, or a scheme file.
        #[arg(long, value_name = "PATH|fixed|uniform|manual")]
        scheme: String,
    },
    /// Tabulate every report and trace under a directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    let workers = cli.workers.unwrap_or(1);
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Pretrain { common } => {
            let (cfg, out) = load(&common)?;
            let o = cmd_pretrain(&cfg, &out)?;
            println!(
                "checkpoint {} ({})",
                o.checkpoint.display(),
                o.checkpoint_hash
            );
            Ok(())
        }
        Command::Search {
            common,
            checkpoint,
            resume,
        } => {
            let (cfg, out) = load(&common)?;
            let o = cmd_search(&cfg, &checkpoint, &out, workers > 1, resume.as_deref())?;
            println!(
                "best {} fitness {:.4} (frozen {:.4}) in {}",
                o.best.scheme,
                o.best.fitness,
                o.frozen_fitness,
                o.dir.display()
            );
            Ok(())
        }
        Command::Evaluate {
            common,
            checkpoint,
            scheme,
        } => {
            let (cfg, out) = load(&common)?;
            let o = cmd_evaluate(&cfg, &checkpoint, &scheme, &out)?;
            println!(
                "{} {} {} in {}",
                o.record.label,
                o.record.report.scheme,
                o.record.formatted,
                o.dir.display()
            );
            Ok(())
        }
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.clone());
            let (run, summary) = cmd_report(&dir, &out)?;
            print!("{}", summary.table);
            println!("written to {}", run.display());
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose {
        tracing::Level::DEBUG
    } else {
        tracing::Level::INFO
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
