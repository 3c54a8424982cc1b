use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptlex::OrderMode;

mod commands;
mod config;
mod report;

/// Optimize, evaluate, and inspect prompt task descriptions.
#[derive(Parser)]
#[command(name = "promptlex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the greedy word-substitution search and write trace, template and summary.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Proxy-batch seed (first seed with --seeds).
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds and report mean/stddev.
        #[arg(long)]
        seeds: Option<u64>,
        /// Position order: influence or random.
        #[arg(long)]
        order: Option<OrderMode>,
        /// Fill-mask candidates per position.
        #[arg(long)]
        k: Option<usize>,
        /// Share of positions to optimize, in (0, 1].
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        reference_size: Option<usize>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Score a template on the evaluation pool.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Template file; defaults to the configured one.
        #[arg(long)]
        template: Option<PathBuf>,
        /// Score on the proxy pool instead.
        #[arg(long)]
        proxy: bool,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Rank description words by deletion influence on the proxy batch.
    Influence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Score every single-word substitution of the description; CSV output.
    Neighborhood {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Render a trace file as a readable summary.
    Report { trace: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Optimize {
            config,
            seed,
            seeds,
            order,
            k,
            fraction,
            reference_size,
            run_dir,
        } => commands::optimize(commands::OptimizeArgs {
            config,
            seed,
            seeds,
            order,
            k,
            fraction,
            reference_size,
            run_dir,
        }),
        Command::Evaluate {
            config,
            template,
            proxy,
            run_dir,
        } => commands::evaluate(&config, template.as_deref(), proxy, run_dir),
        Command::Influence {
            config,
            template,
            seed,
            run_dir,
        } => commands::influence(&config, template.as_deref(), seed, run_dir),
        Command::Neighborhood {
            config,
            template,
            k,
            seed,
            out,
            run_dir,
        } => commands::neighborhood_csv(&config, template.as_deref(), k, seed, out.as_deref(), run_dir),
        Command::Report { trace } => commands::report(&trace),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PROMPTLEX_LOG")
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
