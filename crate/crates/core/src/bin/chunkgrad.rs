//! Command-line entry point.

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chunkgrad::chunkwise::TrainMode;
use chunkgrad::cli::{self, BiasArgs, ConfigArgs};
use chunkgrad::error::Result;

#[derive(Parser)]
#[command(
    name = "chunkgrad",
    about = "Chunk-wise transformer training with exact and sparse compensated backpropagation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare chunk-wise gradients against the naive full-graph reference.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train in naive, seco, or spaco mode; emits per-update CSV and a final
    /// checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Memory/FLOP scaling table across sequence lengths.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        seq_lens: Vec<usize>,
        /// Comma-separated modes to benchmark.
        #[arg(long, value_delimiter = ',', default_value = "naive,seco,spaco")]
        modes: Vec<TrainMode>,
    },
    /// Sparse-gradient bias report on the linear-recurrence oracle.
    Bias {
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        /// Relay-scaler cap; omit for min(k/t, 2) semantics, use --no-cap to
        /// disable.
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        no_cap: bool,
        /// Enumerate all C(k, t) subsets exactly.
        #[arg(long)]
        exhaustive: bool,
        /// Monte Carlo trials when not exhaustive.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Run Monte Carlo trials across this many threads.
        #[arg(long, default_value_t = 1)]
        parallel_trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_csv: Option<String>,
    },
    /// Path-count and survival-probability tables for cache-chain analysis.
    Paths {
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        #[arg(long)]
        out_csv: Option<String>,
    },
}

fn sink(path: &Option<String>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gradcheck { config } => {
            let cfg = config.resolve()?;
            let mut out = sink(&cfg.out_csv)?;
            let outcome = cli::cmd_gradcheck(&cfg, &mut out)?;
            Ok(outcome.pass)
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            let mut out = sink(&cfg.out_csv)?;
            cli::cmd_train(&cfg, &mut out)?;
            Ok(true)
        }
        Command::Bench { config, seq_lens, modes } => {
            let mut cfg = config.resolve()?;
            if let Some(&max_seq) = seq_lens.iter().max() {
                cfg.max_position = cfg.max_position.max(max_seq);
            }
            let mut out = sink(&cfg.out_csv)?;
            cli::cmd_bench(&cfg, &modes, &seq_lens, &mut out)?;
            Ok(true)
        }
        Command::Bias {
            k,
            t,
            cap,
            no_cap,
            exhaustive,
            trials,
            parallel_trials,
            seed,
            out_csv,
        } => {
            let resolved_seed = seed
                .or_else(|| std::env::var(cli::SEED_ENV).ok().and_then(|v| v.parse().ok()))
                .unwrap_or(42);
            let args = BiasArgs {
                k,
                t,
                cap: if no_cap { None } else { cap },
                exhaustive,
                trials,
                parallel_trials,
                seed: resolved_seed,
                ..BiasArgs::default()
            };
            let mut out = sink(&out_csv)?;
            cli::cmd_bias(&args, &mut out)?;
            Ok(true)
        }
        Command::Paths { n_max, out_csv } => {
            let mut out = sink(&out_csv)?;
            cli::cmd_paths(n_max, &mut out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(chunkgrad::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
