use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pico_icl::runner::{self, ExperimentConfig, RunError, Strategy};

const EXIT_USAGE: u8 = 1;
const EXIT_GATEWAY: u8 = 3;

/// In-context PICO extraction: convert corpora, index demonstrations,
/// extract, evaluate and run shot-count ablations.
#[derive(Debug, Parser)]
#[command(name = "pico-icl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the instruction dataset and canonical corpus records.
    Convert {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Build the demonstration index over the training split.
    Index {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Run extraction over the test split and score it.
    Extract {
        #[arg(long, short)]
        config: PathBuf,
        /// Answer only from the response cache.
        #[arg(long)]
        offline: bool,
    },
    /// Score a predictions file against the test split.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, short)]
        predictions: PathBuf,
        /// Report directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract and score once per (strategy, k) cell.
    Ablate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,5,9")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "knn,random")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        offline: bool,
    },
}

fn run(cli: Cli) -> Result<u8, RunError> {
    match cli.command {
        Command::Convert { config } => {
            let s = runner::cmd_convert(&ExperimentConfig::load(&config)?)?;
            println!("wrote {} records to {}", s.records, s.dataset_path.display());
            for (label, n) in &s.record_spans {
                println!("  {label}: {n} spans");
            }
            if s.repairs > 0 {
                println!("  repaired {} malformed I- tags", s.repairs);
            }
            if !s.audit_findings.is_empty() {
                println!("  {} sentences fail the alignment audit (see convert_stats.json)", s.audit_findings.len());
            }
            Ok(0)
        }
        Command::Index { config } => {
            let s = runner::cmd_index(&ExperimentConfig::load(&config)?)?;
            println!(
                "indexed {} demonstrations ({} layers) into {}",
                s.stats.nodes,
                s.stats.layers,
                s.index_path.display()
            );
            Ok(0)
        }
        Command::Extract { config, offline } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.gateway.offline |= offline;
            let s = runner::cmd_extract(&cfg)?;
            print!("{}", s.report.to_table());
            println!(
                "backend calls {}, cache hits {}, error rows {}",
                s.gateway.backend_calls, s.gateway.cache_hits, s.error_rows
            );
            Ok(if s.error_rows > 0 { EXIT_GATEWAY } else { 0 })
        }
        Command::Eval { config, predictions, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = runner::cmd_eval(&cfg, &predictions, &out)?;
            print!("{}", report.to_table());
            Ok(0)
        }
        Command::Ablate { config, k, strategies, offline } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.gateway.offline |= offline;
            let rows = runner::cmd_ablate(&cfg, &k, &strategies, None)?;
            println!("strategy   k  macro_f1");
            for r in &rows {
                println!("{:<9} {:>2}  {:.4}", r.strategy.name(), r.k, r.macro_f1);
            }
            Ok(if rows.iter().any(|r| r.error_rows > 0) { EXIT_GATEWAY } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
