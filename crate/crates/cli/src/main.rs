use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use reattn_cli::gradsuite::{run_suite, Suite, TOLERANCE};
use reattn_cli::{analyze, format_table, load_configs, param_rows, run_experiment, thread_budget, AnalyzeOptions, ExperimentSpec};
use reattn_core::diagnostics::Thresholds;
use reattn_core::numerics::Precision;

#[derive(Parser)]
#[command(name = "reattn", version, about = "Train and inspect re-attention vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of an experiment spec.
    Train {
        spec: PathBuf,
        /// Concurrent sweep entries; overrides REATTN_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Similarity diagnostics of a checkpoint on a probe set.
    Analyze {
        checkpoint: PathBuf,
        /// CIFAR-10 binary file or directory, or a synthetic-data JSON file.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        /// Also write raw attention maps per batch.
        #[arg(long)]
        export_maps: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.5)]
        vector_threshold: f64,
        #[arg(long, default_value_t = 0.8)]
        block_threshold: f64,
        #[arg(long, default_value_t = 0.9)]
        unique_threshold: f64,
        /// Trailing moving-average window over adjacent ratios.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, value_parser = parse_precision, default_value = "double")]
        precision: Precision,
    },
    /// Parameter counts of model configs.
    Params {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        #[arg(long, value_enum)]
        module: Option<Suite>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "single" => Ok(Precision::Single),
        "double" => Ok(Precision::Double),
        _ => Err(format!("expected single or double, got {s}")),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { spec, threads } => {
            let spec = ExperimentSpec::load(&spec)?;
            for s in run_experiment(&spec, threads.unwrap_or_else(thread_budget))? {
                let acc = s.last.as_ref().map(|r| format!("{:.4}", r.eval_acc)).unwrap_or_else(|| "-".into());
                println!("{}  seed={} epochs={} eval_acc={acc}", s.dir.display(), s.seed, s.epochs);
            }
        }
        Command::Analyze {
            checkpoint,
            probe,
            limit,
            export_maps,
            out,
            batch_size,
            vector_threshold,
            block_threshold,
            unique_threshold,
            window,
            precision,
        } => {
            let opts = AnalyzeOptions {
                probe,
                limit,
                thresholds: Thresholds { vector_threshold, block_threshold, unique_threshold },
                window,
                export_maps,
                batch_size,
                precision,
                out,
            };
            let (report, dir) = analyze(&checkpoint, &opts)?;
            println!(
                "{}  blocks={} samples={} similar_blocks={} mean_adj_ratio={:.4}",
                dir.display(),
                report.num_blocks,
                report.num_samples,
                report.similar_block_count,
                report.mean_adjacent_ratio()
            );
        }
        Command::Params { configs, json } => {
            let mut all = Vec::new();
            for path in &configs {
                all.extend(load_configs(path)?);
            }
            let rows = param_rows(&all);
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_table(&rows));
            }
        }
        Command::Gradcheck { module } => {
            let suites = match module {
                Some(m) => vec![m],
                None => vec![Suite::Attention, Suite::Model, Suite::Loss],
            };
            let mut failed = 0;
            for s in suites {
                for c in run_suite(s)? {
                    println!(
                        "{:<4} {:<10} {:<32} max_rel_err={:.3e}",
                        if c.passed { "ok" } else { "FAIL" },
                        c.suite,
                        c.name,
                        c.max_rel_error
                    );
                    failed += usize::from(!c.passed);
                }
            }
            if failed > 0 {
                eprintln!("{failed} gradient check(s) above tolerance {TOLERANCE:e}");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
