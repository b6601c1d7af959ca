//! `sbnn` command-line front end: train → export → infer → bench → hist.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbnn::bench::{default_reference_lines, BenchConfig, MIN_TRIALS, MIN_WARMUP};
use sbnn::cmd::{cmd_bench, cmd_export, cmd_hist, cmd_infer, cmd_train, OUT_DIR_ENV};
use sbnn::config::RunConfig;
use sbnn::data::{parse_dims, DatasetSpec};
use sbnn::selfbin::hist::DEFAULT_BINS;
use sbnn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sbnn",
    version,
    about = "Self-binarizing networks: train, freeze and run binary models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Freeze a checkpoint into a binary model file.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fold the per-layer scale alpha into the thresholds.
        #[arg(long)]
        alpha: bool,
    },
    /// Run a frozen model on a dataset and write predictions.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Dataset spec, e.g. `mnist-test:DIR` or `blobs:seed=7,n=1000`.
        #[arg(long)]
        data: DatasetSpec,
        /// Only score the trailing fraction of records (the training validation split).
        #[arg(long)]
        val_fraction: Option<f64>,
        /// Predictions CSV (default: `<out dir>/predictions.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time BN, SBN and BinaryBN on random feature maps.
    Bench {
        #[arg(long, default_value = "16x256x256")]
        dims: String,
        #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
        batches: Vec<usize>,
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Weight histograms (pre/post binarization) from checkpoints.
    Hist {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Histogram CSV (default: `<out dir>/hist.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Output directory: the environment override if set, else `fallback`.
fn out_dir(fallback: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = RunConfig::parse(&text)?;
            let dir = out_dir(&cfg.output_dir);
            let report = cmd_train(&cfg, &dir)?;
            let s = &report.summary;
            println!(
                "trained {} epochs (nu={}), train_acc={:.4}, val_acc={}, frozen_val_acc={}, artifacts in {}",
                s.epochs,
                s.final_nu,
                s.final_train_acc,
                fmt_opt(s.val_acc),
                fmt_opt(s.frozen_val_acc),
                dir.display()
            );
        }
        Command::Export { checkpoint, out, alpha } => {
            let model = cmd_export(&checkpoint, &out, alpha)?;
            println!("exported {} layers to {}", model.layers.len(), out.display());
        }
        Command::Infer {
            model,
            data,
            val_fraction,
            out,
        } => {
            let out = out.unwrap_or_else(|| out_dir(Path::new(".")).join("predictions.csv"));
            let report = cmd_infer(&model, &data, val_fraction, &out)?;
            println!(
                "accuracy={:.6} on {} records, predictions in {}",
                report.accuracy,
                report.records,
                out.display()
            );
        }
        Command::Bench {
            dims,
            batches,
            trials,
            warmup,
            seed,
        } => {
            if trials < MIN_TRIALS || warmup < MIN_WARMUP {
                return Err(Error::Config(format!(
                    "bench needs at least {MIN_TRIALS} trials and {MIN_WARMUP} warm-up runs"
                )));
            }
            let dims = parse_dims(&dims)?;
            let dir = out_dir(Path::new("."));
            let cfg = BenchConfig { trials, warmup, seed };
            let results = cmd_bench(dims, &batches, &cfg, default_reference_lines(), &dir)?;
            for r in &results {
                println!(
                    "{:<10} batch={:<4} median={:>12.0}ns iqr={:>10.0}ns output={}B",
                    r.variant.name(),
                    r.batch,
                    r.median_ns,
                    r.iqr_ns,
                    r.output_bytes
                );
            }
            println!("wrote {}", dir.join("bench.csv").display());
        }
        Command::Hist { checkpoints, bins, out } => {
            let out = out.unwrap_or_else(|| out_dir(Path::new(".")).join("hist.csv"));
            let records = cmd_hist(&checkpoints, bins, &out)?;
            println!("wrote {} histograms to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
