use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bitbudget::alloc::round_allocation;
use bitbudget::bitgemm::{bench_gemm, kernel_name, write_bench_csv};
use bitbudget::config::allocation_string;
use bitbudget::quant::levels;
use bitbudget::summary::{summarize, write_table, RunSummary};
use bitbudget::train::{run_experiment, summary_line};
use bitbudget::{BitWidth, ExperimentConfig, GumbelAllocator};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bitbudget",
    version,
    about = "Learned per-layer bit budgets for quantized CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one experiment and write metrics.csv, summary.csv and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time bit-plane GEMMs against the fp32 baseline and write CSV.
    BenchGemm {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048")]
        sizes: Vec<usize>,
        /// Bit pairs as MxK, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_pair, default_value = "1x1,2x2,4x4,8x8")]
        bits: Vec<(u32, u32)>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print every output level of the quantizer at width k.
    QuantizeDemo {
        #[arg(long)]
        k: f64,
    },
    /// Estimate the expected and hard allocation for fixed logits.
    AllocateSim {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        logits: Vec<f64>,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        budget: u32,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate the four MNIST IDX files in a directory.
    MnistCheck {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Aggregate run summaries (files or run directories) into a results table.
    Summarize {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (m, k) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxK, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad bit count in {s:?}"));
    Ok((p(m)?, p(k)?))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Four decimals without trailing zeros.
fn trim(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn fmt_levels(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let report = run_experiment(&cfg)?;
            println!("{}", summary_line(&cfg, &report));
        }
        Command::BenchGemm {
            sizes,
            bits,
            repeats,
            seed,
            out,
        } => {
            eprintln!("popcount kernel: {}", kernel_name());
            let rows = bench_gemm(&sizes, &bits, repeats, seed)?;
            write_bench_csv(&rows, output(out.as_deref())?)?;
        }
        Command::QuantizeDemo { k } => {
            for v in levels(BitWidth::new(k)?) {
                println!("{}", trim(v));
            }
        }
        Command::AllocateSim {
            logits,
            tau,
            budget,
            trials,
            seed,
        } => {
            if logits.is_empty() {
                bail!("--logits needs at least one value");
            }
            let mut alloc = GumbelAllocator::new(logits.len(), budget, seed)?;
            alloc.set_logits(&logits)?;
            alloc.set_temperature(tau)?;
            let expected = alloc.expected_allocation(trials)?;
            let hard = round_allocation(&expected, budget)?;
            println!("fractional: {}", fmt_levels(&expected));
            println!(
                "hard: {}",
                hard.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
            );
        }
        Command::MnistCheck { dir } => {
            let (train, test) = bitbudget::data::check_dir(&dir)?;
            println!("{}: train {train} images, test {test} images", dir.display());
        }
        Command::Summarize { runs, out } => {
            let mut all = Vec::new();
            for p in runs {
                let file = if p.is_dir() { p.join("summary.csv") } else { p };
                all.extend(RunSummary::load(&file).with_context(|| format!("reading {}", file.display()))?);
            }
            let arms = summarize(&all)?;
            write_table(&arms, output(out.as_deref())?)?;
            for a in &arms {
                eprintln!(
                    "{}  {}  {:.2}% +- {:.2}  {}",
                    a.network,
                    a.label,
                    100.0 * a.mean_error,
                    100.0 * a.std_error,
                    allocation_string(&a.allocation)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
