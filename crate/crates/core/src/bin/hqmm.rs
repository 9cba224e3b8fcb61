use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hse_hqmm::commands::{cmd_bench, cmd_evaluate, cmd_filter, cmd_heatmap, cmd_train, TrainOptions};
use hse_hqmm::data::{gen_synthetic, hmm_to_text, load_csv, save_csv, Split, SyntheticKind};
use hse_hqmm::harness::{bench_csv, parse_grid};
use hse_hqmm::io::{load_config, load_model, save_model};
use hse_hqmm::model::{HqmmConfig, Mode};
use hse_hqmm::{Error, Result};

#[derive(Parser)]
#[command(name = "hqmm", version, about = "Train and evaluate HSE-HQMM sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: hmm:STATES,SYMBOLS,T | oscillator:DIM,T,NOISE | bimodal:T, optional xN sequences
    Gen {
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a held-out split here (the last 20% of sequences, or of time)
        #[arg(long)]
        test_out: Option<PathBuf>,
        /// Write the generating HMM parameters here
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Two-stage regression, then BPTT refinement
    Train {
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        no_bptt: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// MSE at a horizon, per-step curve, baseline and perplexity
    Evaluate {
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        /// Report path; the per-step curve goes to the same path with `.curve.csv` appended
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step densities and one-step predictions
    Filter {
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Marginal density grid of one feature over the first sequence
    Heatmap {
        model: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        feature: usize,
        #[arg(long, default_value = "-2:2:41", allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time NW against kernel Bayes rule conditioning
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            kind,
            seed,
            out,
            test_out,
            params_out,
        } => {
            let kind: SyntheticKind = kind.parse()?;
            let generated = gen_synthetic(&kind, seed)?;
            match test_out {
                Some(test_path) => {
                    let ds = generated.dataset.with_test_fraction(0.2)?;
                    save_csv(&ds.subset(Split::Train)?, &out)?;
                    save_csv(&ds.subset(Split::Test)?, &test_path)?;
                }
                None => save_csv(&generated.dataset, &out)?,
            }
            if let (Some(p), Some(hmm)) = (params_out, &generated.hmm) {
                std::fs::write(p, hmm_to_text(hmm))?;
            }
        }
        Command::Train {
            data,
            config,
            seed,
            mode,
            no_bptt,
            out,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => HqmmConfig::default(),
            };
            let ds = load_csv(&data)?;
            let outcome = cmd_train(&ds, &cfg, &TrainOptions { seed, mode, no_bptt })?;
            if let Some(r) = &outcome.refinement {
                for (i, l) in r.epoch_losses.iter().enumerate() {
                    eprintln!("epoch {} loss {l:.6}", i + 1);
                }
            }
            if let Some(why) = &outcome.skipped {
                eprintln!("note: {why}; model saved as 2sr-only");
            }
            save_model(&outcome.model, &out)?;
        }
        Command::Evaluate {
            model,
            data,
            horizon,
            out,
        } => {
            let m = load_model(&model)?;
            let report = cmd_evaluate(&m, &load_csv(&data)?, horizon)?;
            eprint!("{}", report.timings_text());
            emit(out.as_deref(), &report.to_text())?;
            if let Some(p) = out {
                let mut curve = p.into_os_string();
                curve.push(".curve.csv");
                std::fs::write(curve, report.curve_csv())?;
            }
        }
        Command::Filter { model, data, out } => {
            let m = load_model(&model)?;
            emit(out.as_deref(), &cmd_filter(&m, &load_csv(&data)?)?)?;
        }
        Command::Heatmap {
            model,
            data,
            feature,
            grid,
            seed,
            out,
        } => {
            let m = load_model(&model)?;
            let h = cmd_heatmap(&m, &load_csv(&data)?, feature, &parse_grid(&grid)?, seed)?;
            emit(out.as_deref(), &h.to_csv())?;
        }
        Command::Bench { sizes, seed, out } => {
            emit(out.as_deref(), &bench_csv(&cmd_bench(&sizes, seed)?))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
