//! Command-line front end: dataset generation, training, evaluation,
//! ablations, plotting, and self-verification.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modnet_core::data::{build_dataset, format};
use modnet_harness::config::RunConfig;
use modnet_harness::{driver, presets, verify};

#[derive(Parser)]
#[command(name = "modnet", about = "Neural module network training over the synthetic grid VQA benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write it as a binary file.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of training questions with ground-truth programs.
        #[arg(long, default_value_t = 135)]
        n_supervised: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSONL mirror for inspection.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val_iid")]
        split: String,
    },
    /// Run a named ablation preset over multiple seeds.
    Ablate {
        /// Preset name, or `list` to print the available names.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value = "ablations")]
        out_dir: PathBuf,
        /// Seeds to run; three by default.
        #[arg(long, num_args = 1.., default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Render learning curves from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, executor, and numeric self-check suites.
    Verify,
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::GenData { seed, n_supervised, out, jsonl } => {
            let ds = build_dataset(seed, n_supervised).map_err(|e| e.to_string())?;
            format::write_binary(&ds, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} examples / {} questions to {}",
                ds.examples.len(),
                ds.questions.len(),
                out.display()
            );
            if let Some(j) = jsonl {
                format::write_jsonl(&ds, &j).map_err(|e| e.to_string())?;
                println!("wrote JSONL mirror to {}", j.display());
            }
            Ok(())
        }
        Command::Train { config, out_dir } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| format!("{}: {e}", config.display()))?;
            let cfg = RunConfig::parse(&text).map_err(|e| e.to_string())?;
            print!("{}", cfg.echo());
            let summary = driver::run_one(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!(
                "best step {} val_iid {:.4} val_ood {:.4} ({} evaluations)",
                summary.best_step, summary.best_val_iid, summary.best_val_ood, summary.rows
            );
            Ok(())
        }
        Command::Eval { checkpoint, split } => {
            let (task, prog) = driver::eval_checkpoint(&checkpoint, &split).map_err(|e| e.to_string())?;
            println!("{split}: task_accuracy {task:.4} program_accuracy {prog:.4}");
            Ok(())
        }
        Command::Ablate { preset, out_dir, seeds } => {
            if preset == "list" {
                for name in presets::preset_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let cfg = presets::preset(&preset)
                .ok_or_else(|| format!("unknown preset {preset:?}; try --preset list"))?;
            driver::run_seeds(&cfg, &seeds, &out_dir.join(&preset)).map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Plot { metrics, out } => {
            driver::replot(&metrics, &out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Verify => {
            let results = verify::run_all();
            let mut failed = 0;
            for r in &results {
                println!("{}: {} ({})", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                Err(format!("{failed} suite(s) failed"))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
