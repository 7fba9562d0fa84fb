use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmrl_core::harness::{cmd_ablate, cmd_eval, cmd_generate, cmd_train, RunConfig};
use lmrl_core::{LmrlError, Result};

/// Repetition counting on synthetic embedding sequences.
#[derive(Parser, Debug)]
#[command(name = "lmrl", version)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test splits and a manifest.
    Generate,
    /// Train a model and write checkpoints plus a log.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-video density, foreground and similarity CSVs.
        #[arg(long)]
        dump: bool,
    },
    /// Run one ablation suite: integration, losses or similarity.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate => {
            if let Some(out) = cli.out {
                cfg.data_dir = out;
            }
            let manifest = cmd_generate(&cfg)?;
            let sizes: Vec<String> = manifest
                .splits
                .iter()
                .map(|(k, v)| format!("{k}={}", v.len()))
                .collect();
            println!("wrote {} ({})", cfg.data_dir.display(), sizes.join(", "));
        }
        Command::Train { data } => {
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            if let Some(w) = cfg.rfl.receptive_field_warning(cfg.gen.seq_len) {
                eprintln!("warning: {w}");
            }
            let outcome = cmd_train(&cfg)?;
            for r in &outcome.log {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val_mae {:.4}  val_obo {:.3}",
                    r.epoch, r.train_loss, r.val_mae, r.val_obo
                );
            }
            println!(
                "best epoch {} written to {}",
                outcome.best.epoch,
                cfg.out_dir.join("best.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            dump,
        } => {
            let data = data.unwrap_or(cfg.data_dir);
            let out = cli.out.unwrap_or(cfg.out_dir);
            let report = cmd_eval(&checkpoint, &data, &split, &out, dump)?;
            println!("{}", report.to_json());
        }
        Command::Ablate { suite, data } => {
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            let rows = cmd_ablate(&cfg, &suite)?;
            for r in rows {
                println!(
                    "{:<12} mae {:.4}  obo {:.3}  acc {:.1}",
                    r.variant, r.report.mae, r.report.obo, r.report.frame_acc
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            report(&LmrlError::Usage(
                msg.lines()
                    .next()
                    .unwrap_or("")
                    .trim_start_matches("error: ")
                    .to_string(),
            ));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

fn report(e: &LmrlError) {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
}
