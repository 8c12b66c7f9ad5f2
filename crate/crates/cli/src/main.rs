use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use freqlab::analysis::{
    ablate, activation_norms, gradcheck_groups, params_for_config, Stage, Variant, Which,
};
use freqlab::train::config::RunConfig;
use freqlab::train::data::sample_tokens;
use freqlab::train::{load_model, run_training};
use freqlab::Error;

#[derive(Parser)]
#[command(name = "freqlab", version, about = "Low-frequency Q/K adapter lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Q,
    K,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pre,
    Post,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the base, then fine-tune the adapter; writes the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-head / per-dimension Q or K activation magnitudes as CSV.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "q")]
        which: WhichArg,
        #[arg(long, value_enum, default_value = "pre")]
        stage: StageArg,
    },
    /// Total, attached and actively updated parameter counts.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the 64-bit gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Run one ablation variant, or `all`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
    },
}

/// Validation failures exit with 1, I/O failures with 2.
enum Failure {
    Invalid(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            e => Failure::Invalid(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("I/O error on {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { config } => {
            let report = run_training(&config)?;
            println!("run directory: {}", report.out_dir.display());
            print!("{}", report.summary());
        }
        Cmd::Analyze { ckpt, sample, out, which, stage } => {
            let (model, cfg) = load_model::<f32>(&ckpt)?;
            let text = std::fs::read_to_string(&sample).map_err(|e| io_err(&sample, e))?;
            let tokens = sample_tokens(&text, cfg.model.vocab)?;
            let which = match which {
                WhichArg::Q => Which::Q,
                WhichArg::K => Which::K,
            };
            let stage = match stage {
                StageArg::Pre => Stage::Pre,
                StageArg::Post => Stage::Post,
            };
            let table = activation_norms(&model, &tokens, which, stage)?;
            std::fs::write(&out, table.to_csv()).map_err(|e| io_err(&out, e))?;
            println!("wrote {} rows to {}", table.rows.len(), out.display());
        }
        Cmd::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", params_for_config(&cfg)?);
        }
        Cmd::Gradcheck { config, tol } => {
            let cfg = RunConfig::load(&config)?;
            let seq = cfg.train.seq_len.min(16);
            let mut worst: f64 = 0.0;
            for g in gradcheck_groups(&cfg, 2, seq)? {
                println!("{:<13} entries={:<6} max_rel_err={:.3e}", g.group, g.entries, g.max_rel_err);
                worst = worst.max(g.max_rel_err);
            }
            if worst > tol {
                return Err(Failure::Invalid(format!("max relative error {worst:.3e} exceeds {tol:.1e}")));
            }
            println!("PASS (tolerance {tol:.1e})");
        }
        Cmd::Ablate { config, variant } => {
            let cfg = RunConfig::load(&config)?;
            let variants = if variant == "all" {
                Variant::ALL.to_vec()
            } else {
                vec![Variant::parse(&variant).ok_or_else(|| {
                    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                    Failure::Invalid(format!("unknown variant {variant:?}; expected all, {}", names.join(", ")))
                })?]
            };
            for r in ablate(&cfg, &variants)? {
                println!(
                    "{:<13} trainable={:<7} fraction={:.3}% final_loss={:.4} answer_acc {:.3} -> {:.3}",
                    r.variant.name(),
                    r.report.params.attached,
                    r.report.params.fraction_pct(),
                    r.report.final_loss,
                    r.report.base_eval.answer_accuracy,
                    r.report.final_eval.answer_accuracy
                );
            }
            println!("tables: {}", cfg.train.out_dir.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
