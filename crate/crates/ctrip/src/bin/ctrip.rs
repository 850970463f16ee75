//! Thin command-line front end over the library pipeline. Each major
//! capability also has a runnable example under `examples/`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctrip::data_model::Modality;
use ctrip::pipeline::{run_gen_data, set_threads, Experiment, ExperimentConfig, Variant};

#[derive(Parser)]
#[command(
    name = "ctrip",
    about = "Tri-modal contrastive pipeline: masked pretraining, localizer-centric alignment, phenotype regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; overrides the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base preset when no config file is given: desk | reference
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Experiment variant: CMR_sup, L_sup, E_sup, T_sup, L+T, L+E, L+E+Tp, C-TRIP
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Run seed (propagated to every stage)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cohort directory
    #[arg(long, global = true, default_value = "data/cohort")]
    data: PathBuf,

    /// Run directory for all artifacts; defaults to runs/<timestamp>_<variant>
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Single-threaded kernels plus fixed seeds
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the invoked stage's epoch count
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Override the invoked stage's batch size
    #[arg(long, global = true)]
    bs: Option<usize>,

    /// Override the invoked stage's learning rate
    #[arg(long, global = true)]
    lr: Option<f64>,

    #[arg(long, global = true)]
    tau_le: Option<f64>,

    #[arg(long, global = true)]
    tau_lt: Option<f64>,

    #[arg(long, global = true)]
    mask_ratio: Option<f64>,

    /// Stage II: train projections and temperatures only
    #[arg(long, global = true)]
    freeze_encoders: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired cohort
    GenData {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Stage I: masked pretraining for one modality (L, E or T)
    Pretrain {
        #[arg(long)]
        modality: String,
    },
    /// Stage II: contrastive alignment (multi-modal variants only)
    Align,
    /// Stage III: regression fine-tuning at a training fraction
    Finetune {
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Agreement report (MD, LoA, Pearson R with bootstrap CIs) on the test split
    Evaluate {
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Fine-tuning-fraction scaling table
    Scaling {
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.10, 1.00])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Attention-map PNGs for validation subjects
    Attention {
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Embedding table export (tag: pre | post)
    Embed {
        #[arg(long)]
        tag: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> ctrip::Result<()> {
    if cli.deterministic {
        set_threads(1);
    }

    if let Command::GenData { n, seed } = &cli.command {
        let count = run_gen_data(*n, *seed, &cli.data)?;
        println!("generated {count} subjects under {}", cli.data.display());
        return Ok(());
    }

    let variant = match &cli.variant {
        Some(v) => Variant::parse(v)?,
        None => Variant::CTrip,
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_toml(path)?,
        None => match cli.preset.as_str() {
            "desk" => ExperimentConfig::desk(variant),
            "reference" => ExperimentConfig::reference(variant),
            other => {
                return Err(ctrip::Error::Config(format!(
                    "unknown preset {other:?}; expected desk or reference"
                )))
            }
        },
    };
    if cli.variant.is_some() || cli.config.is_none() {
        cfg.variant = variant;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= cli.deterministic;
    if let Some(ratio) = cli.mask_ratio {
        cfg.model.mask_ratio = ratio;
    }
    if let Some(tau) = cli.tau_le {
        cfg.stage2.tau_le_init = tau;
    }
    if let Some(tau) = cli.tau_lt {
        cfg.stage2.tau_lt_init = tau;
    }
    cfg.stage2.freeze_encoders |= cli.freeze_encoders;
    match &cli.command {
        Command::Pretrain { .. } => {
            if let Some(e) = cli.epochs {
                cfg.stage1.epochs = e;
            }
            if let Some(b) = cli.bs {
                cfg.stage1.batch_size = b;
            }
            if let Some(lr) = cli.lr {
                cfg.stage1.lr = lr;
            }
        }
        Command::Align => {
            if let Some(e) = cli.epochs {
                cfg.stage2.epochs = e;
            }
            if let Some(b) = cli.bs {
                cfg.stage2.batch_size = b;
            }
            if let Some(lr) = cli.lr {
                cfg.stage2.lr = lr;
            }
        }
        _ => {
            if let Some(e) = cli.epochs {
                cfg.stage3.epochs = e;
            }
            if let Some(b) = cli.bs {
                cfg.stage3.batch_size = b;
            }
            if let Some(lr) = cli.lr {
                cfg.stage3.lr_head = lr;
            }
        }
    }

    let run_dir = cli.run_dir.clone().unwrap_or_else(|| {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("{ts}_{}", cfg.variant))
    });
    let exp = Experiment::new(cfg, &cli.data, &run_dir)?;

    match cli.command {
        Command::GenData { .. } => unreachable!("handled above"),
        Command::Pretrain { modality } => {
            let modality = parse_modality(&modality)?;
            let report = exp.run_pretrain(modality)?;
            println!(
                "stage1 {} done: initial loss {:.4}, final train {:.4}, best val {:.4} (epoch {})",
                modality.code(),
                report.initial_train_loss,
                report.final_train_loss,
                report.best_val_loss,
                report.best_epoch
            );
        }
        Command::Align => {
            let report = exp.run_align()?;
            let last = report.curve.last();
            println!(
                "stage2 done: final loss {:.4}, pos/neg sim LE {:.3}/{:.3}, LT {:.3}/{:.3}",
                last.map_or(f64::NAN, |p| p.total_loss),
                report.val_pos_sim_le,
                report.val_neg_sim_le,
                report.val_pos_sim_lt,
                report.val_neg_sim_lt
            );
        }
        Command::Finetune { fraction } => {
            let report = exp.run_finetune(fraction)?;
            println!(
                "stage3 done at fraction {fraction}: best val loss {:.4} (epoch {}, {} subjects)",
                report.best_val_loss,
                report.best_epoch,
                report.subset_ids.len()
            );
        }
        Command::Evaluate { fraction } => {
            let report = exp.run_evaluate(fraction)?;
            for (variant, phenos) in &report.variants {
                for (name, stats) in phenos {
                    println!(
                        "{variant} {name}: MD {:+.3} LoA [{:.3}, {:.3}] R {:.3}",
                        stats.md.value, stats.loa_low.value, stats.loa_high.value,
                        stats.pearson_r.value
                    );
                }
            }
        }
        Command::Scaling { fractions, seeds } => {
            let rows = exp.run_scaling(&fractions, &seeds)?;
            println!("scaling table written ({} rows)", rows.len());
        }
        Command::Attention { fraction, count } => {
            let paths = exp.run_attention(fraction, count)?;
            println!("wrote {} attention maps", paths.len());
        }
        Command::Embed { tag } => {
            let path = exp.run_embed(&tag)?;
            println!("embeddings written to {}", path.display());
        }
    }
    println!("artifacts under {}", run_dir.display());
    Ok(())
}

fn parse_modality(s: &str) -> ctrip::Result<Modality> {
    match s.trim().to_ascii_uppercase().as_str() {
        "L" | "LOCALIZER" => Ok(Modality::Localizer),
        "E" | "ECG" => Ok(Modality::Ecg),
        "T" | "TABULAR" => Ok(Modality::Tabular),
        other => Err(ctrip::Error::Config(format!(
            "unknown modality {other:?}; expected L, E or T"
        ))),
    }
}
