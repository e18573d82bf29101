//! `gcnspline`: dataset generation, training, reconstruction, baseline
//! fitting and evaluation from the command line.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for runtime failures; every failure prints one diagnostic line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use gcnspline_core::config::KeyValues;
use gcnspline_core::dataset::{generate_dataset, load_dataset, read_manifest, GenConfig};
use gcnspline_core::model::ArchConfig;
use gcnspline_core::pipeline::{
    evaluate, export_obj, lattice_obj, load_xyz, reconstruct, run_bsa, save_xyz, BsaRunConfig,
    EvalConfig, Model, ReconstructConfig,
};
use gcnspline_core::train::{train_to_dir, TrainConfig, CHECKPOINT_FILE, HISTORY_FILE};
use gcnspline_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "gcnspline",
    version,
    about = "B-spline surface reconstruction from noisy point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// key=value configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed overriding the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        #[command(flatten)]
        common: Common,
        /// Base configuration before the config file is applied
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Train the network on a dataset directory
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
    /// Reconstruct a surface from an .xyz cloud with a trained checkpoint
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Fit the least-squares baseline with a fixed control grid
    FitBsa {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Score the network and fixed-grid baselines on the held-out split
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
}

fn train_keys() -> Vec<&'static str> {
    ArchConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS)
        .copied()
        .collect()
}

fn keys_help(keys: &[&str]) -> String {
    format!("Config keys: {}", keys.join(", "))
}

fn command() -> clap::Command {
    let train = train_keys();
    Cli::command()
        .mut_subcommand("gen-data", |c| c.after_help(keys_help(GenConfig::KEYS)))
        .mut_subcommand("train", |c| c.after_help(keys_help(&train)))
        .mut_subcommand("reconstruct", |c| {
            c.after_help(keys_help(ReconstructConfig::KEYS))
        })
        .mut_subcommand("fit-bsa", |c| c.after_help(keys_help(BsaRunConfig::KEYS)))
        .mut_subcommand("evaluate", |c| c.after_help(keys_help(EvalConfig::KEYS)))
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn load_config(common: &Common, allowed: &[&str]) -> Result<KeyValues, Failure> {
    let kv = match &common.config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::new(),
    };
    kv.check_keys(allowed)?;
    Ok(kv)
}

fn with_seed(mut kv: KeyValues, seed: Option<u64>) -> KeyValues {
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    kv
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn require_checkpoint(checkpoint: &Option<PathBuf>) -> Result<&Path, Failure> {
    checkpoint
        .as_deref()
        .ok_or_else(|| usage("invalid configuration: missing required flag --checkpoint"))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { common, preset } => {
            let kv = with_seed(load_config(&common, GenConfig::KEYS)?, common.seed);
            let base = match preset {
                Preset::Desk => GenConfig::desk_scale(),
                Preset::Paper => GenConfig::paper_scale(),
            };
            let cfg = base.apply_kv(&kv)?;
            let dir = out_dir(&common, "dataset");
            let samples = generate_dataset(&cfg, &dir)?;
            read_manifest(&dir)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train { common, dataset } => {
            let kv = with_seed(load_config(&common, &train_keys())?, common.seed);
            let manifest = read_manifest(&dataset)?;
            let mut arch = ArchConfig {
                pad_rows: manifest.config.pad_rows,
                pad_cols: manifest.config.pad_cols,
                spline_degrees: manifest.config.degrees,
                ..ArchConfig::default()
            };
            arch = arch.apply_kv(&kv)?;
            arch.validate()?;
            let cfg = TrainConfig::default().apply_kv(&kv)?;
            cfg.validate()?;
            let (_, samples) = load_dataset(&dataset)?;
            let dir = out_dir(&common, "run");
            ensure_dir(&dir)?;
            let epochs = cfg.epochs;
            let outcome = train_to_dir(&samples, &arch, &cfg, &dir, |row| {
                eprintln!(
                    "epoch {}/{epochs} train {:e} val {:e}",
                    row.epoch, row.train_loss, row.val_loss
                )
            })?;
            let mut resolved = arch.to_kv();
            resolved.merge(&cfg.to_kv());
            let cfg_path = dir.join("train_config.txt");
            std::fs::write(&cfg_path, resolved.to_text()).map_err(|e| {
                Failure::from(Error::Io {
                    path: cfg_path.clone(),
                    source: e,
                })
            })?;
            if let Some(r) = &outcome.grad_check {
                println!(
                    "gradient check: {} probes, max relative error {:e}",
                    r.probes, r.max_rel_error
                );
            }
            println!(
                "best epoch {} (validation loss {:e}); wrote {} and {}",
                outcome.best_epoch,
                outcome.best_val_loss(),
                dir.join(CHECKPOINT_FILE).display(),
                dir.join(HISTORY_FILE).display()
            );
        }
        Command::Reconstruct {
            common,
            checkpoint,
            input,
        } => {
            let kv = load_config(&common, ReconstructConfig::KEYS)?;
            let cfg = ReconstructConfig::default().apply_kv(&kv)?;
            let model = Model::load(require_checkpoint(&checkpoint)?)?;
            let cloud = load_xyz(&input)?;
            let result = reconstruct(&cloud, &model, &cfg, &input.display().to_string())?;
            let dir = out_dir(&common, ".");
            ensure_dir(&dir)?;
            let base = stem(&input);
            export_obj(&result, &dir.join(format!("{base}_surface.obj")))?;
            save_xyz(
                &result.dense_sample,
                &dir.join(format!("{base}_surface.xyz")),
            )?;
            let (r, c) = result.predicted_grid;
            println!(
                "predicted control grid {r}x{c}; wrote {base}_surface.obj and {base}_surface.xyz"
            );
        }
        Command::FitBsa { common, input } => {
            let kv = load_config(&common, BsaRunConfig::KEYS)?;
            let cfg = BsaRunConfig::default().apply_kv(&kv)?;
            let cloud = load_xyz(&input)?;
            let (_, dense) = run_bsa(&cloud, &cfg)?;
            let dir = out_dir(&common, ".");
            ensure_dir(&dir)?;
            let base = stem(&input);
            let (r, c) = cfg.cp_grid;
            let header = format!(
                "least-squares fit, control grid {r}x{c}\ninput {}",
                input.display()
            );
            let obj = lattice_obj(dense.points(), cfg.sample_res, &header)?;
            let obj_path = dir.join(format!("{base}_bsa.obj"));
            std::fs::write(&obj_path, obj).map_err(|e| {
                Failure::from(Error::Io {
                    path: obj_path.clone(),
                    source: e,
                })
            })?;
            save_xyz(&dense, &dir.join(format!("{base}_bsa.xyz")))?;
            println!("wrote {base}_bsa.obj and {base}_bsa.xyz");
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
        } => {
            let kv = with_seed(load_config(&common, EvalConfig::KEYS)?, common.seed);
            let cfg = EvalConfig::default().apply_kv(&kv)?;
            let checkpoint = require_checkpoint(&checkpoint)?;
            let dir = out_dir(&common, "eval");
            let eval = evaluate(&dataset, checkpoint, &cfg, &dir)?;
            print!("{}", eval.summary_table());
            println!("grid accuracy {:.4}", eval.grid_accuracy());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("usage error");
            eprintln!("{first}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", e.to_string().lines().next().unwrap_or("usage error"));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
