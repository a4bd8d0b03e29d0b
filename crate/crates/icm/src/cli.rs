//! Command-line surface. Settings resolve in three layers: built-in
//! defaults, then a flat JSON `--config` file, then explicit flags
//! (`--li` applies its preset before the scalar flags, so a flag always
//! has the last word).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use icm_core::gan::{FinetuneConfig, GanFlavor};

use crate::dataset::{ingest_dataset, load_or_ingest, DatasetIndex};
use crate::error::{PipelineError, Result};
use crate::eval::write_summary_csv;
use crate::finetune::{finetune_run, FinetuneRunConfig};
use crate::run::{train_base, Profile, RunConfig};

#[derive(Parser)]
#[command(
    name = "icm",
    about = "Learned image codec for machine consumers: train, finetune, code, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a directory of images.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        /// Write the index JSON here (defaults to the cache only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base codec.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat JSON file of default settings; flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        images_per_checkpoint: Option<usize>,
        #[arg(long)]
        checkpoints: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Adversarially finetune the decoder head of a base checkpoint.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Patches per image (1, 3, or 5).
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        w_adv: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Limited-impact preset: small adversarial weight and rate.
        #[arg(long)]
        li: bool,
        #[arg(long)]
        gan_flavor: Option<String>,
        #[arg(long)]
        steps_per_checkpoint: Option<usize>,
        #[arg(long)]
        checkpoints: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long)]
        eval_images: Option<usize>,
    },
    /// Compress one image into an .icmb bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress an .icmb bitstream into an image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset and write report files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value_t = 64)]
        max_images: usize,
    },
    /// Emit side-by-side artifact grids for two or more checkpoints.
    Compare {
        /// Repeatable; first one is the base used for tile selection.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_images: usize,
        #[arg(long, default_value_t = 64)]
        tile: usize,
    },
}

/// Flat key-value config file; any subset of keys, unknown keys rejected.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profile: Option<String>,
    seed: Option<u64>,
    lr: Option<f64>,
    crop: Option<usize>,
    images_per_checkpoint: Option<usize>,
    checkpoints: Option<usize>,
    batch: Option<usize>,
    w_rate: Option<f64>,
    w_mse: Option<f64>,
    w_task: Option<f64>,
    patches: Option<usize>,
    patch_size: Option<usize>,
    w_adv: Option<f64>,
    gan_flavor: Option<String>,
    steps_per_checkpoint: Option<usize>,
    eval_every: Option<usize>,
    eval_images: Option<usize>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn parse_flavor(s: &str) -> Result<GanFlavor> {
    match s {
        "non_saturating" | "non-saturating" => Ok(GanFlavor::NonSaturating),
        "literal_minimax" | "literal-minimax" => Ok(GanFlavor::LiteralMinimax),
        other => Err(PipelineError::Config(format!(
            "unknown gan flavor {other:?}"
        ))),
    }
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn dataset_for(path: &Path) -> Result<DatasetIndex> {
    let (index, warnings) = load_or_ingest(path)?;
    print_warnings(&warnings);
    Ok(index)
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    dispatch(cli.cmd)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { dataset, out } => {
            let (index, warnings) = ingest_dataset(&dataset)?;
            print_warnings(&warnings);
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&index)?;
                fs::write(&out, text).map_err(|e| PipelineError::io(&out, e))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "images": index.entries.len(),
                    "index_hash": index.index_hash(),
                })
            );
            Ok(())
        }
        Command::Train {
            dataset,
            out,
            config,
            profile,
            seed,
            lr,
            crop,
            images_per_checkpoint,
            checkpoints,
            batch,
        } => {
            let file = read_config(config.as_deref())?;
            let profile_name = profile.or(file.profile).unwrap_or_else(|| "tiny".into());
            let mut cfg = RunConfig::for_profile(Profile::parse(&profile_name)?);
            if let Some(v) = file.seed {
                cfg.seed = v;
            }
            if let Some(v) = file.lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = file.crop {
                cfg.crop = v;
            }
            if let Some(v) = file.images_per_checkpoint {
                cfg.images_per_checkpoint = v;
            }
            if let Some(v) = file.checkpoints {
                cfg.checkpoints = v;
            }
            if let Some(v) = file.batch {
                cfg.batch = v;
            }
            if let Some(v) = file.w_rate {
                cfg.weights.w_rate = v;
            }
            if let Some(v) = file.w_mse {
                cfg.weights.w_mse = v;
            }
            if let Some(v) = file.w_task {
                cfg.weights.w_task = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = crop {
                cfg.crop = v;
            }
            if let Some(v) = images_per_checkpoint {
                cfg.images_per_checkpoint = v;
            }
            if let Some(v) = checkpoints {
                cfg.checkpoints = v;
            }
            if let Some(v) = batch {
                cfg.batch = v;
            }
            let index = dataset_for(&dataset)?;
            let outcome = train_base(&cfg, &index, &out)?;
            let last = outcome.losses.last();
            println!(
                "{}",
                serde_json::json!({
                    "checkpoints": outcome.checkpoint_dirs.len(),
                    "steps": outcome.losses.len(),
                    "final_loss": last.map(|p| p.total),
                })
            );
            Ok(())
        }
        Command::Finetune {
            dataset,
            checkpoint,
            out,
            config,
            seed,
            patches,
            patch_size,
            w_adv,
            lr,
            li,
            gan_flavor,
            steps_per_checkpoint,
            checkpoints,
            crop,
            batch,
            eval_every,
            eval_images,
        } => {
            let file = read_config(config.as_deref())?;
            let mut codec = FinetuneConfig::default();
            if let Some(v) = file.seed {
                codec.seed = v;
            }
            if let Some(v) = file.patches {
                codec.patches_per_image = v;
            }
            if let Some(v) = file.patch_size {
                codec.patch_size = v;
            }
            if let Some(v) = file.w_adv {
                codec.w_adv = v;
            }
            if let Some(v) = file.lr {
                codec.learning_rate = v;
            }
            if let Some(ref v) = file.gan_flavor {
                codec.flavor = parse_flavor(v)?;
            }
            if let Some(v) = file.steps_per_checkpoint {
                codec.steps_per_checkpoint = v;
            }
            if let Some(v) = file.checkpoints {
                codec.checkpoints = v;
            }
            if li {
                let preset = FinetuneConfig::li();
                codec.w_adv = preset.w_adv;
                codec.learning_rate = preset.learning_rate;
            }
            if let Some(v) = seed {
                codec.seed = v;
            }
            if let Some(v) = patches {
                codec.patches_per_image = v;
            }
            if let Some(v) = patch_size {
                codec.patch_size = v;
            }
            if let Some(v) = w_adv {
                codec.w_adv = v;
            }
            if let Some(v) = lr {
                codec.learning_rate = v;
            }
            if let Some(ref v) = gan_flavor {
                codec.flavor = parse_flavor(v)?;
            }
            if let Some(v) = steps_per_checkpoint {
                codec.steps_per_checkpoint = v;
            }
            if let Some(v) = checkpoints {
                codec.checkpoints = v;
            }
            let mut cfg = FinetuneRunConfig::tiny_defaults(codec);
            if let Some(v) = file.crop {
                cfg.crop = v;
            }
            if let Some(v) = file.eval_every {
                cfg.eval_every = v;
            }
            if let Some(v) = file.eval_images {
                cfg.eval_images = v;
            }
            if let Some(v) = file.batch {
                cfg.batch = v;
            }
            if let Some(v) = crop {
                cfg.crop = v;
            }
            if let Some(v) = batch {
                cfg.batch = v;
            }
            if let Some(v) = eval_every {
                cfg.eval_every = v;
            }
            if let Some(v) = eval_images {
                cfg.eval_images = v;
            }
            let index = dataset_for(&dataset)?;
            let outcome = finetune_run(&checkpoint, &index, &cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoints": outcome.checkpoint_dirs.len(),
                    "steps": outcome.log.len(),
                    "best_checkpoint": outcome.manifest.best_checkpoint,
                })
            );
            Ok(())
        }
        Command::Encode {
            checkpoint,
            input,
            out,
        } => {
            let (payload, pixels) = crate::codecfile::encode_file(&checkpoint, &input, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "payload_bytes": payload,
                    "bpp": 8.0 * payload as f64 / pixels as f64,
                })
            );
            Ok(())
        }
        Command::Decode {
            checkpoint,
            input,
            out,
        } => {
            let (h, w) = crate::codecfile::decode_file(&checkpoint, &input, &out)?;
            println!("{}", serde_json::json!({ "height": h, "width": w }));
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            label,
            max_images,
        } => {
            let index = dataset_for(&dataset)?;
            let label = label.unwrap_or_else(|| "checkpoint".into());
            let report =
                crate::finetune::eval_checkpoint_dir(&checkpoint, &index, max_images, &label)?;
            fs::create_dir_all(&out).map_err(|e| PipelineError::io(&out, e))?;
            crate::eval::write_report_json(&report, &out.join("report.json"))?;
            write_summary_csv(&[&report], &out.join("report.csv"))?;
            println!(
                "{}",
                serde_json::json!({
                    "images": report.records.len(),
                    "mean_psnr_db": report.mean.map(|m| m.psnr_db),
                    "mean_bpp": report.mean.map(|m| m.bpp),
                })
            );
            Ok(())
        }
        Command::Compare {
            checkpoints,
            dataset,
            out,
            max_images,
            tile,
        } => {
            let index = dataset_for(&dataset)?;
            let labeled: Vec<(String, PathBuf)> = checkpoints
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let name = p
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("checkpoint{i}"));
                    (name, p.clone())
                })
                .collect();
            let manifest =
                crate::compare::compare_checkpoints(&labeled, &index, max_images, tile, &out)?;
            println!(
                "{}",
                serde_json::json!({ "grids": manifest.grids.len() })
            );
            Ok(())
        }
    }
}
