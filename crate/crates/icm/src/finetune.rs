//! Adversarial decoder finetuning orchestration: runs the alternating
//! GAN steps over dataset crops, persists checkpoints at every interval,
//! and snapshots metrics at a configurable cadence.

use std::fs;
use std::path::{Path, PathBuf};

use icm_core::gan::{FinetuneConfig, Finetuner};
use icm_core::losses::FeatureExtractor;
use icm_core::rng::SeedRng;
use icm_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, load_checkpoint, save_checkpoint};
use crate::dataset::{random_crop, DatasetIndex, ImageCache};
use crate::error::{PipelineError, Result};
use crate::eval::{evaluate_checkpoint, write_report_json, MetricsReport};

pub const RUN_MANIFEST_FILE: &str = "finetune_run.json";

/// Orchestration settings wrapped around the core finetune config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRunConfig {
    pub codec: FinetuneConfig,
    /// Training crop side; at least the patch size, multiple of 16.
    pub crop: usize,
    pub batch: usize,
    /// Snapshot metrics every this many checkpoints; 0 disables.
    pub eval_every: usize,
    /// Number of dataset images in each metrics snapshot.
    pub eval_images: usize,
}

impl FinetuneRunConfig {
    pub fn tiny_defaults(codec: FinetuneConfig) -> Self {
        FinetuneRunConfig {
            codec,
            crop: 64,
            batch: 4,
            eval_every: 10,
            eval_images: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate().map_err(PipelineError::Train)?;
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return Err(PipelineError::Config(format!(
                "crop {} must be a positive multiple of 16",
                self.crop
            )));
        }
        if self.crop < self.codec.patch_size {
            return Err(PipelineError::Config(format!(
                "crop {} smaller than discriminator patch {}",
                self.crop, self.codec.patch_size
            )));
        }
        if self.batch == 0 {
            return Err(PipelineError::Config("batch must be positive".into()));
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One logged finetune step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinetunePoint {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub l2: f64,
    pub objective: f64,
    pub disc_accuracy: f64,
}

/// Top-level record of a finetune run, written next to its checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRunManifest {
    pub base_checkpoint_hash: String,
    pub config: FinetuneRunConfig,
    pub checkpoints: Vec<String>,
    /// Snapshot report files, parallel to the checkpoints they describe.
    pub snapshots: Vec<SnapshotRef>,
    /// Index into `checkpoints` with the lowest mean feature-fidelity
    /// surrogate among snapshotted ones.
    pub best_checkpoint: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub checkpoint: usize,
    pub report: String,
    pub mean_feature_fidelity: Option<f64>,
}

pub struct FinetuneOutcome {
    pub store: icm_core::nn::ParamStore<f32>,
    pub model: icm_core::codec::IcmModel,
    pub manifest: FinetuneRunManifest,
    pub checkpoint_dirs: Vec<PathBuf>,
    pub log: Vec<FinetunePoint>,
}

/// Runs adversarial finetuning from the base checkpoint at `base_dir`.
/// With `cfg.codec.checkpoints == 0` the base weights are re-persisted
/// under a finetune manifest and nothing is trained.
pub fn finetune_run(
    base_dir: &Path,
    index: &DatasetIndex,
    cfg: &FinetuneRunConfig,
    out: &Path,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (mut store, model, base_manifest) = load_checkpoint(base_dir)?;
    let base_hash = base_manifest.store_hash.clone();
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let fe = FeatureExtractor::<f32>::new(base_manifest.extractor_seed);

    let mut manifest = FinetuneRunManifest {
        base_checkpoint_hash: base_hash,
        config: cfg.clone(),
        checkpoints: Vec::new(),
        snapshots: Vec::new(),
        best_checkpoint: None,
    };
    let mut checkpoint_dirs = Vec::new();
    let mut log = Vec::new();

    let eval_set = snapshot_images(index, cfg.eval_images)?;
    let mut best: Option<(usize, f64)> = None;

    if cfg.codec.checkpoints == 0 {
        let dir = checkpoint_dir(out, 0);
        save_checkpoint(
            &dir,
            &store,
            model.cfg,
            "finetune",
            base_manifest.step,
            cfg.codec.seed,
            base_manifest.extractor_seed,
            cfg.echo(),
        )?;
        manifest.checkpoints.push(dir_name(&dir));
        checkpoint_dirs.push(dir);
        write_run_manifest(out, &manifest)?;
        return Ok(FinetuneOutcome {
            store,
            model,
            manifest,
            checkpoint_dirs,
            log,
        });
    }

    let eligible = index.eligible(cfg.crop);
    if eligible.is_empty() {
        return Err(PipelineError::Dataset(format!(
            "no images of at least {0}x{0} in the dataset",
            cfg.crop
        )));
    }

    let mut tuner = Finetuner::new(&mut store, cfg.codec.clone()).map_err(PipelineError::Train)?;
    let run_rng = SeedRng::new(cfg.codec.seed);
    let mut cache = ImageCache::default();
    let mut sample: u64 = 0;
    for ckpt in 0..cfg.codec.checkpoints {
        let order = index.shuffled_eligible(cfg.crop, cfg.codec.seed, ckpt as u64);
        for _ in 0..cfg.codec.steps_per_checkpoint {
            let mut batch: Vec<Tensor<f32>> = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let entry = order[(sample as usize) % order.len()];
                let img = cache.get(&index.abs_path(entry))?;
                let mut crop_rng = run_rng.fork("finetune_crop", sample);
                sample += 1;
                batch.push(random_crop(img, cfg.crop, &mut crop_rng)?);
            }
            let stats = tuner
                .step(&mut store, &model, &batch)
                .map_err(PipelineError::Train)?;
            log.push(FinetunePoint {
                step: tuner.steps_taken(),
                loss_d: stats.loss_d,
                loss_g: stats.loss_g,
                l2: stats.l2,
                objective: stats.objective,
                disc_accuracy: stats.disc_accuracy,
            });
        }
        let dir = checkpoint_dir(out, ckpt);
        save_checkpoint(
            &dir,
            &store,
            model.cfg,
            "finetune",
            base_manifest.step + tuner.steps_taken(),
            cfg.codec.seed,
            base_manifest.extractor_seed,
            cfg.echo(),
        )?;
        if cfg.eval_every > 0 && (ckpt + 1) % cfg.eval_every == 0 {
            let label = format!("finetune ckpt {ckpt}");
            let report = evaluate_checkpoint(&model, &store, &fe, &eval_set, &label, cfg.echo());
            let file = dir.join("metrics.json");
            write_report_json(&report, &file)?;
            let fidelity = report.mean.map(|m| m.feature_fidelity);
            manifest.snapshots.push(SnapshotRef {
                checkpoint: ckpt,
                report: format!("{}/metrics.json", dir_name(&dir)),
                mean_feature_fidelity: fidelity,
            });
            if let Some(f) = fidelity {
                if best.map(|(_, b)| f < b).unwrap_or(true) {
                    best = Some((ckpt, f));
                }
            }
        }
        manifest.checkpoints.push(dir_name(&dir));
        checkpoint_dirs.push(dir);
    }
    manifest.best_checkpoint = best.map(|(i, _)| i);
    write_run_manifest(out, &manifest)?;
    Ok(FinetuneOutcome {
        store,
        model,
        manifest,
        checkpoint_dirs,
        log,
    })
}

/// Deterministic snapshot set: the first `count` indexed images.
fn snapshot_images(index: &DatasetIndex, count: usize) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    for entry in index.entries.iter().take(count) {
        let t = crate::dataset::load_image_tensor(&index.abs_path(entry))?;
        out.push((entry.path.clone(), t));
    }
    Ok(out)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_run_manifest(out: &Path, manifest: &FinetuneRunManifest) -> Result<()> {
    let path = out.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
}

/// Re-exported for callers that want snapshot-style evaluation of an
/// arbitrary checkpoint directory over dataset images.
pub fn eval_checkpoint_dir(
    ckpt: &Path,
    index: &DatasetIndex,
    max_images: usize,
    label: &str,
) -> Result<MetricsReport> {
    let (store, model, manifest) = load_checkpoint(ckpt)?;
    let fe = FeatureExtractor::<f32>::new(manifest.extractor_seed);
    let images = snapshot_images(index, max_images)?;
    Ok(evaluate_checkpoint(
        &model,
        &store,
        &fe,
        &images,
        label,
        manifest.config,
    ))
}
