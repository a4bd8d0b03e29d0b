//! Base-codec training orchestration.

use std::fs;
use std::path::{Path, PathBuf};

use icm_core::codec::{CodecConfig, IcmModel};
use icm_core::losses::{FeatureExtractor, LossBreakdown, LossWeights};
use icm_core::nn::ParamStore;
use icm_core::optim::Adam;
use icm_core::rng::SeedRng;
use icm_core::tensor::Tensor;
use icm_core::train::base_train_step;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, save_checkpoint, CheckpointManifest};
use crate::dataset::{random_crop, DatasetIndex, ImageCache};
use crate::error::{PipelineError, Result};

/// Feature-extractor seed shared by every run, so two trainings against
/// the "machine consumer" optimize the same fixed network.
pub const EXTRACTOR_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Tiny,
}

impl Profile {
    pub fn codec(self) -> CodecConfig {
        match self {
            Profile::Paper => CodecConfig::paper(),
            Profile::Tiny => CodecConfig::tiny(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "tiny" => Ok(Profile::Tiny),
            other => Err(PipelineError::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Tiny => "tiny",
        }
    }
}

/// Everything a base-training run depends on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    /// Training crop side; multiple of 16 for extractor compatibility.
    pub crop: usize,
    pub images_per_checkpoint: usize,
    pub checkpoints: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub seed: u64,
    pub extractor_seed: u64,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (crop, images, checkpoints) = match profile {
            Profile::Paper => (512, 6000, 200),
            Profile::Tiny => (64, 64, 20),
        };
        RunConfig {
            profile,
            crop,
            images_per_checkpoint: images,
            checkpoints,
            batch: 4,
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            seed: 0,
            extractor_seed: EXTRACTOR_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return Err(PipelineError::Config(format!(
                "crop {} must be a positive multiple of 16",
                self.crop
            )));
        }
        if self.batch == 0 {
            return Err(PipelineError::Config("batch must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(PipelineError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub total: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub proxy: f64,
}

impl LossPoint {
    fn new(step: u64, l: LossBreakdown) -> Self {
        LossPoint {
            step,
            total: l.total,
            rate_bpp: l.rate_bpp,
            mse: l.mse,
            proxy: l.proxy,
        }
    }
}

/// A finished base run, alive in memory for callers that keep training.
pub struct TrainedBase {
    pub store: ParamStore<f32>,
    pub model: IcmModel,
    pub cfg: RunConfig,
    pub losses: Vec<LossPoint>,
    pub checkpoint_dirs: Vec<PathBuf>,
}

/// Trains the base codec and persists one checkpoint directory per
/// checkpoint index, plus a `losses.csv` curve. `checkpoints == 0` saves
/// the initialized weights only.
pub fn train_base(cfg: &RunConfig, index: &DatasetIndex, out: &Path) -> Result<TrainedBase> {
    cfg.validate()?;
    let (mut store, model) = IcmModel::new_seeded::<f32>(cfg.profile.codec(), cfg.seed)
        .map_err(PipelineError::Codec)?;
    let fe = FeatureExtractor::<f32>::new(cfg.extractor_seed);
    let mut opt = Adam::new(&store, cfg.learning_rate);
    let run_rng = SeedRng::new(cfg.seed);
    let mut cache = ImageCache::default();
    let mut losses = Vec::new();
    let mut checkpoint_dirs = Vec::new();
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;

    let eligible = index.eligible(cfg.crop);
    if cfg.checkpoints > 0 && eligible.is_empty() {
        return Err(PipelineError::Dataset(format!(
            "no images of at least {0}x{0} in the dataset",
            cfg.crop
        )));
    }

    let mut step: u64 = 0;
    let mut sample: u64 = 0;
    for ckpt in 0..cfg.checkpoints {
        let order = index.shuffled_eligible(cfg.crop, cfg.seed, ckpt as u64);
        let mut taken = 0usize;
        while taken < cfg.images_per_checkpoint {
            let want = cfg.batch.min(cfg.images_per_checkpoint - taken);
            let mut batch: Vec<Tensor<f32>> = Vec::with_capacity(want);
            for k in 0..want {
                let entry = order[(taken + k) % order.len()];
                let img = cache.get(&index.abs_path(entry))?;
                let mut crop_rng = run_rng.fork("crop", sample);
                sample += 1;
                batch.push(random_crop(img, cfg.crop, &mut crop_rng)?);
            }
            taken += want;
            let stats = base_train_step(
                &model,
                &fe,
                &mut store,
                &mut opt,
                &batch,
                &cfg.weights,
                &run_rng,
                step,
            )?;
            losses.push(LossPoint::new(step, stats.loss));
            step += 1;
        }
        let dir = checkpoint_dir(out, ckpt);
        save_manifest(&dir, &store, cfg, step)?;
        checkpoint_dirs.push(dir);
    }
    if cfg.checkpoints == 0 {
        let dir = checkpoint_dir(out, 0);
        save_manifest(&dir, &store, cfg, 0)?;
        checkpoint_dirs.push(dir);
    }
    write_loss_csv(&out.join("losses.csv"), &losses)?;
    Ok(TrainedBase {
        store,
        model,
        cfg: cfg.clone(),
        losses,
        checkpoint_dirs,
    })
}

fn save_manifest(
    dir: &Path,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    step: u64,
) -> Result<CheckpointManifest> {
    save_checkpoint(
        dir,
        store,
        cfg.profile.codec(),
        "base",
        step,
        cfg.seed,
        cfg.extractor_seed,
        cfg.echo(),
    )
}

fn write_loss_csv(path: &Path, losses: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    w.write_record(["step", "total", "rate_bpp", "mse", "proxy"])
        .map_err(csv_io(path))?;
    for p in losses {
        w.write_record([
            p.step.to_string(),
            format!("{:.9}", p.total),
            format!("{:.9}", p.rate_bpp),
            format!("{:.9}", p.mse),
            format!("{:.9}", p.proxy),
        ])
        .map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}

pub(crate) fn csv_io(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::io(path, std::io::Error::other(e))
}
