//! Checkpoint directory format: `manifest.json` describing the run and
//! every parameter array, plus `params.bin` holding the arrays as
//! little-endian f32, concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use icm_core::codec::{CodecConfig, IcmModel};
use icm_core::nn::{ParamStore, Partition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "icm-checkpoint";
const VERSION: u32 = 1;

/// Partitions persisted in a codec checkpoint. Discriminator state is
/// auxiliary to a finetune run and never part of the codec.
pub const CODEC_PARTITIONS: [Partition; 4] = [
    Partition::Encoder,
    Partition::ProbabilityModel,
    Partition::DecoderHead,
    Partition::DecoderTail,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub partition: String,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// "base" or "finetune".
    pub kind: String,
    pub codec: CodecConfig,
    /// Optimizer steps taken to reach this state.
    pub step: u64,
    pub seed: u64,
    /// Hex SHA-256 over the codec partitions, the checkpoint identity.
    pub store_hash: String,
    /// Seed of the fixed feature extractor the run trained against.
    pub extractor_seed: u64,
    /// Run-configuration echo, shape depends on `kind`.
    pub config: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

fn partition_label(p: Partition) -> &'static str {
    p.label()
}

pub fn store_hash_hex<S: icm_core::Scalar>(store: &ParamStore<S>) -> String {
    hex::encode(store.hash_partitions(&CODEC_PARTITIONS))
}

/// Writes `store`'s codec partitions to `dir` (created if needed).
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint<S: icm_core::Scalar>(
    dir: &Path,
    store: &ParamStore<S>,
    codec: CodecConfig,
    kind: &str,
    step: u64,
    seed: u64,
    extractor_seed: u64,
    config: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut params = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for id in store.ids_in(&CODEC_PARTITIONS) {
        let values = store.to_f32_vec(id);
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamRecord {
            name: store.name(id).to_string(),
            partition: partition_label(store.partition(id)).to_string(),
            len: values.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        codec,
        step,
        seed,
        store_hash: store_hash_hex(store),
        extractor_seed,
        config,
        params,
    };
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, &blob).map_err(|e| PipelineError::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man, text).map_err(|e| PipelineError::io(&man, e))?;
    Ok(manifest)
}

/// Loads a checkpoint directory back into a fresh store + model. Every
/// parameter is verified against its manifest hash, and the rebuilt store
/// must reproduce the manifest's overall hash.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, IcmModel, CheckpointManifest)> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| PipelineError::io(&man_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "{}: not a version-{VERSION} {FORMAT} manifest",
            man_path.display()
        )));
    }
    let (mut store, model) = IcmModel::new_seeded::<f32>(manifest.codec, manifest.seed)
        .map_err(PipelineError::Codec)?;
    let bin_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin_path).map_err(|e| PipelineError::io(&bin_path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.len * 4).sum();
    if blob.len() != expected {
        return Err(PipelineError::Checkpoint(format!(
            "{}: {} bytes, manifest expects {expected}",
            bin_path.display(),
            blob.len()
        )));
    }
    let mut offset = 0usize;
    for rec in &manifest.params {
        let bytes = &blob[offset..offset + rec.len * 4];
        offset += rec.len * 4;
        if hex::encode(Sha256::digest(bytes)) != rec.sha256 {
            return Err(PipelineError::Checkpoint(format!(
                "parameter {} fails its content hash",
                rec.name
            )));
        }
        let id = store.find(&rec.name).ok_or_else(|| {
            PipelineError::Checkpoint(format!("parameter {} unknown to this codec", rec.name))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .load_f32(id, &values)
            .map_err(PipelineError::Codec)?;
    }
    let got = store_hash_hex(&store);
    if got != manifest.store_hash {
        return Err(PipelineError::Checkpoint(format!(
            "store hash {got} does not match manifest {}",
            manifest.store_hash
        )));
    }
    Ok((store, model, manifest))
}

/// Checkpoint directories under `out`, one per saved index.
pub fn checkpoint_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("ckpt_{index:04}"))
}
