//! Dataset ingestion: a deterministic index of the images under a root
//! directory, with per-file content hashes and an optional cache keyed by
//! the `ICM_CACHE_DIR` environment variable.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use icm_core::image::from_u8_rgb;
use icm_core::rng::SeedRng;
use icm_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ImageEntry {
    /// Path relative to the dataset root, with `/` separators.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub bytes: u64,
    /// Hex SHA-256 of the file contents.
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by relative path.
    pub entries: Vec<ImageEntry>,
}

impl DatasetIndex {
    /// Content hash of the index: covers relative paths, dimensions, and
    /// file hashes but not the root, so moving a dataset does not change
    /// its identity.
    pub fn index_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.path.as_bytes());
            h.update(e.width.to_le_bytes());
            h.update(e.height.to_le_bytes());
            h.update(e.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Entries large enough in both dimensions for `crop`-sized training
    /// patches.
    pub fn eligible(&self, crop: usize) -> Vec<&ImageEntry> {
        self.entries
            .iter()
            .filter(|e| e.width as usize >= crop && e.height as usize >= crop)
            .collect()
    }

    /// Deterministic per-(seed, checkpoint) visiting order over the
    /// eligible entries.
    pub fn shuffled_eligible(&self, crop: usize, seed: u64, checkpoint: u64) -> Vec<&ImageEntry> {
        let mut order = self.eligible(crop);
        SeedRng::new(seed)
            .fork("dataset_shuffle", checkpoint)
            .shuffle(&mut order);
        order
    }

    pub fn abs_path(&self, entry: &ImageEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Recursively scans `root` for PNG/JPEG files. Unreadable or undecodable
/// files are skipped, each with one warning line. An index with zero
/// images is an error.
pub fn ingest_dataset(root: &Path) -> Result<(DatasetIndex, Vec<String>)> {
    if !root.is_dir() {
        return Err(PipelineError::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for item in walkdir::WalkDir::new(root).sort_by_file_name() {
        let item = match item {
            Ok(i) => i,
            Err(e) => {
                warnings.push(format!("unreadable directory entry: {e}"));
                continue;
            }
        };
        if !item.file_type().is_file() || !is_image_file(item.path()) {
            continue;
        }
        let rel = item
            .path()
            .strip_prefix(root)
            .expect("walkdir stays under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = match fs::read(item.path()) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(format!("{rel}: unreadable, skipped ({e})"));
                continue;
            }
        };
        let (width, height) = match image::load_from_memory(&bytes) {
            Ok(img) => (img.width(), img.height()),
            Err(e) => {
                warnings.push(format!("{rel}: undecodable, skipped ({e})"));
                continue;
            }
        };
        entries.push(ImageEntry {
            path: rel,
            width,
            height,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if entries.is_empty() {
        return Err(PipelineError::Dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    Ok((
        DatasetIndex {
            root: root.to_path_buf(),
            entries,
        },
        warnings,
    ))
}

fn cache_path(root: &Path) -> Option<PathBuf> {
    let dir = std::env::var_os("ICM_CACHE_DIR")?;
    let canon = fs::canonicalize(root).unwrap_or_else(|_| root.to_path_buf());
    let key = hex::encode(Sha256::digest(canon.to_string_lossy().as_bytes()));
    Some(PathBuf::from(dir).join(format!("index-{}.json", &key[..16])))
}

/// Loads the cached index for `root` when it is still accurate (all files
/// present with unchanged sizes), otherwise ingests fresh and refreshes
/// the cache.
pub fn load_or_ingest(root: &Path) -> Result<(DatasetIndex, Vec<String>)> {
    let cache = cache_path(root);
    if let Some(ref path) = cache {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(index) = serde_json::from_str::<DatasetIndex>(&text) {
                let fresh = index.entries.iter().all(|e| {
                    fs::metadata(root.join(&e.path))
                        .map(|m| m.is_file() && m.len() == e.bytes)
                        .unwrap_or(false)
                });
                if fresh && !index.entries.is_empty() {
                    let mut index = index;
                    index.root = root.to_path_buf();
                    return Ok((index, Vec::new()));
                }
            }
        }
    }
    let (index, warnings) = ingest_dataset(root)?;
    if let Some(path) = cache {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(&index)?;
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
    }
    Ok((index, warnings))
}

/// Decodes one image file to a `[1, 3, H, W]` float tensor in [0, 1].
pub fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(from_u8_rgb(rgb.as_raw(), h, w))
}

/// Uniform random `size`-square crop; the caller owns the rng stream, so
/// a forked rng per (seed, sample index) makes crops reproducible.
pub fn random_crop(x: &Tensor<f32>, size: usize, rng: &mut SeedRng) -> Result<Tensor<f32>> {
    let (_, c, h, w) = x.dims4();
    if h < size || w < size {
        return Err(PipelineError::Dataset(format!(
            "image {h}x{w} smaller than crop {size}"
        )));
    }
    let y0 = rng.below(h - size + 1);
    let x0 = rng.below(w - size + 1);
    let mut out = Tensor::zeros(&[1, c, size, size]);
    for ci in 0..c {
        for y in 0..size {
            let src = (ci * h + y0 + y) * w + x0;
            let dst = (ci * size + y) * size;
            out.data_mut()[dst..dst + size].copy_from_slice(&x.data()[src..src + size]);
        }
    }
    Ok(out)
}

/// Decoded-image cache so desk-scale runs do not re-decode the same few
/// PNGs thousands of times.
#[derive(Default)]
pub struct ImageCache {
    map: HashMap<PathBuf, Tensor<f32>>,
}

impl ImageCache {
    pub fn get(&mut self, path: &Path) -> Result<&Tensor<f32>> {
        if !self.map.contains_key(path) {
            let t = load_image_tensor(path)?;
            self.map.insert(path.to_path_buf(), t);
        }
        Ok(&self.map[path])
    }
}
