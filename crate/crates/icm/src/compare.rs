//! Side-by-side comparison grids: for each image, the crop with the most
//! checkerboard energy under the first (base) checkpoint, shown as
//! source | one panel per checkpoint, written losslessly as PNG.

use std::fs;
use std::path::{Path, PathBuf};

use icm_core::codec::quantize::quantize_round;
use icm_core::codec::LATENT_STRIDE;
use icm_core::image::{crop_to_size, pad_to_stride, to_u8_rgb};
use icm_core::metrics::checkerboard_energy;
use icm_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{load_image_tensor, DatasetIndex};
use crate::error::{PipelineError, Result};

const SEPARATOR: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRecord {
    pub image: String,
    pub file: String,
    /// Panel labels left to right; "source" first.
    pub panels: Vec<String>,
    pub tile_y: usize,
    pub tile_x: usize,
    pub tile: usize,
    /// Checkerboard energy of each checkpoint's reconstruction inside
    /// the chosen tile, ordered like `panels[1..]`.
    pub tile_energy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareManifest {
    pub checkpoints: Vec<String>,
    pub grids: Vec<GridRecord>,
}

/// Reconstruction through the full coded path (exactly what a decoder
/// sees), clamped for display.
fn reconstruct(
    store: &icm_core::nn::ParamStore<f32>,
    model: &icm_core::codec::IcmModel,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (_, _, h, w) = x.dims4();
    let (padded, orig) = pad_to_stride(x, LATENT_STRIDE);
    let latent = model.encoder.forward(store, &padded);
    let q = quantize_round(&latent);
    let bytes = icm_core::entropy::compress(&q, &model.pm, store, orig)?;
    let (decoded, _) = icm_core::entropy::decompress(&bytes, &model.pm, store)?;
    let recon = model.decoder.forward(store, &decoded);
    let mut xhat = crop_to_size(&recon, h, w);
    xhat.clamp_in_place(0.0, 1.0);
    Ok(xhat)
}

fn crop_tile(x: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let (_, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[1, c, size, size]);
    for ci in 0..c {
        for y in 0..size {
            let src = (ci * h + y0 + y) * w + x0;
            let dst = (ci * size + y) * size;
            out.data_mut()[dst..dst + size].copy_from_slice(&x.data()[src..src + size]);
        }
    }
    out
}

/// Scans half-overlapping tiles and returns the one where the base
/// reconstruction carries the most checkerboard energy.
fn max_energy_tile(x: &Tensor<f32>, base_recon: &Tensor<f32>, tile: usize) -> (usize, usize) {
    let (_, _, h, w) = x.dims4();
    let stride = (tile / 2).max(1);
    let mut best = (0usize, 0usize);
    let mut best_e = -1.0f64;
    let mut y0 = 0;
    loop {
        let mut x0 = 0;
        loop {
            let sx = crop_tile(x, y0, x0, tile);
            let sr = crop_tile(base_recon, y0, x0, tile);
            let e = checkerboard_energy(&sr, &sx);
            if e > best_e {
                best_e = e;
                best = (y0, x0);
            }
            if x0 + tile >= w {
                break;
            }
            x0 = (x0 + stride).min(w - tile);
        }
        if y0 + tile >= h {
            break;
        }
        y0 = (y0 + stride).min(h - tile);
    }
    best
}

fn panel_strip(tiles: &[Tensor<f32>], tile: usize) -> image::RgbImage {
    let n = tiles.len();
    let width = n * tile + (n - 1) * SEPARATOR;
    let mut img = image::RgbImage::from_pixel(width as u32, tile as u32, image::Rgb([255; 3]));
    for (i, t) in tiles.iter().enumerate() {
        let rgb = to_u8_rgb(t);
        let x_off = i * (tile + SEPARATOR);
        for y in 0..tile {
            for x in 0..tile {
                let p = (y * tile + x) * 3;
                img.put_pixel(
                    (x_off + x) as u32,
                    y as u32,
                    image::Rgb([rgb[p], rgb[p + 1], rgb[p + 2]]),
                );
            }
        }
    }
    img
}

/// Builds one grid PNG per dataset image (capped at `max_images`) from
/// the given checkpoints, first checkpoint treated as the base for tile
/// selection. Panel order is source, then the checkpoints as given.
pub fn compare_checkpoints(
    checkpoints: &[(String, PathBuf)],
    index: &DatasetIndex,
    max_images: usize,
    tile: usize,
    out: &Path,
) -> Result<CompareManifest> {
    if checkpoints.is_empty() {
        return Err(PipelineError::Config("no checkpoints to compare".into()));
    }
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mut loaded = Vec::new();
    for (label, dir) in checkpoints {
        let (store, model, _) = load_checkpoint(dir)?;
        loaded.push((label.clone(), store, model));
    }
    let mut manifest = CompareManifest {
        checkpoints: checkpoints.iter().map(|(l, _)| l.clone()).collect(),
        grids: Vec::new(),
    };
    for entry in index.entries.iter().take(max_images) {
        let x = load_image_tensor(&index.abs_path(entry))?;
        let (_, _, h, w) = x.dims4();
        let tile = tile.min(h).min(w);
        let mut recons = Vec::new();
        for (_, store, model) in &loaded {
            recons.push(reconstruct(store, model, &x)?);
        }
        let (ty, tx) = max_energy_tile(&x, &recons[0], tile);
        let src_tile = crop_tile(&x, ty, tx, tile);
        let mut tiles = vec![src_tile.clone()];
        let mut energies = Vec::new();
        for r in &recons {
            let rt = crop_tile(r, ty, tx, tile);
            energies.push(checkerboard_energy(&rt, &src_tile));
            tiles.push(rt);
        }
        let strip = panel_strip(&tiles, tile);
        let stem = entry.path.replace('/', "_");
        let file = format!("{stem}.grid.png");
        let path = out.join(&file);
        strip.save(&path).map_err(|e| PipelineError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let mut panels = vec!["source".to_string()];
        panels.extend(manifest.checkpoints.iter().cloned());
        manifest.grids.push(GridRecord {
            image: entry.path.clone(),
            file,
            panels,
            tile_y: ty,
            tile_x: tx,
            tile,
            tile_energy: energies,
        });
    }
    let path = out.join("compare.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
    Ok(manifest)
}
