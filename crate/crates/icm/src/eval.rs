//! Checkpoint evaluation: per-image metrics over a directory of images,
//! serialized as JSON and as a summary CSV row.

use std::fs;
use std::path::Path;

use icm_core::codec::quantize::quantize_round;
use icm_core::codec::{IcmModel, LATENT_STRIDE};
use icm_core::entropy::{compress, decompress, StreamHeader};
use icm_core::image::{crop_to_size, pad_to_stride, to_u8_rgb};
use icm_core::losses::{fpn::INPUT_STRIDE, FeatureExtractor};
use icm_core::metrics::{checkerboard_energy, psnr_u8, ssim_u8};
use icm_core::nn::ParamStore;
use icm_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::run::csv_io;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RecordMetrics {
    /// Payload bits per source pixel, measured from the bitstream.
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Feature distance at the extractor's perceptual taps.
    pub perceptual: f64,
    /// Machine-task surrogate: proxy feature distance, lower is better.
    pub feature_fidelity: f64,
    pub checkerboard_energy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Present when the image evaluated cleanly.
    pub metrics: Option<RecordMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Human label for the evaluated configuration (one CSV row).
    pub configuration: String,
    pub checkpoint_hash: String,
    pub extractor_seed: u64,
    /// Run-configuration echo carried from the checkpoint manifest.
    pub config: serde_json::Value,
    pub records: Vec<ImageRecord>,
    /// Arithmetic mean over the successful records.
    pub mean: Option<RecordMetrics>,
}

/// Encodes, entropy-codes, decodes, and measures one image.
pub fn evaluate_image(
    model: &IcmModel,
    store: &ParamStore<f32>,
    fe: &FeatureExtractor<f32>,
    x: &Tensor<f32>,
) -> Result<RecordMetrics> {
    let (_, _, h, w) = x.dims4();
    let (padded, orig) = pad_to_stride(x, LATENT_STRIDE);
    let latent = model.encoder.forward(store, &padded);
    let q = quantize_round(&latent);
    let bytes = compress(&q, &model.pm, store, orig)?;
    let (_, payload_len) = StreamHeader::parse(&bytes)?;
    let bpp = 8.0 * payload_len as f64 / (h * w) as f64;
    let (decoded, _) = decompress(&bytes, &model.pm, store)?;
    let recon = model.decoder.forward(store, &decoded);
    let mut xhat = crop_to_size(&recon, h, w);
    xhat.clamp_in_place(0.0, 1.0);

    let a = to_u8_rgb(x);
    let b = to_u8_rgb(&xhat);
    let psnr_db = psnr_u8(&a, &b);
    let ssim = ssim_u8(&a, &b, h, w);
    let energy = checkerboard_energy(&xhat, x);
    // The extractor wants multiples of its stride; both sides get the
    // same reflection padding so the comparison stays aligned.
    let (fx, _) = pad_to_stride(x, INPUT_STRIDE);
    let (fxhat, _) = pad_to_stride(&xhat, INPUT_STRIDE);
    let feature_fidelity = fe.proxy_loss(&fx, &fxhat);
    let perceptual = fe.perceptual_distance(&fx, &fxhat);
    Ok(RecordMetrics {
        bpp,
        psnr_db,
        ssim,
        perceptual,
        feature_fidelity,
        checkerboard_energy: energy,
    })
}

/// Evaluates every `(id, image)` pair; failures are recorded per image
/// without aborting the batch.
pub fn evaluate_checkpoint(
    model: &IcmModel,
    store: &ParamStore<f32>,
    fe: &FeatureExtractor<f32>,
    images: &[(String, Tensor<f32>)],
    configuration: &str,
    config: serde_json::Value,
) -> MetricsReport {
    let mut records = Vec::with_capacity(images.len());
    for (id, x) in images {
        match evaluate_image(model, store, fe, x) {
            Ok(metrics) => records.push(ImageRecord {
                id: id.clone(),
                metrics: Some(metrics),
                error: None,
            }),
            Err(e) => records.push(ImageRecord {
                id: id.clone(),
                metrics: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let mean = mean_metrics(&records);
    MetricsReport {
        configuration: configuration.to_string(),
        checkpoint_hash: crate::checkpoint::store_hash_hex(store),
        extractor_seed: fe.seed(),
        config,
        records,
        mean,
    }
}

fn mean_metrics(records: &[ImageRecord]) -> Option<RecordMetrics> {
    let ok: Vec<&RecordMetrics> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    if ok.is_empty() {
        return None;
    }
    let n = ok.len() as f64;
    let sum = |f: fn(&RecordMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
    Some(RecordMetrics {
        bpp: sum(|m| m.bpp),
        psnr_db: sum(|m| m.psnr_db),
        ssim: sum(|m| m.ssim),
        perceptual: sum(|m| m.perceptual),
        feature_fidelity: sum(|m| m.feature_fidelity),
        checkerboard_energy: sum(|m| m.checkerboard_energy),
    })
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Summary CSV, one row per report. Column order mirrors the headline
/// results table: configuration, machine surrogate, PSNR, SSIM,
/// perceptual.
pub fn write_summary_csv(reports: &[&MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    w.write_record([
        "configuration",
        "feature_fidelity_map_surrogate",
        "psnr_db",
        "ssim",
        "perceptual",
    ])
    .map_err(csv_io(path))?;
    for r in reports {
        let m = r.mean;
        let cell = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        };
        w.write_record([
            r.configuration.clone(),
            cell(m.map(|m| m.feature_fidelity)),
            cell(m.map(|m| m.psnr_db)),
            cell(m.map(|m| m.ssim)),
            cell(m.map(|m| m.perceptual)),
        ])
        .map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}
