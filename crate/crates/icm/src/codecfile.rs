//! File-level encode/decode: image file to `.icmb` bitstream and back.

use std::fs;
use std::path::Path;

use icm_core::codec::quantize::quantize_round;
use icm_core::codec::LATENT_STRIDE;
use icm_core::entropy::{compress, decompress};
use icm_core::image::{crop_to_size, pad_to_stride, to_u8_rgb};

use crate::checkpoint::load_checkpoint;
use crate::dataset::load_image_tensor;
use crate::error::{PipelineError, Result};

/// Encodes one image file into a bitstream file using the checkpoint's
/// codec; returns (payload bytes, source pixels).
pub fn encode_file(ckpt: &Path, input: &Path, output: &Path) -> Result<(u64, usize)> {
    let (store, model, _) = load_checkpoint(ckpt)?;
    let x = load_image_tensor(input)?;
    let (_, _, h, w) = x.dims4();
    let (padded, orig) = pad_to_stride(&x, LATENT_STRIDE);
    let latent = model.encoder.forward(&store, &padded);
    let q = quantize_round(&latent);
    let bytes = compress(&q, &model.pm, &store, orig)?;
    let (_, payload_len) = icm_core::entropy::StreamHeader::parse(&bytes)?;
    fs::write(output, &bytes).map_err(|e| PipelineError::io(output, e))?;
    Ok((payload_len, h * w))
}

/// Decodes a bitstream file into an 8-bit image file; the output format
/// follows the extension (PNG for lossless).
pub fn decode_file(ckpt: &Path, input: &Path, output: &Path) -> Result<(usize, usize)> {
    let (store, model, _) = load_checkpoint(ckpt)?;
    let bytes = fs::read(input).map_err(|e| PipelineError::io(input, e))?;
    let (latent, header) = decompress(&bytes, &model.pm, &store)?;
    let recon = model.decoder.forward(&store, &latent);
    let (h, w) = (header.orig_h as usize, header.orig_w as usize);
    let mut xhat = crop_to_size(&recon, h, w);
    xhat.clamp_in_place(0.0, 1.0);
    let rgb = to_u8_rgb(&xhat);
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer sized from decoded dims");
    img.save(output).map_err(|e| PipelineError::Image {
        path: output.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h, w))
}
