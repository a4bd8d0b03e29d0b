//! Image-domain helpers: padding, cropping, color conversion, and 8-bit
//! quantization. Images are `[1, 3, H, W]` tensors with values in [0, 1].

use alloc::vec::Vec;

use crate::nn::ops::{crop_nchw, pad_reflect_rb};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pads bottom/right by reflection until both dimensions are multiples of
/// `stride`; returns the padded tensor and the original size.
pub fn pad_to_stride<S: Scalar>(x: &Tensor<S>, stride: usize) -> (Tensor<S>, (usize, usize)) {
    let (_, _, h, w) = x.dims4();
    let pb = (stride - h % stride) % stride;
    let pr = (stride - w % stride) % stride;
    if pb == 0 && pr == 0 {
        (x.clone(), (h, w))
    } else {
        (pad_reflect_rb(x, pb, pr), (h, w))
    }
}

/// Crops a padded reconstruction back to the original size.
pub fn crop_to_size<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    crop_nchw(x, h, w)
}

/// Quantizes a [0,1] float image to interleaved 8-bit RGB, the reference
/// domain for PSNR/SSIM. Rounds half away from zero after clamping.
pub fn to_u8_rgb<S: Scalar>(x: &Tensor<S>) -> Vec<u8> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(n, 1, "single image expected");
    assert_eq!(c, 3, "RGB expected");
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 3);
    for i in 0..plane {
        for ch in 0..3 {
            let v = x.data()[ch * plane + i].to_f64().clamp(0.0, 1.0);
            out.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    out
}

/// BT.601 luminance of a [0,1] float image, kept in floating point.
pub fn luminance<S: Scalar>(x: &Tensor<S>) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(n, 1, "single image expected");
    assert_eq!(c, 3, "RGB expected");
    let plane = h * w;
    let d = x.data();
    (0..plane)
        .map(|i| {
            0.299 * d[i].to_f64() + 0.587 * d[plane + i].to_f64() + 0.114 * d[2 * plane + i].to_f64()
        })
        .collect()
}

/// BT.601 luminance computed on the 8-bit quantized image (0..255 scale).
pub fn luminance_u8(rgb: &[u8]) -> Vec<f64> {
    assert_eq!(rgb.len() % 3, 0);
    rgb.chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Builds a `[1, 3, H, W]` tensor from interleaved 8-bit RGB.
pub fn from_u8_rgb<S: Scalar>(rgb: &[u8], h: usize, w: usize) -> Tensor<S> {
    assert_eq!(rgb.len(), h * w * 3, "pixel buffer size");
    let plane = h * w;
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for i in 0..plane {
        for ch in 0..3 {
            t.data_mut()[ch * plane + i] = S::from_f64(rgb[i * 3 + ch] as f64 / 255.0);
        }
    }
    t
}
