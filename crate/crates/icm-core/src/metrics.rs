//! Image quality metrics: PSNR and SSIM on 8-bit RGB, plus a spectral
//! measure of checkerboard artifact energy on float images.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{luminance, luminance_u8};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Fraction of the Nyquist half-band treated as "checkerboard": folded
/// frequencies within 0.05 of 0.5 cycles/pixel along either axis.
const NYQUIST_BAND: f64 = 0.45;

/// Peak signal-to-noise ratio over interleaved 8-bit buffers, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr_u8(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr inputs must match");
    assert!(!a.is_empty());
    let mut se = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * libm::log10(255.0 * 255.0 / mse)).min(PSNR_CAP_DB)
}

fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..len)
        .map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable filtering: rows then columns with one kernel.
fn separable_filter(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Window side used for an `h` x `w` image: 11 shrunk to fit small
/// images, always odd.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win.is_multiple_of(2) {
        win -= 1;
    }
    win.max(1)
}

/// Mean structural similarity between two interleaved 8-bit RGB images,
/// computed on the luminance plane with a Gaussian window.
pub fn ssim_u8(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), h * w * 3, "ssim expects interleaved RGB");
    assert_eq!(a.len(), b.len(), "ssim inputs must match");
    let la = luminance_u8(a);
    let lb = luminance_u8(b);
    ssim_luma(&la, &lb, h, w)
}

fn ssim_luma(la: &[f64], lb: &[f64], h: usize, w: usize) -> f64 {
    let win = ssim_window(h, w);
    let kernel = gaussian_kernel(win, SSIM_SIGMA);
    let n = h * w;
    let mut aa = vec![0.0f64; n];
    let mut bb = vec![0.0f64; n];
    let mut ab = vec![0.0f64; n];
    for i in 0..n {
        aa[i] = la[i] * la[i];
        bb[i] = lb[i] * lb[i];
        ab[i] = la[i] * lb[i];
    }
    let mu_a = separable_filter(la, h, w, &kernel);
    let mu_b = separable_filter(lb, h, w, &kernel);
    let m_aa = separable_filter(&aa, h, w, &kernel);
    let m_bb = separable_filter(&bb, h, w, &kernel);
    let m_ab = separable_filter(&ab, h, w, &kernel);

    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Indices whose folded frequency `min(k, n-k)/n` reaches the Nyquist
/// band.
fn band_indices(n: usize) -> Vec<usize> {
    (0..n)
        .filter(|&k| {
            let folded = k.min(n - k) as f64 / n as f64;
            folded >= NYQUIST_BAND
        })
        .collect()
}

/// Fraction of residual luminance energy concentrated near the Nyquist
/// frequency along either axis: 1.0 means a pure checkerboard residual,
/// 0.0 a spectrally smooth one (or none at all).
///
/// The band energy is the union of "row frequency in band" and "column
/// frequency in band", assembled by inclusion-exclusion from partial
/// discrete Fourier transforms; the total comes from Parseval's theorem,
/// so no full 2-D transform is needed.
pub fn checkerboard_energy<S: Scalar>(xhat: &Tensor<S>, x: &Tensor<S>) -> f64 {
    assert_eq!(xhat.shape(), x.shape(), "checkerboard inputs must match");
    let (_, _, h, w) = x.dims4();
    let lhat = luminance(xhat);
    let lx = luminance(x);
    let g: Vec<f64> = lhat.iter().zip(&lx).map(|(a, b)| a - b).collect();

    let total: f64 = g.iter().map(|v| v * v).sum();
    if total <= 1e-24 {
        return 0.0;
    }
    let total_spectral = (h * w) as f64 * total;

    let by = band_indices(h);
    let bx = band_indices(w);

    // G[j, x]: transform down each column, only at band rows.
    let mut col_dft = vec![(0.0f64, 0.0f64); by.len() * w];
    for (j, &ky) in by.iter().enumerate() {
        let step = -2.0 * core::f64::consts::PI * ky as f64 / h as f64;
        for y in 0..h {
            let (s, c) = libm::sincos(step * y as f64);
            for xi in 0..w {
                let v = g[y * w + xi];
                let cell = &mut col_dft[j * w + xi];
                cell.0 += v * c;
                cell.1 += v * s;
            }
        }
    }
    // Parseval along x: summing |G|^2 over all columns counts every kx.
    let mut e_rows = 0.0f64;
    for cell in &col_dft {
        e_rows += cell.0 * cell.0 + cell.1 * cell.1;
    }
    e_rows *= w as f64;

    let mut e_cols = 0.0f64;
    for &kx in &bx {
        let step = -2.0 * core::f64::consts::PI * kx as f64 / w as f64;
        let mut trig = Vec::with_capacity(w);
        for xi in 0..w {
            trig.push(libm::sincos(step * xi as f64));
        }
        for y in 0..h {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for xi in 0..w {
                let v = g[y * w + xi];
                re += v * trig[xi].1;
                im += v * trig[xi].0;
            }
            e_cols += re * re + im * im;
        }
    }
    e_cols *= h as f64;

    // The corner (both axes in band) was counted twice: finish the row
    // transforms at just the band columns.
    let mut e_corner = 0.0f64;
    for j in 0..by.len() {
        for &kx in &bx {
            let step = -2.0 * core::f64::consts::PI * kx as f64 / w as f64;
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for xi in 0..w {
                let (s, c) = libm::sincos(step * xi as f64);
                let cell = col_dft[j * w + xi];
                re += cell.0 * c - cell.1 * s;
                im += cell.0 * s + cell.1 * c;
            }
            e_corner += re * re + im * im;
        }
    }

    ((e_rows + e_cols - e_corner) / total_spectral).clamp(0.0, 1.0)
}
