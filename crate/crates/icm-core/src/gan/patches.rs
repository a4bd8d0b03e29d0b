//! Patch extraction for the discriminator: real and fake patches share
//! coordinates so the classifier sees aligned content.

use alloc::vec::Vec;

use crate::error::TrainError;
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Top-left corner of one square patch inside one batch image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCoord {
    pub img: usize,
    pub y: usize,
    pub x: usize,
}

/// Uniformly samples `per_image` top-left corners for every batch image.
pub fn sample_patch_coords(
    rng: &mut SeedRng,
    n_images: usize,
    hw: (usize, usize),
    patch: usize,
    per_image: usize,
) -> Result<Vec<PatchCoord>, TrainError> {
    let (h, w) = hw;
    if patch == 0 || patch > h || patch > w {
        return Err(TrainError::Config(alloc::format!(
            "patch size {patch} does not fit a {h}x{w} image"
        )));
    }
    let mut coords = Vec::with_capacity(n_images * per_image);
    for img in 0..n_images {
        for _ in 0..per_image {
            coords.push(PatchCoord {
                img,
                y: rng.below(h - patch + 1),
                x: rng.below(w - patch + 1),
            });
        }
    }
    Ok(coords)
}

/// Copies the listed patches out of `x` into one `[n_patches, c, p, p]`
/// tensor, in coordinate order.
pub fn gather_patches<S: Scalar>(x: &Tensor<S>, coords: &[PatchCoord], patch: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[coords.len(), c, patch, patch]);
    let xd = x.data();
    let od = out.data_mut();
    for (pi, co) in coords.iter().enumerate() {
        assert!(co.img < n && co.y + patch <= h && co.x + patch <= w, "patch out of bounds");
        for ci in 0..c {
            for py in 0..patch {
                let src = ((co.img * c + ci) * h + co.y + py) * w + co.x;
                let dst = ((pi * c + ci) * patch + py) * patch;
                od[dst..dst + patch].copy_from_slice(&xd[src..src + patch]);
            }
        }
    }
    out
}

/// Adjoint of `gather_patches`: accumulates patch gradients back into a
/// full-image gradient tensor, summing where patches overlap.
pub fn scatter_patch_grads<S: Scalar>(
    gpatches: &Tensor<S>,
    coords: &[PatchCoord],
    image_shape: &[usize],
) -> Tensor<S> {
    let mut out = Tensor::zeros(image_shape);
    let (n, c, h, w) = out.dims4();
    let (np, pc, ph, pw) = gpatches.dims4();
    assert_eq!(np, coords.len());
    assert_eq!(pc, c);
    assert_eq!(ph, pw, "square patches");
    let patch = ph;
    let gd = gpatches.data();
    let od = out.data_mut();
    for (pi, co) in coords.iter().enumerate() {
        assert!(co.img < n && co.y + patch <= h && co.x + patch <= w, "patch out of bounds");
        for ci in 0..c {
            for py in 0..patch {
                let dst = ((co.img * c + ci) * h + co.y + py) * w + co.x;
                let src = ((pi * c + ci) * patch + py) * patch;
                for px in 0..patch {
                    od[dst + px] += gd[src + px];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_stay_inside_valid_range() {
        let mut rng = SeedRng::new(3);
        let coords = sample_patch_coords(&mut rng, 4, (100, 70), 64, 3).unwrap();
        assert_eq!(coords.len(), 12);
        for co in &coords {
            assert!(co.y <= 36 && co.x <= 6);
        }
    }

    #[test]
    fn patch_equal_to_image_pins_the_corner() {
        let mut rng = SeedRng::new(4);
        let coords = sample_patch_coords(&mut rng, 2, (64, 64), 64, 5).unwrap();
        assert!(coords.iter().all(|co| co.y == 0 && co.x == 0));
    }

    #[test]
    fn oversized_patch_is_a_config_error() {
        let mut rng = SeedRng::new(4);
        let err = sample_patch_coords(&mut rng, 1, (48, 80), 64, 1).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn same_seed_gives_identical_coordinates() {
        let a = sample_patch_coords(&mut SeedRng::new(9), 3, (128, 128), 32, 3).unwrap();
        let b = sample_patch_coords(&mut SeedRng::new(9), 3, (128, 128), 32, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gather_reads_the_addressed_pixels() {
        let mut x = Tensor::<f32>::zeros(&[2, 1, 4, 5]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let coords = [
            PatchCoord { img: 1, y: 2, x: 3 },
            PatchCoord { img: 0, y: 0, x: 0 },
        ];
        let p = gather_patches(&x, &coords, 2);
        assert_eq!(p.shape(), &[2, 1, 2, 2]);
        // Image 1 starts at flat offset 20; row 2 col 3 is 20 + 13.
        assert_eq!(p.data()[..4], [33.0, 34.0, 38.0, 39.0]);
        assert_eq!(p.data()[4..], [0.0, 1.0, 5.0, 6.0]);
    }

    #[test]
    fn scatter_is_the_adjoint_of_gather() {
        // <gather(x), u> == <x, scatter(u)> for random x, u, including
        // overlapping patches.
        let mut rng = SeedRng::new(11);
        let shape = [2usize, 3, 9, 9];
        let mut x = Tensor::<f64>::zeros(&shape);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        let coords = sample_patch_coords(&mut rng, 2, (9, 9), 4, 3).unwrap();
        let px = gather_patches(&x, &coords, 4);
        let mut u = Tensor::<f64>::zeros(px.shape());
        for v in u.data_mut() {
            *v = rng.normal();
        }
        let xu = scatter_patch_grads(&u, &coords, &shape);
        let lhs: f64 = px.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xu.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
