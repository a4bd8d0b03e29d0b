//! Throwaway calibration driver (not shipped): trains the criterion-6
//! setup and prints the loss curve plus PSNR milestones.

use std::path::Path;
use std::time::Instant;

use icm::dataset::ingest_dataset;
use icm::run::{train_base, Profile, RunConfig};
use icm_core::image::{from_u8_rgb, to_u8_rgb};
use icm_core::metrics::{checkerboard_energy, psnr_u8};
use icm_core::rng::SeedRng;
use icm_core::tensor::Tensor;

fn write_png(path: &Path, w: u32, h: u32, seed: u64) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let p = seed as f64;
        let r = 127.0 + 110.0 * ((x as f64 * 0.11 + p).sin());
        let g = 127.0 + 110.0 * ((y as f64 * 0.07 + 2.0 * p).sin());
        let b = 127.0 + 110.0 * (((x + y) as f64 * 0.05 + 3.0 * p).cos());
        image::Rgb([r as u8, g as u8, b as u8])
    });
    img.save(path).expect("write test png");
}

fn main() {
    let tmp = tempfile::TempDir::new().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    for i in 0..8u64 {
        write_png(&data.join(format!("img_{i:02}.png")), 80, 80, i + 1);
    }
    let (index, _) = ingest_dataset(&data).unwrap();

    let mut cfg = RunConfig::for_profile(Profile::Tiny);
    cfg.images_per_checkpoint = 80; // 20 steps per checkpoint at batch 4
    cfg.checkpoints = 75; // 1500 steps total
    cfg.seed = 6;
    cfg.learning_rate = 1e-3;
    cfg.weights.w_mse = 128.0;

    // Init-quality probe: roundtrip PSNR of the untrained model.
    {
        use icm_core::codec::{CodecConfig, IcmModel};
        let (store, model) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), cfg.seed).unwrap();
        let img = icm::dataset::load_image_tensor(&index.abs_path(&index.entries[0])).unwrap();
        let mut crop_rng = SeedRng::new(0).fork("probe", 0);
        let crop = icm::dataset::random_crop(&img, 64, &mut crop_rng).unwrap();
        let recon = model.roundtrip(&store, &crop);
        let mse: f64 = recon
            .data()
            .iter()
            .zip(crop.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / recon.data().len() as f64;
        println!("init roundtrip mse {mse:.4}");
    }

    let t0 = Instant::now();
    let out = tmp.path().join("run");
    let trained = train_base(&cfg, &index, &out).unwrap();
    println!("trained {} steps in {:?}", trained.losses.len(), t0.elapsed());

    // Smoothed curve: trailing mean over 25 steps.
    let smooth = |k: usize| -> f64 {
        let lo = k.saturating_sub(24);
        let w = &trained.losses[lo..=k];
        w.iter().map(|p| p.total).sum::<f64>() / w.len() as f64
    };
    let s10 = smooth(10);
    let send = smooth(trained.losses.len() - 1);
    println!("smoothed step-10 {s10:.4} final {send:.4} ratio {:.3}", send / s10);
    for k in [10, 100, 200, 400, 600, 800, 1000, 1499] {
        println!(
            "  step {k}: smoothed {:.4} raw total {:.4} mse {:.5} rate {:.4} proxy {:.4}",
            smooth(k),
            trained.losses[k].total,
            trained.losses[k].mse,
            trained.losses[k].rate_bpp,
            trained.losses[k].proxy
        );
    }

    // PSNR + checkerboard on deterministic training crops.
    let rng = SeedRng::new(cfg.seed);
    let mut psnrs = Vec::new();
    let mut energies = Vec::new();
    for (i, entry) in index.entries.iter().enumerate() {
        let img = icm::dataset::load_image_tensor(&index.abs_path(entry)).unwrap();
        let mut crop_rng = rng.fork("calib_crop", i as u64);
        let crop = icm::dataset::random_crop(&img, 64, &mut crop_rng).unwrap();
        let mut recon = trained.model.roundtrip(&trained.store, &crop);
        recon.clamp_in_place(0.0, 1.0);
        let a = to_u8_rgb(&crop);
        let b = to_u8_rgb(&recon);
        psnrs.push(psnr_u8(&a, &b));
        energies.push(checkerboard_energy(&recon, &crop));
    }
    psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("psnr per crop: {psnrs:.3?}");
    println!("mean psnr {:.3}", psnrs.iter().sum::<f64>() / psnrs.len() as f64);
    println!("checkerboard energies: {energies:.4?}");
    println!("median energy {:.4}", energies[energies.len() / 2]);

    // Head-perturbation probe: how much noise pushes the median
    // checkerboard ratio past 0.2, and what it costs in PSNR.
    for scale in [0.1, 0.2, 0.4, 0.8, 1.6] {
        let mut store = trained.store.clone();
        let mut prng = SeedRng::new(99).fork("perturb", (scale * 10.0) as u64);
        icm_core::codec::perturb_decoder_head(&mut store, &mut prng, scale);
        let mut psnrs = Vec::new();
        let mut energies = Vec::new();
        for (i, entry) in index.entries.iter().enumerate() {
            let img = icm::dataset::load_image_tensor(&index.abs_path(entry)).unwrap();
            let mut crop_rng = rng.fork("calib_crop", i as u64);
            let crop = icm::dataset::random_crop(&img, 64, &mut crop_rng).unwrap();
            let mut recon = trained.model.roundtrip(&store, &crop);
            recon.clamp_in_place(0.0, 1.0);
            psnrs.push(psnr_u8(&to_u8_rgb(&crop), &to_u8_rgb(&recon)));
            energies.push(checkerboard_energy(&recon, &crop));
        }
        psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "perturb scale {scale}: median energy {:.4} median psnr {:.2} energies {:.3?}",
            energies[energies.len() / 2],
            psnrs[psnrs.len() / 2],
            energies
        );
    }

    // Keep the checkpoint dir around for follow-up probes.
    let keep = Path::new("/tmp/calib_run");
    let _ = std::fs::remove_dir_all(keep);
    std::fs::rename(&out, keep).unwrap();
    std::fs::rename(&data, "/tmp/calib_data").ok();
    println!("kept checkpoints at {keep:?} and data at /tmp/calib_data");
}
