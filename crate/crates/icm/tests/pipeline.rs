//! End-to-end coverage of the filesystem pipeline: dataset ingestion,
//! checkpoint persistence, file coding, report emission, and the CLI
//! binary itself.

use std::fs;
use std::path::Path;
use std::process::Command;

use icm::checkpoint::{checkpoint_dir, load_checkpoint, save_checkpoint, store_hash_hex};
use icm::dataset::{ingest_dataset, load_image_tensor, random_crop};
use icm::eval::{
    evaluate_checkpoint, read_report_json, write_report_json, write_summary_csv, ImageRecord,
    MetricsReport, RecordMetrics,
};
use icm::finetune::{finetune_run, FinetuneRunConfig};
use icm::run::{train_base, Profile, RunConfig, EXTRACTOR_SEED};
use icm::PipelineError;
use icm_core::codec::{CodecConfig, IcmModel};
use icm_core::gan::FinetuneConfig;
use icm_core::losses::FeatureExtractor;
use icm_core::rng::SeedRng;
use tempfile::TempDir;

/// Deterministic RGB test image: smooth gradients plus a seed-dependent
/// phase so files differ across seeds but never across runs.
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

fn make_dataset(dir: &Path, sizes: &[(u32, u32)]) {
    fs::create_dir_all(dir).unwrap();
    for (i, &(w, h)) in sizes.iter().enumerate() {
        write_png(&dir.join(format!("img_{i:02}.png")), w, h, i as u64 + 1);
    }
}

/// Persists a freshly initialized tiny model as a base checkpoint.
fn save_fresh_checkpoint(dir: &Path, seed: u64) -> (icm_core::nn::ParamStore<f32>, IcmModel) {
    let (store, model) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), seed).unwrap();
    save_checkpoint(
        dir,
        &store,
        CodecConfig::tiny(),
        "base",
        0,
        seed,
        EXTRACTOR_SEED,
        serde_json::json!({}),
    )
    .unwrap();
    (store, model)
}

fn icm_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icm"))
}

#[test]
fn ingest_indexes_images_and_warns_on_undecodable_files() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("data");
    make_dataset(&root, &[(48, 48), (64, 48), (80, 96)]);
    fs::write(root.join("broken.png"), b"not actually a png").unwrap();
    fs::write(root.join("notes.txt"), b"ignored entirely").unwrap();

    let (index, warnings) = ingest_dataset(&root).unwrap();
    assert_eq!(index.entries.len(), 3);
    assert_eq!(warnings.len(), 1, "one undecodable file: {warnings:?}");
    assert!(warnings[0].contains("broken.png"));
    // Entries are sorted by relative path and carry real dimensions.
    assert_eq!(index.entries[0].path, "img_00.png");
    assert_eq!(index.entries[1].width, 64);
    assert_eq!(index.entries[1].height, 48);
}

#[test]
fn ingest_rejects_directories_without_images() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("empty");
    fs::create_dir_all(&root).unwrap();
    let err = ingest_dataset(&root).unwrap_err();
    assert!(matches!(err, PipelineError::Dataset(_)), "got {err}");
}

#[test]
fn index_hash_ignores_the_dataset_location() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("elsewhere").join("b");
    make_dataset(&a, &[(48, 48), (64, 64)]);
    fs::create_dir_all(b.parent().unwrap()).unwrap();
    make_dataset(&b, &[(48, 48), (64, 64)]);

    let (ia, _) = ingest_dataset(&a).unwrap();
    let (ib, _) = ingest_dataset(&b).unwrap();
    assert_eq!(ia.index_hash(), ib.index_hash());

    // Same root twice is trivially stable too.
    let (ia2, _) = ingest_dataset(&a).unwrap();
    assert_eq!(ia.index_hash(), ia2.index_hash());
}

#[test]
fn random_crop_is_reproducible_and_checks_bounds() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("img.png");
    write_png(&file, 56, 40, 3);
    let x = load_image_tensor(&file).unwrap();

    let mut r1 = SeedRng::new(11).fork("crop", 0);
    let mut r2 = SeedRng::new(11).fork("crop", 0);
    let c1 = random_crop(&x, 32, &mut r1).unwrap();
    let c2 = random_crop(&x, 32, &mut r2).unwrap();
    assert_eq!(c1.dims4(), (1, 3, 32, 32));
    assert_eq!(c1.data(), c2.data());

    let err = random_crop(&x, 64, &mut r1).unwrap_err();
    assert!(matches!(err, PipelineError::Dataset(_)), "got {err}");
}

#[test]
fn checkpoint_round_trip_restores_every_parameter() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("ckpt");
    let (store, _) = save_fresh_checkpoint(&dir, 9);

    let (loaded, _, manifest) = load_checkpoint(&dir).unwrap();
    assert_eq!(manifest.store_hash, store_hash_hex(&store));
    assert_eq!(manifest.store_hash, store_hash_hex(&loaded));
    assert_eq!(manifest.kind, "base");
    assert_eq!(manifest.extractor_seed, EXTRACTOR_SEED);
}

#[test]
fn checkpoint_load_detects_tampered_parameters() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("ckpt");
    save_fresh_checkpoint(&dir, 10);

    let blob = dir.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&blob, bytes).unwrap();

    let err = load_checkpoint(&dir).unwrap_err();
    assert!(matches!(err, PipelineError::Checkpoint(_)), "got {err}");
}

#[test]
fn encode_decode_files_round_trip_dimensions() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    save_fresh_checkpoint(&ckpt, 4);

    // Deliberately not multiples of the latent stride.
    let input = tmp.path().join("in.png");
    write_png(&input, 56, 40, 7);
    let bits = tmp.path().join("out.icmb");
    let output = tmp.path().join("out.png");

    let (payload, pixels) = icm::codecfile::encode_file(&ckpt, &input, &bits).unwrap();
    assert!(payload > 0);
    assert_eq!(pixels, 56 * 40);
    let (h, w) = icm::codecfile::decode_file(&ckpt, &bits, &output).unwrap();
    assert_eq!((h, w), (40, 56));
    let round = image::open(&output).unwrap();
    assert_eq!((round.width(), round.height()), (56, 40));
}

#[test]
fn decode_rejects_a_corrupted_bitstream() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("ckpt");
    save_fresh_checkpoint(&ckpt, 4);
    let input = tmp.path().join("in.png");
    write_png(&input, 48, 48, 2);
    let bits = tmp.path().join("out.icmb");
    icm::codecfile::encode_file(&ckpt, &input, &bits).unwrap();

    let mut bytes = fs::read(&bits).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff; // breaks the trailing checksum
    fs::write(&bits, bytes).unwrap();

    let err = icm::codecfile::decode_file(&ckpt, &bits, &tmp.path().join("x.png")).unwrap_err();
    assert_eq!(err.kind(), "bitstream");
}

#[test]
fn evaluating_no_images_yields_an_empty_report() {
    let (store, model) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), 2).unwrap();
    let fe = FeatureExtractor::<f32>::new(EXTRACTOR_SEED);
    let report = evaluate_checkpoint(&model, &store, &fe, &[], "empty", serde_json::json!({}));
    assert!(report.records.is_empty());
    assert!(report.mean.is_none());
    assert_eq!(report.configuration, "empty");
    assert_eq!(report.checkpoint_hash, store_hash_hex(&store));
}

#[test]
fn report_json_round_trips_exactly() {
    let tmp = TempDir::new().unwrap();
    let report = MetricsReport {
        configuration: "unit".into(),
        checkpoint_hash: "f00d".into(),
        extractor_seed: EXTRACTOR_SEED,
        config: serde_json::json!({"profile": "tiny"}),
        records: vec![ImageRecord {
            id: "a.png".into(),
            metrics: Some(RecordMetrics {
                bpp: 0.5,
                psnr_db: 30.0,
                ssim: 0.9,
                perceptual: 0.1,
                feature_fidelity: 0.2,
                checkerboard_energy: 0.05,
            }),
            error: None,
        }],
        mean: None,
    };
    let path = tmp.path().join("report.json");
    write_report_json(&report, &path).unwrap();
    let back = read_report_json(&path).unwrap();
    assert_eq!(back.configuration, report.configuration);
    assert_eq!(back.records.len(), 1);
    assert_eq!(back.records[0].metrics, report.records[0].metrics);
}

#[test]
fn summary_csv_columns_are_pinned() {
    let tmp = TempDir::new().unwrap();
    let mk = |label: &str, fid: f64| MetricsReport {
        configuration: label.into(),
        checkpoint_hash: String::new(),
        extractor_seed: EXTRACTOR_SEED,
        config: serde_json::json!({}),
        records: vec![ImageRecord {
            id: "a".into(),
            metrics: Some(RecordMetrics {
                bpp: 0.5,
                psnr_db: 31.25,
                ssim: 0.875,
                perceptual: 0.125,
                feature_fidelity: fid,
                checkerboard_energy: 0.0,
            }),
            error: None,
        }],
        mean: Some(RecordMetrics {
            bpp: 0.5,
            psnr_db: 31.25,
            ssim: 0.875,
            perceptual: 0.125,
            feature_fidelity: fid,
            checkerboard_energy: 0.0,
        }),
    };
    let a = mk("base", 0.25);
    let b = mk("finetuned", 0.125);
    let path = tmp.path().join("summary.csv");
    write_summary_csv(&[&a, &b], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "configuration,feature_fidelity_map_surrogate,psnr_db,ssim,perceptual"
    );
    assert!(lines.next().unwrap().starts_with("base,0.25"));
    assert!(lines.next().unwrap().starts_with("finetuned,0.125"));
}

#[test]
fn train_zero_checkpoints_saves_initial_weights_only() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(48, 48)]);
    let (index, _) = ingest_dataset(&data).unwrap();

    let mut cfg = RunConfig::for_profile(Profile::Tiny);
    cfg.crop = 32;
    cfg.checkpoints = 0;
    cfg.seed = 21;
    let out = tmp.path().join("run");
    let trained = train_base(&cfg, &index, &out).unwrap();
    assert!(trained.losses.is_empty());
    assert_eq!(trained.checkpoint_dirs, vec![checkpoint_dir(&out, 0)]);

    // The persisted weights are the seeded initialization, untouched.
    let (fresh, _) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), 21).unwrap();
    let (loaded, _, manifest) = load_checkpoint(&trained.checkpoint_dirs[0]).unwrap();
    assert_eq!(store_hash_hex(&loaded), store_hash_hex(&fresh));
    assert_eq!(manifest.step, 0);
    assert!(out.join("losses.csv").exists());
}

#[test]
fn finetune_zero_checkpoints_passes_the_base_through() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(80, 80), (80, 96)]);
    let (index, _) = ingest_dataset(&data).unwrap();

    let base = tmp.path().join("base");
    let (store, _) = save_fresh_checkpoint(&base, 33);

    let mut codec = FinetuneConfig::default();
    codec.checkpoints = 0;
    codec.patch_size = 32;
    let mut cfg = FinetuneRunConfig::tiny_defaults(codec);
    cfg.crop = 48;
    cfg.eval_images = 1;

    let out = tmp.path().join("ft");
    let outcome = finetune_run(&base, &index, &cfg, &out).unwrap();
    assert!(outcome.log.is_empty());
    assert_eq!(outcome.manifest.checkpoints, vec!["ckpt_0000".to_string()]);
    assert!(outcome.manifest.snapshots.is_empty());
    assert_eq!(outcome.manifest.best_checkpoint, None);
    assert_eq!(outcome.manifest.base_checkpoint_hash, store_hash_hex(&store));

    // Weights come through bit-identical, re-badged as a finetune kind.
    let (loaded, _, manifest) = load_checkpoint(&checkpoint_dir(&out, 0)).unwrap();
    assert_eq!(store_hash_hex(&loaded), store_hash_hex(&store));
    assert_eq!(manifest.kind, "finetune");
    assert!(out.join("finetune_run.json").exists());
}

#[test]
fn compare_emits_one_grid_per_image() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(64, 48), (48, 64), (48, 48)]);
    let (index, _) = ingest_dataset(&data).unwrap();

    let a = tmp.path().join("ckpt_a");
    let b = tmp.path().join("ckpt_b");
    save_fresh_checkpoint(&a, 1);
    save_fresh_checkpoint(&b, 2);

    let out = tmp.path().join("grids");
    let manifest = icm::compare::compare_checkpoints(
        &[("base".into(), a), ("tuned".into(), b)],
        &index,
        2,
        32,
        &out,
    )
    .unwrap();
    assert_eq!(manifest.grids.len(), 2);
    assert_eq!(manifest.checkpoints, vec!["base", "tuned"]);
    for grid in &manifest.grids {
        assert_eq!(grid.panels.len(), 3, "source + two checkpoints");
        assert_eq!(grid.panels[0], "source");
        assert_eq!(grid.tile_energy.len(), 2);
        let png = out.join(&grid.file);
        let img = image::open(&png).unwrap();
        // Three 32px panels plus two separators.
        assert_eq!(img.width(), 3 * 32 + 2 * 2);
        assert_eq!(img.height(), 32);
    }
    assert!(out.join("compare.json").exists());
}

#[test]
fn cli_runs_the_full_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(48, 48), (48, 64), (64, 48)]);

    // ingest
    let out = icm_bin()
        .args(["ingest", "--dataset"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("single JSON line on stdout");
    assert_eq!(line["images"], 3);

    // train: one checkpoint, two images, one optimizer step each.
    let run = tmp.path().join("run");
    let out = icm_bin()
        .args(["train", "--profile", "tiny", "--crop", "32"])
        .args(["--images-per-checkpoint", "2", "--batch", "2"])
        .args(["--checkpoints", "1", "--seed", "7"])
        .arg("--dataset")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("ckpt_0000");
    assert!(ckpt.join("manifest.json").exists());

    // encode + decode
    let bits = tmp.path().join("img.icmb");
    let out = icm_bin()
        .args(["encode", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("img_00.png"))
        .arg("--out")
        .arg(&bits)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(line["bpp"].as_f64().unwrap() > 0.0);

    let decoded = tmp.path().join("img_rt.png");
    let out = icm_bin()
        .args(["decode", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&bits)
        .arg("--out")
        .arg(&decoded)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(image::open(&decoded).unwrap().width(), 48);

    // eval
    let evaldir = tmp.path().join("eval");
    let out = icm_bin()
        .args(["eval", "--max-images", "2", "--label", "smoke", "--checkpoint"])
        .arg(&ckpt)
        .arg("--dataset")
        .arg(&data)
        .arg("--out")
        .arg(&evaldir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(evaldir.join("report.json").exists());
    assert!(evaldir.join("report.csv").exists());
    let report = read_report_json(&evaldir.join("report.json")).unwrap();
    assert_eq!(report.configuration, "smoke");
    assert_eq!(report.records.len(), 2);
    assert!(report.mean.is_some());
}

#[test]
fn cli_failures_emit_one_machine_readable_line() {
    let out = icm_bin()
        .args(["train", "--dataset", "/definitely/not/here", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    let parsed: serde_json::Value =
        serde_json::from_str(line).expect("stderr line parses as JSON");
    assert_eq!(parsed["kind"], "dataset");
    assert!(parsed["error"].as_str().unwrap().contains("not a directory"));
}

#[test]
fn cli_flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(48, 48)]);

    // File asks for seed 5 and zero checkpoints; the flag forces seed 9.
    let cfgfile = tmp.path().join("train.json");
    fs::write(
        &cfgfile,
        serde_json::json!({"seed": 5, "checkpoints": 0, "crop": 32}).to_string(),
    )
    .unwrap();

    let run = tmp.path().join("run");
    let out = icm_bin()
        .args(["train", "--seed", "9", "--config"])
        .arg(&cfgfile)
        .arg("--dataset")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("ckpt_0000/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 9, "flag beats config file");
    assert_eq!(manifest["config"]["crop"], 32, "file beats default");
    assert_eq!(manifest["config"]["checkpoints"], 0);
}

#[test]
fn cli_rejects_unknown_config_keys() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(48, 48)]);
    let cfgfile = tmp.path().join("bad.json");
    fs::write(&cfgfile, r#"{"sede": 5}"#).unwrap();

    let out = icm_bin()
        .args(["train", "--config"])
        .arg(&cfgfile)
        .arg("--dataset")
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["kind"], "serialization");
    assert!(parsed["error"].as_str().unwrap().contains("sede"));
}

/// A short real finetune drive: two checkpoints, snapshots at each, and
/// the manifest's best pointer lands on one of them.
#[test]
fn finetune_run_persists_checkpoints_and_snapshots() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, &[(80, 80), (96, 80)]);
    let (index, _) = ingest_dataset(&data).unwrap();

    let base = tmp.path().join("base");
    save_fresh_checkpoint(&base, 12);

    let mut codec = FinetuneConfig::default();
    codec.checkpoints = 2;
    codec.steps_per_checkpoint = 2;
    codec.patch_size = 32;
    codec.seed = 12;
    let mut cfg = FinetuneRunConfig::tiny_defaults(codec);
    cfg.crop = 48;
    cfg.batch = 2;
    cfg.eval_every = 1;
    cfg.eval_images = 1;

    let out = tmp.path().join("ft");
    let outcome = finetune_run(&base, &index, &cfg, &out).unwrap();
    assert_eq!(outcome.checkpoint_dirs.len(), 2);
    assert_eq!(outcome.log.len(), 4, "2 checkpoints x 2 steps");
    let steps: Vec<u64> = outcome.log.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4], "monotone step counter");
    assert_eq!(outcome.manifest.snapshots.len(), 2);
    assert!(outcome.manifest.best_checkpoint.is_some());
    for dir in &outcome.checkpoint_dirs {
        assert!(dir.join("manifest.json").exists());
        assert!(dir.join("metrics.json").exists());
    }
}
