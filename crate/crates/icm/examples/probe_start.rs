fn main() {
    use icm_core::codec::{CodecConfig, IcmModel};
    use icm_core::codec::quantize::quantize_round;
    use icm_core::metrics::checkerboard_energy;
    use icm_core::tensor::Tensor;
    use icm_core::train::imprint_checkerboard_until;
    let mk = |k: usize, size: usize| {
        let mut t = Tensor::<f32>::zeros(&[1, 3, size, size]);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let v = 0.5 + 0.35 * (0.05 * (x as f64 + 2.0 * y as f64) + (c + k) as f64).sin();
                    t.data_mut()[(c * size + y) * size + x] = v as f32;
                }
            }
        }
        t
    };
    for seed in [3u64, 8] {
        let (mut store, model) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), seed).unwrap();
        let crops = vec![mk(0, 32), mk(1, 32)];
        let q = quantize_round(&model.encoder.forward(&store, &crops[0]));
        let xhat = model.decoder.forward(&store, &q);
        let start = checkerboard_energy(&xhat, &crops[0]);
        let t0 = std::time::Instant::now();
        let (steps, ratio) =
            imprint_checkerboard_until(&mut store, &model, &crops, 0.3, 1e-2, 200, 0.6).unwrap();
        println!("seed {seed}: start {start:.4} -> steps {steps} ratio {ratio:.4} ({:?})", t0.elapsed());
    }
}
