//! Base training: rate + distortion + task-proxy descent over all four
//! codec partitions (encoder, probability model, decoder head and tail).

use alloc::vec::Vec;

use crate::codec::quantize::quantize_noisy;
use crate::codec::IcmModel;
use crate::error::TrainError;
use crate::losses::{mse_grad_wrt_first, tensor_mse, FeatureExtractor, LossBreakdown, LossWeights};
use crate::nn::{par_map, Gradients, ParamStore, Partition};
use crate::optim::Adam;
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Partitions updated during base training.
pub const BASE_TRAINABLE: [Partition; 4] = [
    Partition::Encoder,
    Partition::ProbabilityModel,
    Partition::DecoderHead,
    Partition::DecoderTail,
];

/// Averaged loss terms plus diagnostics for one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub grad_max: f64,
}

/// Runs one optimizer step on a batch of `[1, 3, H, W]` crops whose dims
/// are multiples of 16. Per-sample passes run in parallel (under `std`);
/// gradients are reduced in sample order, so results do not depend on
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn base_train_step<S: Scalar>(
    model: &IcmModel,
    fe: &FeatureExtractor<S>,
    store: &mut ParamStore<S>,
    opt: &mut Adam<S>,
    batch: &[Tensor<S>],
    weights: &LossWeights,
    run_rng: &SeedRng,
    step: u64,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let bsz = batch.len();
    // Noise streams are forked up front so thread scheduling can't
    // reorder draws.
    let jobs: Vec<(Tensor<S>, SeedRng)> = batch
        .iter()
        .enumerate()
        .map(|(i, x)| {
            (
                x.clone(),
                run_rng.fork("quantizer_noise", step * bsz as u64 + i as u64),
            )
        })
        .collect();

    let store_ref: &ParamStore<S> = store;
    let results: Vec<(Gradients<S>, LossBreakdown)> = par_map(jobs, |(x, mut noise_rng)| {
        sample_pass(model, fe, store_ref, &x, weights, &mut noise_rng)
    });

    let mut grads = Gradients::new(store, &BASE_TRAINABLE);
    let mut loss = LossBreakdown::default();
    for (g, l) in &results {
        grads.add_from(g);
        loss.add(l);
    }
    let inv_b = 1.0 / bsz as f64;
    grads.scale(S::from_f64(inv_b));
    loss.scale(inv_b);

    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: alloc::format!("loss total {}", loss.total),
        });
    }
    if !grads.is_all_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: alloc::string::String::from("gradient overflow"),
        });
    }

    let grad_max = grads.max_abs_in(store, &BASE_TRAINABLE);
    let ids = store.ids_in(&BASE_TRAINABLE);
    opt.step(store, &grads, &ids);
    Ok(StepStats { loss, grad_max })
}

/// Forward + backward for a single crop; returns fresh gradients.
fn sample_pass<S: Scalar>(
    model: &IcmModel,
    fe: &FeatureExtractor<S>,
    store: &ParamStore<S>,
    x: &Tensor<S>,
    weights: &LossWeights,
    noise_rng: &mut SeedRng,
) -> (Gradients<S>, LossBreakdown) {
    let (_, _, h, w) = x.dims4();
    let num_pixels = (h * w) as f64;
    let mut grads = Gradients::new(store, &BASE_TRAINABLE);

    let (y, enc_ctx) = model.encoder.forward_t(store, x);
    let y_noisy = quantize_noisy(&y, noise_rng);
    let (xhat, dec_ctx) = model.decoder.forward_t(store, &y_noisy);

    let mse = tensor_mse(&xhat, x);
    let (proxy, g_proxy) = fe.proxy_loss_grad(x, &xhat);
    let rate_bits = model.pm.rate_bits(store, &y_noisy);
    let rate_bpp = rate_bits / num_pixels;

    // d/dxhat of w_mse * mse + w_task * proxy.
    let mut g_xhat = mse_grad_wrt_first(&xhat, x, weights.w_mse);
    {
        let k = S::from_f64(weights.w_task);
        let gd = g_xhat.data_mut();
        for (d, &p) in gd.iter_mut().zip(g_proxy.data()) {
            *d += p * k;
        }
    }

    // Rate gradients flow into the noisy latent directly; the decoder
    // path contributes through the same tensor.
    let g_latent_rate =
        model
            .pm
            .rate_backward(store, &y_noisy, weights.w_rate / num_pixels, &mut grads);
    let mut g_latent = model
        .decoder
        .backward(store, &dec_ctx, &g_xhat, &mut grads, true)
        .expect("latent grad");
    g_latent.add_assign_t(&g_latent_rate);
    model.encoder.backward(store, &enc_ctx, &g_latent, &mut grads);

    (grads, LossBreakdown::combine(rate_bpp, mse, proxy, weights))
}

/// Trains only the decoder head toward reconstructions that carry an
/// explicit Nyquist checkerboard of the given `amplitude` on top of each
/// crop. Latents come from the frozen encoder, so the bitstream path is
/// untouched; every partition except the head keeps its exact values.
///
/// A well-converged codec has no visible artifacts, so directional tests
/// of artifact removal need a controlled way to put some back. Random
/// head noise does not work: the tail maps arbitrary feature errors to
/// spectrally smooth images. Descending toward a checkerboarded target
/// finds the head configuration whose image, after the frozen tail, has
/// the strongest Nyquist component the head can express.
///
/// Checks the median [`checkerboard_energy`] over `crops` every 10 steps
/// and stops once it reaches `stop_ratio`, keeping the parameter
/// excursion as small as the goal allows. Returns the steps actually run
/// and the final median ratio; the caller decides whether falling short
/// of `stop_ratio` after `max_steps` is an error.
///
/// [`checkerboard_energy`]: crate::metrics::checkerboard_energy
pub fn imprint_checkerboard<S: Scalar>(
    store: &mut ParamStore<S>,
    model: &IcmModel,
    crops: &[Tensor<S>],
    amplitude: f64,
    lr: f64,
    max_steps: usize,
) -> Result<(usize, f64), TrainError> {
    imprint_checkerboard_until(store, model, crops, amplitude, lr, max_steps, f64::INFINITY)
}

/// [`imprint_checkerboard`] with an early-stop threshold on the median
/// checkerboard ratio.
pub fn imprint_checkerboard_until<S: Scalar>(
    store: &mut ParamStore<S>,
    model: &IcmModel,
    crops: &[Tensor<S>],
    amplitude: f64,
    lr: f64,
    max_steps: usize,
    stop_ratio: f64,
) -> Result<(usize, f64), TrainError> {
    if crops.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let latents: Vec<Tensor<S>> = crops
        .iter()
        .map(|x| crate::codec::quantize::quantize_round(&model.encoder.forward(store, x)))
        .collect();
    let targets: Vec<Tensor<S>> = crops
        .iter()
        .map(|x| {
            let (_, c, h, w) = x.dims4();
            let mut t = x.clone();
            let d = t.data_mut();
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let sign = if (y + xx) % 2 == 0 { amplitude } else { -amplitude };
                        d[(ci * h + y) * w + xx] += S::from_f64(sign);
                    }
                }
            }
            t
        })
        .collect();

    let median_ratio = |store: &ParamStore<S>| -> f64 {
        let mut r: Vec<f64> = crops
            .iter()
            .zip(&latents)
            .map(|(x, q)| {
                let xhat = model.decoder.forward(store, q);
                crate::metrics::checkerboard_energy(&xhat, x)
            })
            .collect();
        r.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        }
    };

    let mut ratio = median_ratio(store);
    if ratio >= stop_ratio {
        return Ok((0, ratio));
    }
    let head_ids = store.ids_in(&[Partition::DecoderHead]);
    let mut opt = Adam::new(store, lr);
    let scale = 1.0 / crops.len() as f64;
    for step in 1..=max_steps {
        let mut grads = Gradients::new(store, &[Partition::DecoderHead]);
        for (q, target) in latents.iter().zip(&targets) {
            let (xhat, ctx) = model.decoder.forward_t(store, q);
            let g = mse_grad_wrt_first(&xhat, target, scale);
            model.decoder.backward(store, &ctx, &g, &mut grads, false);
        }
        opt.step(store, &grads, &head_ids);
        if step % 10 == 0 || step == max_steps {
            ratio = median_ratio(store);
            if ratio >= stop_ratio {
                return Ok((step, ratio));
            }
        }
    }
    Ok((max_steps, ratio))
}
