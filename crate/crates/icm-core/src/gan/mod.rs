//! Adversarial decoder finetuning: vanilla GAN losses over patch logits
//! and the alternating discriminator/generator step that trains only the
//! decoder head, leaving the bitstream path untouched.

pub mod disc;
pub mod patches;

use alloc::vec::Vec;

use crate::codec::quantize::quantize_round;
use crate::codec::{DecoderCtx, IcmModel};
use crate::error::TrainError;
use crate::nn::{par_map, Gradients, ParamId, ParamStore, Partition};
use crate::optim::Adam;
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use disc::Discriminator;
pub use patches::{gather_patches, sample_patch_coords, scatter_patch_grads, PatchCoord};

/// Logits are clamped here before the logistic; gradients vanish once a
/// logit saturates the clamp.
pub const LOGIT_CLAMP: f64 = 20.0;

/// Generator objective form. Both use the same discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GanFlavor {
    /// Maximize log D on fakes; the usual stable choice.
    NonSaturating,
    /// Minimize log(1 - D) on fakes, the literal two-player objective.
    LiteralMinimax,
}

/// Hyperparameters of a finetuning run.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FinetuneConfig {
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub learning_rate: f64,
    /// Discriminator rate; defaults to `learning_rate` when absent.
    pub disc_learning_rate: Option<f64>,
    pub w_adv: f64,
    pub flavor: GanFlavor,
    pub steps_per_checkpoint: usize,
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            patch_size: 64,
            patches_per_image: 3,
            learning_rate: 2e-5,
            disc_learning_rate: None,
            w_adv: 1e-3,
            flavor: GanFlavor::NonSaturating,
            steps_per_checkpoint: 6000,
            checkpoints: 50,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Low-impact preset: attenuated adversarial weight and step size.
    pub fn li() -> Self {
        FinetuneConfig {
            w_adv: 1e-4,
            learning_rate: 2e-9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if ![32, 64, 128].contains(&self.patch_size) {
            return Err(TrainError::Config(alloc::format!(
                "patch size {} not in {{32, 64, 128}}",
                self.patch_size
            )));
        }
        if ![1, 3, 5].contains(&self.patches_per_image) {
            return Err(TrainError::Config(alloc::format!(
                "patches per image {} not in {{1, 3, 5}}",
                self.patches_per_image
            )));
        }
        for (label, v) in [
            ("learning_rate", self.learning_rate),
            ("w_adv", self.w_adv),
            (
                "disc_learning_rate",
                self.disc_learning_rate.unwrap_or(self.learning_rate),
            ),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(alloc::format!("{label} = {v}")));
            }
        }
        Ok(())
    }
}

fn softplus64(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_logit(v: f64) -> (f64, bool) {
    (v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP), v.abs() < LOGIT_CLAMP)
}

/// Scalar GAN losses over two logit grids: the discriminator's binary
/// cross-entropy and the generator term in the requested form. Means run
/// over all grid cells and patches.
pub fn gan_loss<S: Scalar>(
    d_real: &Tensor<S>,
    d_fake: &Tensor<S>,
    flavor: GanFlavor,
) -> (f64, f64) {
    let nr = d_real.numel() as f64;
    let nf = d_fake.numel() as f64;
    let mut real_term = 0.0;
    for &r in d_real.data() {
        real_term += softplus64(-clamp_logit(r.to_f64()).0);
    }
    let mut fake_term = 0.0;
    let mut ns_term = 0.0;
    for &f in d_fake.data() {
        let c = clamp_logit(f.to_f64()).0;
        fake_term += softplus64(c);
        ns_term += softplus64(-c);
    }
    let loss_d = real_term / nr + fake_term / nf;
    let loss_g = match flavor {
        GanFlavor::NonSaturating => ns_term / nf,
        GanFlavor::LiteralMinimax => -fake_term / nf,
    };
    (loss_d, loss_g)
}

/// Discriminator loss with gradients w.r.t. both logit grids.
pub fn disc_loss_grads<S: Scalar>(
    d_real: &Tensor<S>,
    d_fake: &Tensor<S>,
) -> (f64, Tensor<S>, Tensor<S>) {
    let nr = d_real.numel() as f64;
    let nf = d_fake.numel() as f64;
    let mut loss = 0.0;
    let mut g_real = Tensor::zeros(d_real.shape());
    for (g, &r) in g_real.data_mut().iter_mut().zip(d_real.data()) {
        let (c, live) = clamp_logit(r.to_f64());
        loss += softplus64(-c) / nr;
        if live {
            *g = S::from_f64(-sigmoid64(-c) / nr);
        }
    }
    let mut g_fake = Tensor::zeros(d_fake.shape());
    for (g, &f) in g_fake.data_mut().iter_mut().zip(d_fake.data()) {
        let (c, live) = clamp_logit(f.to_f64());
        loss += softplus64(c) / nf;
        if live {
            *g = S::from_f64(sigmoid64(c) / nf);
        }
    }
    (loss, g_real, g_fake)
}

/// Generator loss with its gradient w.r.t. the fake logits.
pub fn gen_loss_grad<S: Scalar>(d_fake: &Tensor<S>, flavor: GanFlavor) -> (f64, Tensor<S>) {
    let nf = d_fake.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(d_fake.shape());
    for (g, &f) in grad.data_mut().iter_mut().zip(d_fake.data()) {
        let (c, live) = clamp_logit(f.to_f64());
        let (l, d) = match flavor {
            GanFlavor::NonSaturating => (softplus64(-c), -sigmoid64(-c)),
            GanFlavor::LiteralMinimax => (-softplus64(c), -sigmoid64(c)),
        };
        loss += l / nf;
        if live {
            *g = S::from_f64(d / nf);
        }
    }
    (loss, grad)
}

/// Fraction of logits the discriminator classifies correctly, reals as
/// real and fakes as fake.
pub fn disc_accuracy<S: Scalar>(d_real: &Tensor<S>, d_fake: &Tensor<S>) -> f64 {
    let hits = d_real.data().iter().filter(|v| v.to_f64() > 0.0).count()
        + d_fake.data().iter().filter(|v| v.to_f64() < 0.0).count();
    hits as f64 / (d_real.numel() + d_fake.numel()) as f64
}

/// Full finetuning objective: mean squared error over the image plus the
/// weighted generator loss.
pub fn finetune_objective<S: Scalar>(
    x: &Tensor<S>,
    xhat: &Tensor<S>,
    d_fake: &Tensor<S>,
    w_adv: f64,
    flavor: GanFlavor,
) -> f64 {
    let l2 = crate::losses::tensor_mse(xhat, x);
    let (loss_g, _) = gen_loss_grad(d_fake, flavor);
    l2 + w_adv * loss_g
}

/// Scalar logs from one alternation.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneStats {
    pub loss_d: f64,
    pub loss_g: f64,
    pub l2: f64,
    /// `l2 + w_adv * loss_g`, the generator's descent target.
    pub objective: f64,
    pub disc_accuracy: f64,
    /// Largest gradient recorded for any frozen partition in either
    /// half-step; structurally zero.
    pub grad_absmax_frozen: f64,
}

/// Owns the discriminator and both optimizers for a finetuning run.
///
/// The discriminator registers into the same store as the codec under
/// its own partition, so checkpointing captures the whole state.
#[derive(Debug)]
pub struct Finetuner<S: Scalar> {
    pub cfg: FinetuneConfig,
    pub disc: Discriminator,
    opt_g: Adam<S>,
    opt_d: Adam<S>,
    head_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    rng: SeedRng,
    step: u64,
}

impl<S: Scalar> Finetuner<S> {
    pub fn new(store: &mut ParamStore<S>, cfg: FinetuneConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut init_rng = SeedRng::new(cfg.seed).fork("discriminator_init", 0);
        let disc = Discriminator::build(store, &mut init_rng, cfg.patch_size);
        let opt_g = Adam::new(store, cfg.learning_rate);
        let opt_d = Adam::new(store, cfg.disc_learning_rate.unwrap_or(cfg.learning_rate));
        let head_ids = store.ids_in(&[Partition::DecoderHead]);
        let disc_ids = store.ids_in(&[Partition::Discriminator]);
        let rng = SeedRng::new(cfg.seed).fork("finetune", 0);
        Ok(Finetuner {
            cfg,
            disc,
            opt_g,
            opt_d,
            head_ids,
            disc_ids,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One alternation: a discriminator update on real/fake patches at
    /// shared coordinates, then a generator update of the decoder head
    /// against the refreshed discriminator. Reconstructions use rounded
    /// latents, exactly the deployment path.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        model: &IcmModel,
        batch: &[Tensor<S>],
    ) -> Result<FinetuneStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let (_, _, h, w) = batch[0].dims4();
        for x in batch {
            let (n, c, bh, bw) = x.dims4();
            if n != 1 || c != 3 || bh != h || bw != w {
                return Err(TrainError::Config(
                    "finetune batch images must share one [1, 3, H, W] shape".into(),
                ));
            }
        }
        let step = self.step;
        let bsz = batch.len();

        // Reconstruction pass. Encoder and probability model stay out of
        // the gradient path entirely.
        let store_ref: &ParamStore<S> = store;
        let recon: Vec<(Tensor<S>, DecoderCtx<S>)> =
            par_map(batch.to_vec(), |x| {
                let y = model.encoder.forward(store_ref, &x);
                let q = quantize_round(&y);
                model.decoder.forward_t(store_ref, &q)
            });

        let mut coord_rng = self.rng.fork("patches", step);
        let coords = sample_patch_coords(
            &mut coord_rng,
            bsz,
            (h, w),
            self.cfg.patch_size,
            self.cfg.patches_per_image,
        )?;

        let real_images = stack_images(batch);
        let fake_images = stack_images_owned(&recon);
        let real = gather_patches(&real_images, &coords, self.cfg.patch_size);
        let fake = gather_patches(&fake_images, &coords, self.cfg.patch_size);

        // Discriminator half-step. Fake patches are detached: gradients
        // stop at the discriminator input.
        let (d_real, ctx_r) = self.disc.forward_t(store, &real);
        let (d_fake, ctx_f) = self.disc.forward_t(store, &fake);
        let (loss_d, g_real, g_fake) = disc_loss_grads(&d_real, &d_fake);
        let accuracy = disc_accuracy(&d_real, &d_fake);
        let mut grads_d = Gradients::new(store, &[Partition::Discriminator]);
        self.disc.backward(store, &ctx_r, &g_real, &mut grads_d, false);
        self.disc.backward(store, &ctx_f, &g_fake, &mut grads_d, false);
        if !loss_d.is_finite() || !grads_d.is_all_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: alloc::format!(
                    "discriminator half-step: loss_d {loss_d}, accuracy {accuracy}"
                ),
            });
        }
        self.opt_d.step(store, &grads_d, &self.disc_ids);

        // Generator half-step against the updated discriminator.
        let (d_fake2, ctx_f2) = self.disc.forward_t(store, &fake);
        let (loss_g, mut g_df) = gen_loss_grad(&d_fake2, self.cfg.flavor);
        g_df.scale_in_place(S::from_f64(self.cfg.w_adv));
        let mut grads_g = Gradients::new(store, &[Partition::DecoderHead]);
        let g_patches = self
            .disc
            .backward(store, &ctx_f2, &g_df, &mut grads_g, true)
            .expect("patch input grads");
        let g_adv = scatter_patch_grads(&g_patches, &coords, fake_images.shape());

        let inv_b = 1.0 / bsz as f64;
        let jobs: Vec<(usize, Tensor<S>)> = batch
            .iter()
            .enumerate()
            .map(|(i, x)| (i, x.clone()))
            .collect();
        let store_g: &ParamStore<S> = store;
        let per_image: Vec<(Gradients<S>, f64)> = par_map(jobs, |(i, x)| {
            let (xhat, dec_ctx) = &recon[i];
            let l2 = crate::losses::tensor_mse(xhat, &x);
            let mut g_xhat = crate::losses::mse_grad_wrt_first(xhat, &x, inv_b);
            add_image_slice(&mut g_xhat, &g_adv, i);
            let mut g = Gradients::new(store_g, &[Partition::DecoderHead]);
            model
                .decoder
                .backward(store_g, dec_ctx, &g_xhat, &mut g, false);
            (g, l2)
        });
        let mut l2 = 0.0;
        for (g, sample_l2) in &per_image {
            grads_g.add_from(g);
            l2 += sample_l2 * inv_b;
        }
        if !loss_g.is_finite() || !l2.is_finite() || !grads_g.is_all_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: alloc::format!("generator half-step: loss_g {loss_g}, l2 {l2}"),
            });
        }
        self.opt_g.step(store, &grads_g, &self.head_ids);

        let frozen = [
            Partition::Encoder,
            Partition::ProbabilityModel,
            Partition::DecoderTail,
        ];
        let grad_absmax_frozen = grads_g
            .max_abs_in(store, &frozen)
            .max(grads_d.max_abs_in(store, &frozen))
            .max(grads_d.max_abs_in(store, &[Partition::DecoderHead]));

        self.step += 1;
        Ok(FinetuneStats {
            loss_d,
            loss_g,
            l2,
            objective: l2 + self.cfg.w_adv * loss_g,
            disc_accuracy: accuracy,
            grad_absmax_frozen,
        })
    }
}

/// Concatenates `[1, c, h, w]` images along the batch axis.
fn stack_images<S: Scalar>(items: &[Tensor<S>]) -> Tensor<S> {
    let (_, c, h, w) = items[0].dims4();
    let stride = c * h * w;
    let mut out = Tensor::zeros(&[items.len(), c, h, w]);
    for (i, t) in items.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(t.data());
    }
    out
}

fn stack_images_owned<S: Scalar>(items: &[(Tensor<S>, DecoderCtx<S>)]) -> Tensor<S> {
    let (_, c, h, w) = items[0].0.dims4();
    let stride = c * h * w;
    let mut out = Tensor::zeros(&[items.len(), c, h, w]);
    for (i, (t, _)) in items.iter().enumerate() {
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(t.data());
    }
    out
}

/// Adds image `i` of a `[n, c, h, w]` stack into a `[1, c, h, w]` target.
fn add_image_slice<S: Scalar>(dst: &mut Tensor<S>, stack: &Tensor<S>, i: usize) {
    let stride = dst.numel();
    let src = &stack.data()[i * stride..(i + 1) * stride];
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    const LN2: f64 = core::f64::consts::LN_2;

    fn logits(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, vals.len(), 1], vals.to_vec())
    }

    #[test]
    fn zero_logits_hit_the_log_two_anchors() {
        let r = logits(&[0.0; 6]);
        let f = logits(&[0.0; 4]);
        let (loss_d, loss_g_ns) = gan_loss(&r, &f, GanFlavor::NonSaturating);
        assert!((loss_d - 2.0 * LN2).abs() < 1e-12);
        assert!((loss_g_ns - LN2).abs() < 1e-12);
        let (_, loss_g_mm) = gan_loss(&r, &f, GanFlavor::LiteralMinimax);
        assert!((loss_g_mm + LN2).abs() < 1e-12);
    }

    #[test]
    fn confident_discriminator_drives_loss_to_zero() {
        let r = logits(&[15.0; 4]);
        let f = logits(&[-15.0; 4]);
        let (loss_d, _) = gan_loss(&r, &f, GanFlavor::NonSaturating);
        assert!(loss_d < 1e-6);
        assert_eq!(disc_accuracy(&r, &f), 1.0);
    }

    #[test]
    fn losses_match_a_scalar_oracle_on_random_grids() {
        let mut rng = SeedRng::new(40);
        for _ in 0..20 {
            let rv: Vec<f64> = (0..4).map(|_| rng.normal() * 3.0).collect();
            let fv: Vec<f64> = (0..4).map(|_| rng.normal() * 3.0).collect();
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            let oracle_d = rv.iter().map(|&r| -sig(r).ln()).sum::<f64>() / 4.0
                + fv.iter().map(|&f| -(1.0 - sig(f)).ln()).sum::<f64>() / 4.0;
            let oracle_g_ns = fv.iter().map(|&f| -sig(f).ln()).sum::<f64>() / 4.0;
            let oracle_g_mm = fv.iter().map(|&f| (1.0 - sig(f)).ln()).sum::<f64>() / 4.0;
            let r = logits(&rv);
            let f = logits(&fv);
            let (ld, lg_ns) = gan_loss(&r, &f, GanFlavor::NonSaturating);
            let (_, lg_mm) = gan_loss(&r, &f, GanFlavor::LiteralMinimax);
            assert!((ld - oracle_d).abs() < 1e-9);
            assert!((lg_ns - oracle_g_ns).abs() < 1e-9);
            assert!((lg_mm - oracle_g_mm).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = SeedRng::new(41);
        let rv: Vec<f64> = (0..5).map(|_| rng.normal() * 2.0).collect();
        let fv: Vec<f64> = (0..5).map(|_| rng.normal() * 2.0).collect();
        let r = logits(&rv);
        let f = logits(&fv);

        let (_, g_real, g_fake) = disc_loss_grads(&r, &f);
        for i in 0..5 {
            for (which, grad) in [(0, g_real.data()[i]), (1, g_fake.data()[i])] {
                let eval = |delta: f64| {
                    let mut rv2 = rv.clone();
                    let mut fv2 = fv.clone();
                    if which == 0 {
                        rv2[i] += delta;
                    } else {
                        fv2[i] += delta;
                    }
                    disc_loss_grads(&logits(&rv2), &logits(&fv2)).0
                };
                let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((grad - num).abs() < 1e-7, "disc grad {which}/{i}");
            }
        }

        for flavor in [GanFlavor::NonSaturating, GanFlavor::LiteralMinimax] {
            let (_, g) = gen_loss_grad(&f, flavor);
            for i in 0..5 {
                let eval = |delta: f64| {
                    let mut fv2 = fv.clone();
                    fv2[i] += delta;
                    gen_loss_grad(&logits(&fv2), flavor).0
                };
                let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((g.data()[i] - num).abs() < 1e-7, "gen grad {i}");
            }
        }
    }

    #[test]
    fn clamped_logits_stop_gradients() {
        let f = logits(&[25.0, -25.0, 0.5]);
        let (_, g) = gen_loss_grad(&f, GanFlavor::NonSaturating);
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[1], 0.0);
        assert!(g.data()[2] != 0.0);
    }

    #[test]
    fn objective_arithmetic_matches_the_weighted_sum() {
        // L2 = 0.01 exactly; logits chosen so the generator term is 0.7.
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let xhat = Tensor::full(&[1, 3, 4, 4], 0.1);
        let f_star = -libm::log(libm::exp(0.7) - 1.0);
        let d_fake = Tensor::full(&[1, 1, 2, 2], f_star);
        let obj = finetune_objective(&x, &xhat, &d_fake, 1e-3, GanFlavor::NonSaturating);
        assert!((obj - 0.0107).abs() < 1e-9, "objective {obj}");

        let pure_l2 = finetune_objective(&x, &xhat, &d_fake, 0.0, GanFlavor::NonSaturating);
        assert!((pure_l2 - 0.01).abs() < 1e-12);

        let same = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let zero_logits = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let anchored =
            finetune_objective(&x, &same, &zero_logits, 1e-3, GanFlavor::NonSaturating);
        assert!((anchored - 1e-3 * LN2).abs() < 1e-12);
    }

    fn smooth_batch(n: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = SeedRng::new(seed);
        (0..n)
            .map(|_| {
                let mut t = Tensor::zeros(&[1, 3, size, size]);
                for c in 0..3 {
                    for y in 0..size {
                        for x in 0..size {
                            let v = 0.3 + 0.4 * ((x + 2 * y + c) as f64 / (3 * size) as f64)
                                + 0.1 * rng.uniform();
                            t.data_mut()[(c * size + y) * size + x] = v as f32;
                        }
                    }
                }
                t
            })
            .collect()
    }

    fn finetune_setup(
        cfg: FinetuneConfig,
    ) -> (ParamStore<f32>, IcmModel, Finetuner<f32>) {
        let (mut store, model) = IcmModel::new_seeded::<f32>(CodecConfig::tiny(), 77).unwrap();
        let ft = Finetuner::new(&mut store, cfg).unwrap();
        (store, model, ft)
    }

    fn cfg_32() -> FinetuneConfig {
        FinetuneConfig {
            patch_size: 32,
            patches_per_image: 1,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn only_head_and_discriminator_move() {
        let (mut store, model, mut ft) = finetune_setup(cfg_32());
        let before: Vec<_> = [
            Partition::Encoder,
            Partition::ProbabilityModel,
            Partition::DecoderHead,
            Partition::DecoderTail,
            Partition::Discriminator,
        ]
        .iter()
        .map(|&p| store.hash_partitions(&[p]))
        .collect();
        let batch = smooth_batch(2, 32, 3);
        let stats = ft.step(&mut store, &model, &batch).unwrap();
        let after: Vec<_> = [
            Partition::Encoder,
            Partition::ProbabilityModel,
            Partition::DecoderHead,
            Partition::DecoderTail,
            Partition::Discriminator,
        ]
        .iter()
        .map(|&p| store.hash_partitions(&[p]))
        .collect();
        assert_eq!(before[0], after[0], "encoder moved");
        assert_eq!(before[1], after[1], "probability model moved");
        assert_ne!(before[2], after[2], "decoder head should move");
        assert_eq!(before[3], after[3], "decoder tail moved");
        assert_ne!(before[4], after[4], "discriminator should move");
        assert_eq!(stats.grad_absmax_frozen, 0.0);
        assert!(stats.loss_d.is_finite() && stats.objective.is_finite());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            ..cfg_32()
        };
        let (mut store, model, mut ft) = finetune_setup(cfg);
        let before = store.hash_all();
        let batch = smooth_batch(2, 32, 3);
        ft.step(&mut store, &model, &batch).unwrap();
        assert_eq!(before, store.hash_all());
    }

    #[test]
    fn identical_seeds_reproduce_identical_states() {
        let run = || {
            let (mut store, model, mut ft) = finetune_setup(cfg_32());
            let batch = smooth_batch(2, 32, 9);
            for _ in 0..2 {
                ft.step(&mut store, &model, &batch).unwrap();
            }
            store.hash_all()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn li_preset_moves_parameters_less() {
        let snapshot = |store: &ParamStore<f32>| -> Vec<f32> {
            store
                .ids()
                .flat_map(|id| store.get(id).to_vec())
                .collect()
        };
        let max_change = |cfg: FinetuneConfig| {
            let (mut store, model, mut ft) = finetune_setup(cfg);
            let before = snapshot(&store);
            let batch = smooth_batch(2, 32, 5);
            ft.step(&mut store, &model, &batch).unwrap();
            let after = snapshot(&store);
            before
                .iter()
                .zip(&after)
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0f64, f64::max)
        };
        let default_move = max_change(cfg_32());
        let li_move = max_change(FinetuneConfig {
            patch_size: 32,
            patches_per_image: 1,
            ..FinetuneConfig::li()
        });
        assert!(
            li_move < default_move,
            "LI {li_move} should move less than default {default_move}"
        );
        assert!(li_move > 0.0, "LI still trains");
    }

    #[test]
    fn nan_input_aborts_with_diagnostics() {
        let (mut store, model, mut ft) = finetune_setup(cfg_32());
        let mut batch = smooth_batch(1, 32, 3);
        batch[0].data_mut()[10] = f32::NAN;
        let err = ft.step(&mut store, &model, &batch).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
    }

    #[test]
    fn config_validation_rejects_off_menu_values() {
        assert!(FinetuneConfig {
            patch_size: 48,
            ..FinetuneConfig::default()
        }
        .validate()
        .is_err());
        assert!(FinetuneConfig {
            patches_per_image: 2,
            ..FinetuneConfig::default()
        }
        .validate()
        .is_err());
        assert!(FinetuneConfig::li().validate().is_ok());
        let li = FinetuneConfig::li();
        assert_eq!(li.w_adv, 1e-4);
        assert_eq!(li.learning_rate, 2e-9);
    }
}
