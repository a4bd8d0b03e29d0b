//! Fixed random-weight backbone with an FPN top-down path.
//!
//! The extractor stands in for a detection backbone: a five-stage strided
//! conv pyramid whose weights are frozen at construction (seeded He
//! init). Task-relevant structure is preserved exactly when these
//! multi-scale responses are preserved, so feature MSE against it serves
//! both the training proxy term and the perceptual report metric.


use crate::nn::conv::Conv2d;
use crate::nn::ops::{relu, relu_backward, upsample_nearest_backward, upsample_nearest_to};
use crate::nn::{Gradients, ParamStore, Partition};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature width of every stage and pyramid level.
const FEAT: usize = 32;

/// Input dims must be divisible by this (deepest stage stride handles
/// odd intermediate sizes via exact-size nearest resizes).
pub const INPUT_STRIDE: usize = 16;

/// Multi-scale features; strides 4, 8, 16, 32 relative to the input.
#[derive(Debug)]
pub struct Pyramid<S> {
    pub p2: Tensor<S>,
    pub p3: Tensor<S>,
    pub p4: Tensor<S>,
    pub p5: Tensor<S>,
}

#[derive(Debug)]
struct Stage {
    conv: Conv2d,
}

impl Stage {
    fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let pre = self.conv.forward(store, x);
        (relu(&pre), pre)
    }
}

/// Saved activations for the backward pass through the reconstruction
/// branch.
#[derive(Debug)]
pub struct FpnCtx<S> {
    x: Tensor<S>,
    pres: [Tensor<S>; 5],
    outs: [Tensor<S>; 5],
    t2: Tensor<S>,
    t3: Tensor<S>,
    t4: Tensor<S>,
    t5: Tensor<S>,
}

#[derive(Debug)]
pub struct FeatureExtractor<S> {
    store: ParamStore<S>,
    stages: [Stage; 5],
    laterals: [Conv2d; 4],
    smooths: [Conv2d; 4],
    seed: u64,
}

impl<S: Scalar> FeatureExtractor<S> {
    /// Builds the frozen extractor from a seed; equal seeds give equal
    /// features on every platform.
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed).fork("feature_extractor", 0);
        let p = Partition::Fixed;
        let stage = |store: &mut ParamStore<S>, rng: &mut SeedRng, i: usize, in_c: usize| Stage {
            conv: Conv2d::new(
                store,
                rng,
                &alloc::format!("fpn.stage{i}"),
                p,
                in_c,
                FEAT,
                3,
                2,
                1,
            ),
        };
        let stages = [
            stage(&mut store, &mut rng, 0, 3),
            stage(&mut store, &mut rng, 1, FEAT),
            stage(&mut store, &mut rng, 2, FEAT),
            stage(&mut store, &mut rng, 3, FEAT),
            stage(&mut store, &mut rng, 4, FEAT),
        ];
        let lateral = |store: &mut ParamStore<S>, rng: &mut SeedRng, lvl: usize| {
            Conv2d::new(
                store,
                rng,
                &alloc::format!("fpn.lateral{lvl}"),
                p,
                FEAT,
                FEAT,
                1,
                1,
                0,
            )
        };
        let laterals = [
            lateral(&mut store, &mut rng, 2),
            lateral(&mut store, &mut rng, 3),
            lateral(&mut store, &mut rng, 4),
            lateral(&mut store, &mut rng, 5),
        ];
        let smooth = |store: &mut ParamStore<S>, rng: &mut SeedRng, lvl: usize| {
            Conv2d::new(
                store,
                rng,
                &alloc::format!("fpn.smooth{lvl}"),
                p,
                FEAT,
                FEAT,
                3,
                1,
                1,
            )
        };
        let smooths = [
            smooth(&mut store, &mut rng, 2),
            smooth(&mut store, &mut rng, 3),
            smooth(&mut store, &mut rng, 4),
            smooth(&mut store, &mut rng, 5),
        ];
        FeatureExtractor {
            store,
            stages,
            laterals,
            smooths,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// First 8 LE bytes of the weight hash, recorded in report manifests.
    pub fn param_hash8(&self) -> u64 {
        let h = self.store.hash_partitions(&[Partition::Fixed]);
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    fn check_input(&self, x: &Tensor<S>) {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, 3, "feature extractor expects RGB");
        assert!(
            h % INPUT_STRIDE == 0 && w % INPUT_STRIDE == 0 && h > 0 && w > 0,
            "feature extractor input {h}x{w} must be a positive multiple of {INPUT_STRIDE}"
        );
    }

    pub fn forward_t(&self, x: &Tensor<S>) -> (Pyramid<S>, FpnCtx<S>) {
        self.check_input(x);
        let st = &self.store;
        let (o0, pre0) = self.stages[0].forward_t(st, x);
        let (o1, pre1) = self.stages[1].forward_t(st, &o0);
        let (o2, pre2) = self.stages[2].forward_t(st, &o1);
        let (o3, pre3) = self.stages[3].forward_t(st, &o2);
        let (o4, pre4) = self.stages[4].forward_t(st, &o3);

        // Top-down: lateral 1x1 plus nearest-upsampled coarser level.
        let t5 = self.laterals[3].forward(st, &o4);
        let mut t4 = self.laterals[2].forward(st, &o3);
        {
            let (_, _, h, w) = t4.dims4();
            t4.add_assign_t(&upsample_nearest_to(&t5, h, w));
        }
        let mut t3 = self.laterals[1].forward(st, &o2);
        {
            let (_, _, h, w) = t3.dims4();
            t3.add_assign_t(&upsample_nearest_to(&t4, h, w));
        }
        let mut t2 = self.laterals[0].forward(st, &o1);
        {
            let (_, _, h, w) = t2.dims4();
            t2.add_assign_t(&upsample_nearest_to(&t3, h, w));
        }
        let pyr = Pyramid {
            p2: self.smooths[0].forward(st, &t2),
            p3: self.smooths[1].forward(st, &t3),
            p4: self.smooths[2].forward(st, &t4),
            p5: self.smooths[3].forward(st, &t5),
        };
        let ctx = FpnCtx {
            x: x.clone(),
            pres: [pre0, pre1, pre2, pre3, pre4],
            outs: [o0, o1, o2, o3, o4],
            t2,
            t3,
            t4,
            t5,
        };
        (pyr, ctx)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Pyramid<S> {
        self.forward_t(x).0
    }

    /// Input gradient from pyramid-level gradients (any subset; pass
    /// `None` for unused levels). Extractor weights are fixed, so only
    /// the input gradient is produced.
    pub fn backward_input(
        &self,
        ctx: &FpnCtx<S>,
        gp2: Option<&Tensor<S>>,
        gp3: Option<&Tensor<S>>,
        gp4: Option<&Tensor<S>>,
        gp5: Option<&Tensor<S>>,
    ) -> Tensor<S> {
        let st = &self.store;
        let mut sink = Gradients::frozen(st);
        let zeros_like = |t: &Tensor<S>| Tensor::zeros(t.shape());

        // Smooth convs back to the t maps.
        let g_t2 = match gp2 {
            Some(g) => self.smooths[0]
                .backward(st, &ctx.t2, g, &mut sink, true)
                .expect("smooth2 grad"),
            None => zeros_like(&ctx.t2),
        };
        let mut g_t3 = match gp3 {
            Some(g) => self.smooths[1]
                .backward(st, &ctx.t3, g, &mut sink, true)
                .expect("smooth3 grad"),
            None => zeros_like(&ctx.t3),
        };
        let mut g_t4 = match gp4 {
            Some(g) => self.smooths[2]
                .backward(st, &ctx.t4, g, &mut sink, true)
                .expect("smooth4 grad"),
            None => zeros_like(&ctx.t4),
        };
        let mut g_t5 = match gp5 {
            Some(g) => self.smooths[3]
                .backward(st, &ctx.t5, g, &mut sink, true)
                .expect("smooth5 grad"),
            None => zeros_like(&ctx.t5),
        };

        // Top-down adjoint: finer t feeds the upsample of the coarser t.
        {
            let (_, _, h, w) = ctx.t3.dims4();
            g_t3.add_assign_t(&upsample_nearest_backward(&g_t2, h, w));
        }
        {
            let (_, _, h, w) = ctx.t4.dims4();
            g_t4.add_assign_t(&upsample_nearest_backward(&g_t3, h, w));
        }
        {
            let (_, _, h, w) = ctx.t5.dims4();
            g_t5.add_assign_t(&upsample_nearest_backward(&g_t4, h, w));
        }

        // Laterals back into backbone stage outputs.
        let mut g_o = [
            zeros_like(&ctx.outs[0]),
            zeros_like(&ctx.outs[1]),
            zeros_like(&ctx.outs[2]),
            zeros_like(&ctx.outs[3]),
            zeros_like(&ctx.outs[4]),
        ];
        g_o[1].add_assign_t(
            &self.laterals[0]
                .backward(st, &ctx.outs[1], &g_t2, &mut sink, true)
                .expect("lateral2 grad"),
        );
        g_o[2].add_assign_t(
            &self.laterals[1]
                .backward(st, &ctx.outs[2], &g_t3, &mut sink, true)
                .expect("lateral3 grad"),
        );
        g_o[3].add_assign_t(
            &self.laterals[2]
                .backward(st, &ctx.outs[3], &g_t4, &mut sink, true)
                .expect("lateral4 grad"),
        );
        g_o[4].add_assign_t(
            &self.laterals[3]
                .backward(st, &ctx.outs[4], &g_t5, &mut sink, true)
                .expect("lateral5 grad"),
        );

        // Backbone chain, deepest first.
        for i in (1..5).rev() {
            let g_pre = relu_backward(&ctx.pres[i], &g_o[i]);
            let g_in = self.stages[i]
                .conv
                .backward(st, &ctx.outs[i - 1], &g_pre, &mut sink, true)
                .expect("stage input grad");
            g_o[i - 1].add_assign_t(&g_in);
        }
        let g_pre0 = relu_backward(&ctx.pres[0], &g_o[0]);
        self.stages[0]
            .conv
            .backward(st, &ctx.x, &g_pre0, &mut sink, true)
            .expect("stage0 input grad")
    }

    /// Feature-space MSE at strides 4 and 16 (the machine-task proxy).
    pub fn proxy_loss(&self, x: &Tensor<S>, xhat: &Tensor<S>) -> f64 {
        let px = self.forward(x);
        let ph = self.forward(xhat);
        tensor_mse(&px.p2, &ph.p2) + tensor_mse(&px.p4, &ph.p4)
    }

    /// Proxy loss plus its gradient with respect to the reconstruction.
    pub fn proxy_loss_grad(&self, x: &Tensor<S>, xhat: &Tensor<S>) -> (f64, Tensor<S>) {
        let px = self.forward(x);
        let (ph, ctx) = self.forward_t(xhat);
        let l2 = tensor_mse(&px.p2, &ph.p2);
        let l4 = tensor_mse(&px.p4, &ph.p4);
        let g2 = mse_grad_wrt_first(&ph.p2, &px.p2, 1.0);
        let g4 = mse_grad_wrt_first(&ph.p4, &px.p4, 1.0);
        let gx = self.backward_input(&ctx, Some(&g2), None, Some(&g4), None);
        (l2 + l4, gx)
    }

    /// Feature distance for reports: MSE at the finest and coarsest
    /// exposed levels (strides 4 and 32).
    pub fn perceptual_distance(&self, x: &Tensor<S>, xhat: &Tensor<S>) -> f64 {
        let px = self.forward(x);
        let ph = self.forward(xhat);
        tensor_mse(&px.p2, &ph.p2) + tensor_mse(&px.p5, &ph.p5)
    }
}

/// Mean squared difference accumulated in f64.
pub fn tensor_mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    a.sq_diff_sum(b) / a.numel() as f64
}

/// d(scale * mse(a, b)) / da = scale * 2 (a - b) / numel.
pub fn mse_grad_wrt_first<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, scale: f64) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    let k = S::from_f64(2.0 * scale / a.numel() as f64);
    let mut g = Tensor::zeros(a.shape());
    for ((o, &av), &bv) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = (av - bv) * k;
    }
    g
}
