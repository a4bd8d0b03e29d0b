//! Residual building blocks shared by the encoder and decoder.

use alloc::vec::Vec;

use crate::nn::conv::Conv2d;
use crate::nn::ops::{pixel_shuffle, pixel_shuffle_backward, PReLU};
use crate::nn::{scoped, Gradients, ParamStore, Partition};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 3x3 conv to `4 * out_c` channels followed by a 2x pixel shuffle.
#[derive(Debug, Clone)]
pub struct PsUp {
    pub conv: Conv2d,
    pub out_c: usize,
}

impl PsUp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        scope: &str,
        partition: Partition,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        let conv = Conv2d::new(store, rng, scope, partition, in_c, 4 * out_c, 3, 1, 1);
        PsUp { conv, out_c }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        pixel_shuffle(&self.conv.forward(store, x), 2)
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let gconv = pixel_shuffle_backward(gout, 2);
        self.conv.backward(store, x, &gconv, grads, need_input_grad)
    }
}

/// Saved activations of one residual block; `x` is the block input,
/// `c1` the first conv/upsample output, `h` the first activation output,
/// and `z` the pre-activation sum feeding the final PReLU.
#[derive(Debug)]
pub struct BlockCtx<S> {
    pub x: Tensor<S>,
    pub c1: Tensor<S>,
    pub h: Tensor<S>,
    pub z: Tensor<S>,
}

/// Basic residual block: two 3x3 convs with an identity shortcut.
#[derive(Debug, Clone)]
pub struct BBlock {
    pub conv1: Conv2d,
    pub act1: PReLU,
    pub conv2: Conv2d,
    pub act2: PReLU,
}

impl BBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        scope: &str,
        partition: Partition,
        channels: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &scoped(scope, "conv1"),
            partition,
            channels,
            channels,
            3,
            1,
            1,
        );
        let act1 = PReLU::new(store, &scoped(scope, "act1"), partition, channels);
        let conv2 = Conv2d::new(
            store,
            rng,
            &scoped(scope, "conv2"),
            partition,
            channels,
            channels,
            3,
            1,
            1,
        );
        let act2 = PReLU::new(store, &scoped(scope, "act2"), partition, channels);
        BBlock {
            conv1,
            act1,
            conv2,
            act2,
        }
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, BlockCtx<S>) {
        let c1 = self.conv1.forward(store, x);
        let h = self.act1.forward(store, &c1);
        let mut z = self.conv2.forward(store, &h);
        z.add_assign_t(x);
        let y = self.act2.forward(store, &z);
        (
            y,
            BlockCtx {
                x: x.clone(),
                c1,
                h,
                z,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &BlockCtx<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let gz = self.act2.backward(store, &ctx.z, gout, grads);
        let gh = self
            .conv2
            .backward(store, &ctx.h, &gz, grads, true)
            .expect("conv2 input grad");
        let gc1 = self.act1.backward(store, &ctx.c1, &gh, grads);
        let gmain = self
            .conv1
            .backward(store, &ctx.x, &gc1, grads, need_input_grad);
        if need_input_grad {
            let mut gx = gmain.expect("conv1 input grad");
            gx.add_assign_t(&gz);
            Some(gx)
        } else {
            None
        }
    }
}

/// Downsampling residual block: first conv has stride 2 and the shortcut
/// is a 1x1 stride-2 projection.
#[derive(Debug, Clone)]
pub struct DBlock {
    pub conv1: Conv2d,
    pub act1: PReLU,
    pub conv2: Conv2d,
    pub act2: PReLU,
    pub short: Conv2d,
}

impl DBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        scope: &str,
        partition: Partition,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &scoped(scope, "conv1"),
            partition,
            in_c,
            out_c,
            3,
            2,
            1,
        );
        let act1 = PReLU::new(store, &scoped(scope, "act1"), partition, out_c);
        let conv2 = Conv2d::new(
            store,
            rng,
            &scoped(scope, "conv2"),
            partition,
            out_c,
            out_c,
            3,
            1,
            1,
        );
        let act2 = PReLU::new(store, &scoped(scope, "act2"), partition, out_c);
        let short = Conv2d::new(
            store,
            rng,
            &scoped(scope, "short"),
            partition,
            in_c,
            out_c,
            1,
            2,
            0,
        );
        DBlock {
            conv1,
            act1,
            conv2,
            act2,
            short,
        }
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, BlockCtx<S>) {
        let c1 = self.conv1.forward(store, x);
        let h = self.act1.forward(store, &c1);
        let mut z = self.conv2.forward(store, &h);
        z.add_assign_t(&self.short.forward(store, x));
        let y = self.act2.forward(store, &z);
        (
            y,
            BlockCtx {
                x: x.clone(),
                c1,
                h,
                z,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &BlockCtx<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let gz = self.act2.backward(store, &ctx.z, gout, grads);
        let gh = self
            .conv2
            .backward(store, &ctx.h, &gz, grads, true)
            .expect("conv2 input grad");
        let gc1 = self.act1.backward(store, &ctx.c1, &gh, grads);
        let gmain = self
            .conv1
            .backward(store, &ctx.x, &gc1, grads, need_input_grad);
        let gshort = self.short.backward(store, &ctx.x, &gz, grads, need_input_grad);
        if need_input_grad {
            let mut gx = gmain.expect("conv1 input grad");
            gx.add_assign_t(&gshort.expect("shortcut input grad"));
            Some(gx)
        } else {
            None
        }
    }
}

/// Upsampling residual block: both the main path and the shortcut start
/// with a PixelShuffle upsampler.
#[derive(Debug, Clone)]
pub struct UBlock {
    pub up1: PsUp,
    pub act1: PReLU,
    pub conv2: Conv2d,
    pub act2: PReLU,
    pub short: PsUp,
}

impl UBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        scope: &str,
        partition: Partition,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        let up1 = PsUp::new(store, rng, &scoped(scope, "conv1"), partition, in_c, out_c);
        let act1 = PReLU::new(store, &scoped(scope, "act1"), partition, out_c);
        let conv2 = Conv2d::new(
            store,
            rng,
            &scoped(scope, "conv2"),
            partition,
            out_c,
            out_c,
            3,
            1,
            1,
        );
        let act2 = PReLU::new(store, &scoped(scope, "act2"), partition, out_c);
        let short = PsUp::new(store, rng, &scoped(scope, "short"), partition, in_c, out_c);
        UBlock {
            up1,
            act1,
            conv2,
            act2,
            short,
        }
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, BlockCtx<S>) {
        let c1 = self.up1.forward(store, x);
        let h = self.act1.forward(store, &c1);
        let mut z = self.conv2.forward(store, &h);
        z.add_assign_t(&self.short.forward(store, x));
        let y = self.act2.forward(store, &z);
        (
            y,
            BlockCtx {
                x: x.clone(),
                c1,
                h,
                z,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &BlockCtx<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let gz = self.act2.backward(store, &ctx.z, gout, grads);
        let gh = self
            .conv2
            .backward(store, &ctx.h, &gz, grads, true)
            .expect("conv2 input grad");
        let gc1 = self.act1.backward(store, &ctx.c1, &gh, grads);
        let gmain = self.up1.backward(store, &ctx.x, &gc1, grads, need_input_grad);
        let gshort = self.short.backward(store, &ctx.x, &gz, grads, need_input_grad);
        if need_input_grad {
            let mut gx = gmain.expect("up1 input grad");
            gx.add_assign_t(&gshort.expect("shortcut input grad"));
            Some(gx)
        } else {
            None
        }
    }
}

/// Collects every parameter id of a list of blocks (test helper surface).
pub fn block_param_ids(blocks: &[&BBlock]) -> Vec<crate::nn::ParamId> {
    let mut ids = Vec::new();
    for b in blocks {
        ids.extend([
            b.conv1.weight,
            b.conv1.bias,
            b.act1.a,
            b.conv2.weight,
            b.conv2.bias,
            b.act2.a,
        ]);
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_check;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeedRng::new(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut().iter_mut() {
            *v = rng.normal() * 0.5;
        }
        t
    }

    #[test]
    fn block_shapes_follow_stride_contract() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeedRng::new(1);
        let b = BBlock::new(&mut store, &mut rng, "b", Partition::Encoder, 8);
        let d = DBlock::new(&mut store, &mut rng, "d", Partition::Encoder, 8, 16);
        let u = UBlock::new(&mut store, &mut rng, "u", Partition::DecoderTail, 16, 8);
        let x = rand_tensor(&[1, 8, 12, 10], 2);
        let (yb, _) = b.forward_t(&store, &x);
        assert_eq!(yb.shape(), &[1, 8, 12, 10]);
        let (yd, _) = d.forward_t(&store, &yb);
        assert_eq!(yd.shape(), &[1, 16, 6, 5]);
        let (yu, _) = u.forward_t(&store, &yd);
        assert_eq!(yu.shape(), &[1, 8, 12, 10]);
    }

    #[test]
    fn param_names_follow_dotted_scheme() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeedRng::new(1);
        let _ = BBlock::new(
            &mut store,
            &mut rng,
            "decoder.layer0",
            Partition::DecoderHead,
            4,
        );
        assert!(store.find("decoder.layer0.conv1.weight").is_some());
        assert!(store.find("decoder.layer0.conv2.bias").is_some());
        assert!(store.find("decoder.layer0.act1.slope").is_some());
    }

    fn block_objective_fd<Fwd>(x: &Tensor<f64>, gout: &Tensor<f64>, gin: &Tensor<f64>, fwd: Fwd)
    where
        Fwd: Fn(&Tensor<f64>) -> Tensor<f64>,
    {
        let analytic: Vec<f64> = gin.data().to_vec();
        let mut xbuf: Vec<f64> = x.data().to_vec();
        let shape = x.shape().to_vec();
        let worst = finite_difference_check(&mut xbuf, &analytic, 1e-5, 1e-6, |xs| {
            let xt = Tensor::from_vec(&shape, xs.to_vec());
            fwd(&xt)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(worst < 1e-5, "block input grad rel err {worst}");
    }

    #[test]
    fn dblock_backward_matches_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeedRng::new(5);
        let d = DBlock::new(&mut store, &mut rng, "d", Partition::Encoder, 3, 4);
        let x = rand_tensor(&[1, 3, 6, 6], 6);
        let (y, ctx) = d.forward_t(&store, &x);
        let gout = rand_tensor(y.shape(), 7);
        let mut grads = Gradients::new(&store, &[Partition::Encoder]);
        let gin = d.backward(&store, &ctx, &gout, &mut grads, true).unwrap();
        block_objective_fd(&x, &gout, &gin, |xt| d.forward_t(&store, xt).0);
    }

    #[test]
    fn ublock_backward_matches_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeedRng::new(8);
        let u = UBlock::new(&mut store, &mut rng, "u", Partition::DecoderHead, 4, 3);
        let x = rand_tensor(&[1, 4, 3, 3], 9);
        let (y, ctx) = u.forward_t(&store, &x);
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        let gout = rand_tensor(y.shape(), 10);
        let mut grads = Gradients::new(&store, &[Partition::DecoderHead]);
        let gin = u.backward(&store, &ctx, &gout, &mut grads, true).unwrap();
        block_objective_fd(&x, &gout, &gin, |xt| u.forward_t(&store, xt).0);
    }

    #[test]
    fn bblock_weight_grads_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeedRng::new(13);
        let b = BBlock::new(&mut store, &mut rng, "b", Partition::DecoderHead, 3);
        let x = rand_tensor(&[1, 3, 5, 5], 14);
        let (y, ctx) = b.forward_t(&store, &x);
        let gout = rand_tensor(y.shape(), 15);
        let mut grads = Gradients::new(&store, &[Partition::DecoderHead]);
        b.backward(&store, &ctx, &gout, &mut grads, false);

        for id in [b.conv1.weight, b.conv2.weight, b.act1.a] {
            let analytic: Vec<f64> = grads.get(id).to_vec();
            let mut buf: Vec<f64> = store.get(id).to_vec();
            let worst = finite_difference_check(&mut buf, &analytic, 1e-5, 1e-6, |vals| {
                let mut s2 = store.clone();
                s2.get_mut(id).copy_from_slice(vals);
                b.forward_t(&s2, &x)
                    .0
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(a, g)| a * g)
                    .sum()
            });
            assert!(
                worst < 1e-5,
                "param {} grad rel err {worst}",
                store.name(id)
            );
        }
    }
}
