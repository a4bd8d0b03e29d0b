//! Patch discriminator: a small stack of stride-2 convolutions ending in
//! a logit map, one logit per receptive-field region.

use alloc::vec::Vec;

use crate::nn::conv::Conv2d;
use crate::nn::ops::{instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward};
use crate::nn::{Gradients, ParamStore, Partition};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Classifier over image patches. Body layers are 4x4 stride-2 convs with
/// leaky rectifier activations; instance normalization (affine-free) is
/// applied to every body layer after the first. A final 4x4 stride-1 conv
/// maps to a single-channel logit grid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub out: Conv2d,
    pub min_input: usize,
}

/// Per-layer activations saved by the forward pass.
#[derive(Debug)]
pub struct DiscLayerCtx<S> {
    x: Tensor<S>,
    y: Tensor<S>,
    invstd: Vec<S>,
}

#[derive(Debug)]
pub struct DiscCtx<S> {
    layers: Vec<DiscLayerCtx<S>>,
    feat: Tensor<S>,
}

impl Discriminator {
    /// Standard configuration: widths 64, 128, 256 and three body layers
    /// for patches of 64 and up, two for smaller patches.
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        patch_size: usize,
    ) -> Self {
        let depth = if patch_size >= 64 { 3 } else { 2 };
        Self::build_custom(store, rng, &[64, 128, 256][..depth])
    }

    /// Body widths are explicit; tests use narrow stacks.
    pub fn build_custom<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        widths: &[usize],
    ) -> Self {
        assert!(!widths.is_empty());
        let p = Partition::Discriminator;
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for (i, &w) in widths.iter().enumerate() {
            let scope = alloc::format!("discriminator.layer{i}");
            convs.push(Conv2d::new(store, rng, &scope, p, in_c, w, 4, 2, 1));
            in_c = w;
        }
        let out = Conv2d::new(store, rng, "discriminator.out", p, in_c, 1, 4, 1, 1);
        // Each stride-2 layer halves the grid; the head needs >= 4 pixels.
        let min_input = 4 << widths.len();
        Discriminator {
            convs,
            out,
            min_input,
        }
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, DiscCtx<S>) {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, 3, "discriminator sees RGB patches");
        assert!(
            h >= self.min_input && w >= self.min_input,
            "patch {h}x{w} below the {} minimum",
            self.min_input
        );
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let z = conv.forward(store, &cur);
            let (y, invstd) = if i > 0 {
                instance_norm(&z, NORM_EPS)
            } else {
                (z, Vec::new())
            };
            let a = leaky_relu(&y, LEAKY_SLOPE);
            layers.push(DiscLayerCtx { x: cur, y, invstd });
            cur = a;
        }
        let logits = self.out.forward(store, &cur);
        (logits, DiscCtx { layers, feat: cur })
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        self.forward_t(store, x).0
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &DiscCtx<S>,
        g_logits: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let mut g = self
            .out
            .backward(store, &ctx.feat, g_logits, grads, true)
            .expect("head input grad");
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let layer = &ctx.layers[i];
            let gy = leaky_relu_backward(&layer.y, &g, LEAKY_SLOPE);
            let gz = if i > 0 {
                instance_norm_backward(&layer.y, &layer.invstd, &gy)
            } else {
                gy
            };
            {
                let gx = conv.backward(store, &layer.x, &gz, grads, i > 0 || need_input_grad)?;
                g = gx
            }
        }
        Some(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_check;

    fn tiny_disc(widths: &[usize]) -> (ParamStore<f64>, Discriminator) {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(21);
        let d = Discriminator::build_custom(&mut store, &mut rng, widths);
        (store, d)
    }

    fn random_input(rng: &mut SeedRng, n: usize, hw: usize) -> Tensor<f64> {
        let mut x = Tensor::zeros(&[n, 3, hw, hw]);
        for v in x.data_mut() {
            *v = rng.normal() * 0.5;
        }
        x
    }

    #[test]
    fn logit_grid_shape_follows_patch_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeedRng::new(1);
        let d64 = Discriminator::build(&mut store, &mut rng, 64);
        assert_eq!(d64.convs.len(), 3);
        let x = Tensor::zeros(&[2, 3, 64, 64]);
        let logits = d64.forward(&store, &x);
        // 64 -> 32 -> 16 -> 8, then the 4x4 stride-1 head gives 7x7.
        assert_eq!(logits.shape(), &[2, 1, 7, 7]);

        let mut store2 = ParamStore::<f32>::new();
        let d32 = Discriminator::build(&mut store2, &mut rng, 32);
        assert_eq!(d32.convs.len(), 2);
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        assert_eq!(d32.forward(&store2, &x).shape(), &[1, 1, 7, 7]);
    }

    #[test]
    fn every_parameter_sits_in_the_discriminator_partition() {
        let (store, _) = tiny_disc(&[4, 6]);
        for id in store.ids() {
            assert_eq!(store.partition(id), Partition::Discriminator);
            assert!(store.name(id).starts_with("discriminator."));
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let (store, d) = tiny_disc(&[4, 5]);
        let mut rng = SeedRng::new(7);
        let x0 = random_input(&mut rng, 1, 16);
        // Scalar objective: weighted sum of logits.
        let (logits, ctx) = d.forward_t(&store, &x0);
        let mut r = SeedRng::new(33);
        let wts: Vec<f64> = (0..logits.numel()).map(|_| r.normal()).collect();
        let gl = Tensor::from_vec(logits.shape(), wts.clone());
        let mut grads = Gradients::new(&store, &[Partition::Discriminator]);
        let gx = d
            .backward(&store, &ctx, &gl, &mut grads, true)
            .expect("input grad");

        let mut x = x0.clone();
        let n = x.numel();
        let stride = (n / 41).max(1);
        for i in (0..n).step_by(stride) {
            let worst = finite_difference_check(
                &mut x.data_mut()[i..i + 1],
                &[gx.data()[i]],
                1e-5,
                1e-6,
                |probe| {
                    let mut xp = x0.clone();
                    xp.data_mut()[i] = probe[0];
                    let out = d.forward(&store, &xp);
                    out.data()
                        .iter()
                        .zip(&wts)
                        .map(|(&o, &w)| o * w)
                        .sum::<f64>()
                },
            );
            assert!(worst < 1e-5, "input grad {i}: rel err {worst}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let (mut store, d) = tiny_disc(&[3, 4]);
        let mut rng = SeedRng::new(9);
        let x = random_input(&mut rng, 1, 16);
        let (logits, ctx) = d.forward_t(&store, &x);
        let gl = Tensor::full(logits.shape(), 1.0 / logits.numel() as f64);
        let mut grads = Gradients::new(&store, &[Partition::Discriminator]);
        d.backward(&store, &ctx, &gl, &mut grads, false);

        for name in [
            "discriminator.layer0.weight",
            "discriminator.layer1.weight",
            "discriminator.out.weight",
            "discriminator.out.bias",
        ] {
            let id = store.find(name).unwrap();
            let analytic: Vec<f64> = grads.get(id).to_vec();
            let k = analytic.len().min(7);
            for j in 0..k {
                let orig = store.get(id)[j];
                let eps = 1e-5;
                store.get_mut(id)[j] = orig + eps;
                let up: f64 = d.forward(&store, &x).data().iter().sum::<f64>()
                    / logits.numel() as f64;
                store.get_mut(id)[j] = orig - eps;
                let dn: f64 = d.forward(&store, &x).data().iter().sum::<f64>()
                    / logits.numel() as f64;
                store.get_mut(id)[j] = orig;
                let num = (up - dn) / (2.0 * eps);
                let denom = analytic[j].abs().max(num.abs()).max(1e-6);
                assert!(
                    ((analytic[j] - num) / denom).abs() < 1e-5,
                    "{name}[{j}]: analytic {} vs numeric {num}",
                    analytic[j]
                );
            }
        }
    }
}
