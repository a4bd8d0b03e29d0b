//! The image codec: a strided residual encoder, a PixelShuffle decoder
//! split into finetunable head and frozen-capable tail, and the
//! factorized latent probability model.

pub mod blocks;
pub mod prob;
pub mod quantize;

use alloc::format;
use alloc::string::String;

use crate::error::CodecError;
use crate::nn::conv::Conv2d;
use crate::nn::{Gradients, ParamStore, Partition};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use blocks::{BBlock, BlockCtx, DBlock, PsUp, UBlock};
use prob::ProbabilityModel;

/// Spatial downsampling factor between image and latent grid.
pub const LATENT_STRIDE: usize = 8;

/// Largest coded integer magnitude; values beyond it use escape coding.
pub const SUPPORT_RADIUS: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CodecConfig {
    /// Channel width of every residual block.
    pub width: usize,
    /// Latent channel count; must equal `width` because the first decoder
    /// block is an identity-shortcut residual on the latent itself.
    pub latent_channels: usize,
}

impl CodecConfig {
    /// Desk-scale profile used by the test suite.
    pub fn tiny() -> Self {
        CodecConfig {
            width: 32,
            latent_channels: 32,
        }
    }

    /// Full-scale profile matching the reference configuration.
    pub fn paper() -> Self {
        CodecConfig {
            width: 128,
            latent_channels: 128,
        }
    }

    pub fn from_profile(name: &str) -> Result<Self, CodecError> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(CodecError::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.width == 0 || self.latent_channels == 0 {
            return Err(CodecError::Config(String::from(
                "width and latent_channels must be positive",
            )));
        }
        if self.width != self.latent_channels {
            return Err(CodecError::Config(format!(
                "latent_channels {} must equal width {}",
                self.latent_channels, self.width
            )));
        }
        Ok(())
    }
}

/// Encoder: D B D B + stride-2 conv, 8x total downsampling.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layer0: DBlock,
    pub layer1: BBlock,
    pub layer2: DBlock,
    pub layer3: BBlock,
    pub layer4: Conv2d,
}

#[derive(Debug)]
pub struct EncoderCtx<S> {
    l0: BlockCtx<S>,
    l1: BlockCtx<S>,
    l2: BlockCtx<S>,
    l3: BlockCtx<S>,
    x4: Tensor<S>,
}

impl Encoder {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &CodecConfig,
    ) -> Self {
        let p = Partition::Encoder;
        let w = cfg.width;
        Encoder {
            layer0: DBlock::new(store, rng, "encoder.layer0", p, 3, w),
            layer1: BBlock::new(store, rng, "encoder.layer1", p, w),
            layer2: DBlock::new(store, rng, "encoder.layer2", p, w, w),
            layer3: BBlock::new(store, rng, "encoder.layer3", p, w),
            layer4: Conv2d::new(
                store,
                rng,
                "encoder.layer4",
                p,
                w,
                cfg.latent_channels,
                3,
                2,
                1,
            ),
        }
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, EncoderCtx<S>) {
        let (h, w) = {
            let (_, c, h, w) = x.dims4();
            assert_eq!(c, 3, "encoder expects RGB input");
            (h, w)
        };
        assert!(
            h % LATENT_STRIDE == 0 && w % LATENT_STRIDE == 0,
            "encoder input {h}x{w} must be padded to a multiple of {LATENT_STRIDE}"
        );
        let (y0, l0) = self.layer0.forward_t(store, x);
        let (y1, l1) = self.layer1.forward_t(store, &y0);
        let (y2, l2) = self.layer2.forward_t(store, &y1);
        let (y3, l3) = self.layer3.forward_t(store, &y2);
        let y = self.layer4.forward(store, &y3);
        (
            y,
            EncoderCtx {
                l0,
                l1,
                l2,
                l3,
                x4: y3,
            },
        )
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        self.forward_t(store, x).0
    }

    /// Parameter gradients only; image-space input gradients are never
    /// needed.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &EncoderCtx<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
    ) {
        let g4 = self
            .layer4
            .backward(store, &ctx.x4, gout, grads, true)
            .expect("layer4 input grad");
        let g3 = self
            .layer3
            .backward(store, &ctx.l3, &g4, grads, true)
            .expect("layer3 input grad");
        let g2 = self
            .layer2
            .backward(store, &ctx.l2, &g3, grads, true)
            .expect("layer2 input grad");
        let g1 = self
            .layer1
            .backward(store, &ctx.l1, &g2, grads, true)
            .expect("layer1 input grad");
        self.layer0.backward(store, &ctx.l0, &g1, grads, false);
    }
}

/// Decoder: B U B U B + PixelShuffle head to RGB, 8x total upsampling.
/// The first two layers form the finetunable `decoder_head` partition.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layer0: BBlock,
    pub layer1: UBlock,
    pub layer2: BBlock,
    pub layer3: UBlock,
    pub layer4: BBlock,
    pub layer5: PsUp,
}

#[derive(Debug)]
pub struct DecoderCtx<S> {
    l0: BlockCtx<S>,
    l1: BlockCtx<S>,
    l2: BlockCtx<S>,
    l3: BlockCtx<S>,
    l4: BlockCtx<S>,
    x5: Tensor<S>,
}

impl Decoder {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: &CodecConfig,
    ) -> Self {
        let w = cfg.width;
        let head = Partition::DecoderHead;
        let tail = Partition::DecoderTail;
        let dec = Decoder {
            layer0: BBlock::new(store, rng, "decoder.layer0", head, cfg.latent_channels),
            layer1: UBlock::new(store, rng, "decoder.layer1", head, w, w),
            layer2: BBlock::new(store, rng, "decoder.layer2", tail, w),
            layer3: UBlock::new(store, rng, "decoder.layer3", tail, w, w),
            layer4: BBlock::new(store, rng, "decoder.layer4", tail, w),
            layer5: PsUp::new(store, rng, "decoder.layer5", tail, w, 3),
        };
        // Calibrate the output layer: reconstructions start near mid-gray
        // instead of at the raw He-init scale, which would ask the
        // optimizer to walk biases across several units before any
        // detail can emerge.
        let k = S::from_f64(0.1);
        for v in store.get_mut(dec.layer5.conv.weight) {
            *v *= k;
        }
        let half = S::from_f64(0.5);
        for v in store.get_mut(dec.layer5.conv.bias) {
            *v = half;
        }
        dec
    }

    pub fn forward_t<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        latent: &Tensor<S>,
    ) -> (Tensor<S>, DecoderCtx<S>) {
        let (y0, l0) = self.layer0.forward_t(store, latent);
        let (y1, l1) = self.layer1.forward_t(store, &y0);
        let (y2, l2) = self.layer2.forward_t(store, &y1);
        let (y3, l3) = self.layer3.forward_t(store, &y2);
        let (y4, l4) = self.layer4.forward_t(store, &y3);
        let y = self.layer5.forward(store, &y4);
        (
            y,
            DecoderCtx {
                l0,
                l1,
                l2,
                l3,
                l4,
                x5: y4,
            },
        )
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, latent: &Tensor<S>) -> Tensor<S> {
        self.forward_t(store, latent).0
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &DecoderCtx<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_latent_grad: bool,
    ) -> Option<Tensor<S>> {
        let g5 = self
            .layer5
            .backward(store, &ctx.x5, gout, grads, true)
            .expect("layer5 input grad");
        let g4 = self
            .layer4
            .backward(store, &ctx.l4, &g5, grads, true)
            .expect("layer4 input grad");
        let g3 = self
            .layer3
            .backward(store, &ctx.l3, &g4, grads, true)
            .expect("layer3 input grad");
        let g2 = self
            .layer2
            .backward(store, &ctx.l2, &g3, grads, true)
            .expect("layer2 input grad");
        let g1 = self
            .layer1
            .backward(store, &ctx.l1, &g2, grads, true)
            .expect("layer1 input grad");
        self.layer0
            .backward(store, &ctx.l0, &g1, grads, need_latent_grad)
    }
}

/// Complete codec model: encoder, decoder, and probability model sharing
/// one parameter store.
#[derive(Debug, Clone)]
pub struct IcmModel {
    pub cfg: CodecConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub pm: ProbabilityModel,
}

impl IcmModel {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        cfg: CodecConfig,
    ) -> Result<Self, CodecError> {
        cfg.validate()?;
        let encoder = Encoder::build(store, rng, &cfg);
        let decoder = Decoder::build(store, rng, &cfg);
        let pm = ProbabilityModel::build(store, cfg.latent_channels, SUPPORT_RADIUS);
        Ok(IcmModel {
            cfg,
            encoder,
            decoder,
            pm,
        })
    }

    /// Fresh model with a deterministic parameter init.
    pub fn new_seeded<S: Scalar>(
        cfg: CodecConfig,
        seed: u64,
    ) -> Result<(ParamStore<S>, Self), CodecError> {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed).fork("model_init", 0);
        let model = Self::build(&mut store, &mut rng, cfg)?;
        Ok((store, model))
    }

    /// Reconstruction for a pre-padded input: encode, round, decode.
    pub fn roundtrip<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let y = self.encoder.forward(store, x);
        let q = quantize::quantize_round(&y);
        self.decoder.forward(store, &q)
    }
}

/// Adds an alternating bias offset to the decoder's final PixelShuffle
/// conv: the (0,0) subpixel of every 2x2 cell moves up by `delta` and the
/// (1,1) subpixel down, imprinting a Nyquist checkerboard of amplitude
/// `delta` on reconstructions without touching the bitstream path.
pub fn inject_checkerboard<S: Scalar>(store: &mut ParamStore<S>, decoder: &Decoder, delta: f64) {
    let bias = store.get_mut(decoder.layer5.conv.bias);
    assert_eq!(bias.len(), 12, "final conv maps to 3 colors x 4 positions");
    for color in 0..3 {
        bias[color * 4] += S::from_f64(delta);
        bias[color * 4 + 3] -= S::from_f64(delta);
    }
}

/// Adds Gaussian noise of `scale` times each array's RMS to every
/// decoder-head parameter. Knocking the head off its trained equilibrium
/// makes the frozen tail's per-phase PixelShuffle kernels disagree again,
/// which reads out as checkerboard energy; because only head arrays move,
/// a later finetune of the head can undo the damage.
pub fn perturb_decoder_head<S: Scalar>(store: &mut ParamStore<S>, rng: &mut SeedRng, scale: f64) {
    for id in store.ids_in(&[Partition::DecoderHead]) {
        let rms = {
            let d = store.get(id);
            let ss: f64 = d.iter().map(|v| v.to_f64() * v.to_f64()).sum();
            (ss / d.len() as f64).sqrt()
        };
        if rms <= 0.0 {
            continue;
        }
        for v in store.get_mut(id) {
            *v += rng.normal_scaled::<S>(scale * rms);
        }
    }
}
