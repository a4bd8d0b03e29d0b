// Index arithmetic here mirrors the flattened [channel][j][i] layout;
// iterator forms would hide it.
#![allow(clippy::needless_range_loop)]

//! Per-channel factorized probability model over quantized latents.
//!
//! Each latent channel owns a tiny monotone network c(x): three affine
//! layers (dims 1 -> 3 -> 3 -> 1) with softplus-positive weights and
//! bounded tanh gates between them, squashed by a final sigmoid. Because
//! every stage is strictly increasing, c is a valid CDF and the integer
//! pmf is the difference of c at half-integer boundaries.
//!
//! The coded distribution mixes that pmf with a uniform floor over the
//! support `[-L, L]`: p(v) = (1-lam) * (c(v+1/2) - c(v-1/2)) + lam / (2L+1)
//! with lam = (2L+1) * 2^-16, so every in-support symbol has probability
//! at least 2^-16 while the total stays below one.

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{Gradients, ParamId, ParamStore, Partition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hidden width of the per-channel CDF network.
const HIDDEN: usize = 3;

/// Probability floor applied through the uniform mixture component.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

#[derive(Debug, Clone)]
pub struct ProbabilityModel {
    pub m0: ParamId,
    pub b0: ParamId,
    pub a0: ParamId,
    pub m1: ParamId,
    pub b1: ParamId,
    pub a1: ParamId,
    pub m2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub support_radius: i32,
}

/// Per-channel parameters after their positivity/bounding transforms,
/// gathered once per tensor pass. `dsp*` are softplus derivatives of the
/// raw weights, recovered as 1 - exp(-softplus).
#[derive(Debug, Clone)]
pub struct ChannelParams<S> {
    pub sp0: [S; HIDDEN],
    pub dsp0: [S; HIDDEN],
    pub b0: [S; HIDDEN],
    pub t0: [S; HIDDEN],
    pub sp1: [S; HIDDEN * HIDDEN],
    pub dsp1: [S; HIDDEN * HIDDEN],
    pub b1: [S; HIDDEN],
    pub t1: [S; HIDDEN],
    pub sp2: [S; HIDDEN],
    pub dsp2: [S; HIDDEN],
    pub b2: S,
}

/// Intermediate activations of one CDF evaluation.
#[derive(Debug, Clone)]
struct CdfCtx<S> {
    th1: [S; HIDDEN],
    v1: [S; HIDDEN],
    th2: [S; HIDDEN],
    v2: [S; HIDDEN],
    c: S,
}

/// Scratch gradient buffers, flushed into [`Gradients`] once per pass.
struct GradBufs<S> {
    m0: Vec<S>,
    b0: Vec<S>,
    a0: Vec<S>,
    m1: Vec<S>,
    b1: Vec<S>,
    a1: Vec<S>,
    m2: Vec<S>,
    b2: Vec<S>,
}

impl<S: Scalar> GradBufs<S> {
    fn new(channels: usize) -> Self {
        GradBufs {
            m0: vec![S::ZERO; channels * HIDDEN],
            b0: vec![S::ZERO; channels * HIDDEN],
            a0: vec![S::ZERO; channels * HIDDEN],
            m1: vec![S::ZERO; channels * HIDDEN * HIDDEN],
            b1: vec![S::ZERO; channels * HIDDEN],
            a1: vec![S::ZERO; channels * HIDDEN],
            m2: vec![S::ZERO; channels * HIDDEN],
            b2: vec![S::ZERO; channels],
        }
    }
}

impl ProbabilityModel {
    /// Registers parameters with an init whose overall CDF is roughly
    /// sigmoid(x/2), spreading mass over tens of integer bins so early
    /// training sees useful gradients across the whole support.
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        channels: usize,
        support_radius: i32,
    ) -> Self {
        assert!(support_radius > 0);
        let p = Partition::ProbabilityModel;
        // softplus^-1(0.5) and softplus^-1(1/3).
        let m_half = (0.5f64.exp() - 1.0).ln();
        let m_third = ((1.0f64 / 3.0).exp() - 1.0).ln();
        let rep = |v: f64, n: usize| vec![S::from_f64(v); n];
        let tile = |vals: &[f64]| -> Vec<S> {
            (0..channels * vals.len())
                .map(|i| S::from_f64(vals[i % vals.len()]))
                .collect()
        };
        let m0 = store.register(
            "probability_model.m0",
            p,
            &[channels, HIDDEN],
            rep(m_half, channels * HIDDEN),
        );
        let b0 = store.register(
            "probability_model.b0",
            p,
            &[channels, HIDDEN],
            tile(&[-2.0, 0.0, 2.0]),
        );
        let a0 = store.register(
            "probability_model.a0",
            p,
            &[channels, HIDDEN],
            rep(0.0, channels * HIDDEN),
        );
        let m1 = store.register(
            "probability_model.m1",
            p,
            &[channels, HIDDEN, HIDDEN],
            rep(m_third, channels * HIDDEN * HIDDEN),
        );
        let b1 = store.register(
            "probability_model.b1",
            p,
            &[channels, HIDDEN],
            tile(&[-1.0, 0.0, 1.0]),
        );
        let a1 = store.register(
            "probability_model.a1",
            p,
            &[channels, HIDDEN],
            rep(0.0, channels * HIDDEN),
        );
        let m2 = store.register(
            "probability_model.m2",
            p,
            &[channels, HIDDEN],
            rep(m_third, channels * HIDDEN),
        );
        let b2 = store.register(
            "probability_model.b2",
            p,
            &[channels, 1],
            rep(0.0, channels),
        );
        ProbabilityModel {
            m0,
            b0,
            a0,
            m1,
            b1,
            a1,
            m2,
            b2,
            channels,
            support_radius,
        }
    }

    /// Mixture weight of the uniform floor component.
    #[inline]
    pub fn lambda(&self) -> f64 {
        (2 * self.support_radius as usize + 1) as f64 * PMF_FLOOR
    }

    /// Number of integer symbols in the coded support.
    #[inline]
    pub fn support_size(&self) -> usize {
        2 * self.support_radius as usize + 1
    }

    pub fn channel_params<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ci: usize,
    ) -> ChannelParams<S> {
        assert!(ci < self.channels);
        let m0 = &store.get(self.m0)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let b0 = &store.get(self.b0)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let a0 = &store.get(self.a0)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let m1 = &store.get(self.m1)[ci * HIDDEN * HIDDEN..(ci + 1) * HIDDEN * HIDDEN];
        let b1 = &store.get(self.b1)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let a1 = &store.get(self.a1)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let m2 = &store.get(self.m2)[ci * HIDDEN..(ci + 1) * HIDDEN];
        let b2 = store.get(self.b2)[ci];
        let mut out = ChannelParams {
            sp0: [S::ZERO; HIDDEN],
            dsp0: [S::ZERO; HIDDEN],
            b0: [S::ZERO; HIDDEN],
            t0: [S::ZERO; HIDDEN],
            sp1: [S::ZERO; HIDDEN * HIDDEN],
            dsp1: [S::ZERO; HIDDEN * HIDDEN],
            b1: [S::ZERO; HIDDEN],
            t1: [S::ZERO; HIDDEN],
            sp2: [S::ZERO; HIDDEN],
            dsp2: [S::ZERO; HIDDEN],
            b2,
        };
        for i in 0..HIDDEN {
            out.sp0[i] = S::softplus(m0[i]);
            out.dsp0[i] = S::ONE - (S::ZERO - out.sp0[i]).exp();
            out.b0[i] = b0[i];
            out.t0[i] = a0[i].tanh();
            out.b1[i] = b1[i];
            out.t1[i] = a1[i].tanh();
            out.sp2[i] = S::softplus(m2[i]);
            out.dsp2[i] = S::ONE - (S::ZERO - out.sp2[i]).exp();
        }
        for i in 0..HIDDEN * HIDDEN {
            out.sp1[i] = S::softplus(m1[i]);
            out.dsp1[i] = S::ONE - (S::ZERO - out.sp1[i]).exp();
        }
        out
    }

    fn cdf_ctx<S: Scalar>(p: &ChannelParams<S>, x: S) -> CdfCtx<S> {
        let mut u1 = [S::ZERO; HIDDEN];
        let mut th1 = [S::ZERO; HIDDEN];
        let mut v1 = [S::ZERO; HIDDEN];
        for i in 0..HIDDEN {
            u1[i] = p.sp0[i] * x + p.b0[i];
            th1[i] = u1[i].tanh();
            v1[i] = u1[i] + p.t0[i] * th1[i];
        }
        let mut th2 = [S::ZERO; HIDDEN];
        let mut v2 = [S::ZERO; HIDDEN];
        let mut u3 = p.b2;
        for j in 0..HIDDEN {
            let mut u2 = p.b1[j];
            for i in 0..HIDDEN {
                u2 += p.sp1[j * HIDDEN + i] * v1[i];
            }
            th2[j] = u2.tanh();
            v2[j] = u2 + p.t1[j] * th2[j];
            u3 += p.sp2[j] * v2[j];
        }
        CdfCtx {
            th1,
            v1,
            th2,
            v2,
            c: S::sigmoid(u3),
        }
    }

    /// CDF value at `x` for channel `ci` (test and table surface).
    pub fn cdf<S: Scalar>(&self, store: &ParamStore<S>, ci: usize, x: f64) -> f64 {
        let p = self.channel_params(store, ci);
        Self::cdf_ctx(&p, S::from_f64(x)).c.to_f64()
    }

    /// dc/dx at `x`, used for latent gradients of the rate term.
    fn cdf_dx<S: Scalar>(p: &ChannelParams<S>, ctx: &CdfCtx<S>) -> S {
        let g_u3 = ctx.c * (S::ONE - ctx.c);
        let mut g_u2 = [S::ZERO; HIDDEN];
        for j in 0..HIDDEN {
            let g_v2 = g_u3 * p.sp2[j];
            g_u2[j] = g_v2 * (S::ONE + p.t1[j] * (S::ONE - ctx.th2[j] * ctx.th2[j]));
        }
        let mut g_x = S::ZERO;
        for i in 0..HIDDEN {
            let mut g_v1 = S::ZERO;
            for j in 0..HIDDEN {
                g_v1 += g_u2[j] * p.sp1[j * HIDDEN + i];
            }
            let g_u1 = g_v1 * (S::ONE + p.t0[i] * (S::ONE - ctx.th1[i] * ctx.th1[i]));
            g_x += g_u1 * p.sp0[i];
        }
        g_x
    }

    /// Backpropagates `g_c = dL/dc` of one CDF evaluation into the scratch
    /// buffers for channel `ci`; returns dL/dx.
    #[allow(clippy::too_many_arguments)]
    fn cdf_backward<S: Scalar>(
        p: &ChannelParams<S>,
        ctx: &CdfCtx<S>,
        x: S,
        g_c: S,
        ci: usize,
        bufs: &mut GradBufs<S>,
    ) -> S {
        let g_u3 = g_c * ctx.c * (S::ONE - ctx.c);
        bufs.b2[ci] += g_u3;
        let mut g_u2 = [S::ZERO; HIDDEN];
        for j in 0..HIDDEN {
            bufs.m2[ci * HIDDEN + j] += g_u3 * ctx.v2[j] * p.dsp2[j];
            let g_v2 = g_u3 * p.sp2[j];
            let dth2 = S::ONE - ctx.th2[j] * ctx.th2[j];
            g_u2[j] = g_v2 * (S::ONE + p.t1[j] * dth2);
            let g_t1 = g_v2 * ctx.th2[j];
            bufs.a1[ci * HIDDEN + j] += g_t1 * (S::ONE - p.t1[j] * p.t1[j]);
            bufs.b1[ci * HIDDEN + j] += g_u2[j];
        }
        let mut g_x = S::ZERO;
        for i in 0..HIDDEN {
            let mut g_v1 = S::ZERO;
            for j in 0..HIDDEN {
                g_v1 += g_u2[j] * p.sp1[j * HIDDEN + i];
                bufs.m1[ci * HIDDEN * HIDDEN + j * HIDDEN + i] += g_u2[j] * ctx.v1[i] * p.dsp1[j * HIDDEN + i];
            }
            let dth1 = S::ONE - ctx.th1[i] * ctx.th1[i];
            let g_u1 = g_v1 * (S::ONE + p.t0[i] * dth1);
            let g_t0 = g_v1 * ctx.th1[i];
            bufs.a0[ci * HIDDEN + i] += g_t0 * (S::ONE - p.t0[i] * p.t0[i]);
            bufs.b0[ci * HIDDEN + i] += g_u1;
            bufs.m0[ci * HIDDEN + i] += g_u1 * x * p.dsp0[i];
            g_x += g_u1 * p.sp0[i];
        }
        g_x
    }

    /// Mixture probability of value `v` (integer or noisy) for channel
    /// params `p`. In-support values carry the uniform floor share;
    /// out-of-support values fall back to a hard floor.
    pub fn prob<S: Scalar>(&self, p: &ChannelParams<S>, v: f64) -> f64 {
        let hi = Self::cdf_ctx(p, S::from_f64(v + 0.5)).c.to_f64();
        let lo = Self::cdf_ctx(p, S::from_f64(v - 0.5)).c.to_f64();
        let raw = (hi - lo).max(0.0);
        let lam = self.lambda();
        if v.abs() <= self.support_radius as f64 + 0.5 {
            (1.0 - lam) * raw + lam / self.support_size() as f64
        } else {
            ((1.0 - lam) * raw).max(PMF_FLOOR)
        }
    }

    /// Elementwise probabilities of a latent tensor `[1, C, h, w]`.
    pub fn likelihood<S: Scalar>(&self, store: &ParamStore<S>, latent: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = latent.dims4();
        assert_eq!(c, self.channels, "latent channels");
        let plane = h * w;
        let mut out = Tensor::zeros(latent.shape());
        for ci in 0..c {
            let p = self.channel_params(store, ci);
            for s in 0..n {
                let base = (s * c + ci) * plane;
                for i in base..base + plane {
                    out.data_mut()[i] =
                        S::from_f64(self.prob(&p, latent.data()[i].to_f64()));
                }
            }
        }
        out
    }

    /// Total information content in bits: sum of -log2 p over elements.
    pub fn rate_bits<S: Scalar>(&self, store: &ParamStore<S>, latent: &Tensor<S>) -> f64 {
        let probs = self.likelihood(store, latent);
        probs.data().iter().map(|p| -p.to_f64().log2()).sum()
    }

    /// Backward pass of `scale * sum(-log2 p)`: accumulates probability
    /// model gradients (if trainable) and returns the latent gradient.
    pub fn rate_backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        latent: &Tensor<S>,
        scale: f64,
        grads: &mut Gradients<S>,
    ) -> Tensor<S> {
        let (n, c, h, w) = latent.dims4();
        assert_eq!(c, self.channels, "latent channels");
        let plane = h * w;
        let wants_params = grads.wants(self.m0);
        let mut bufs = GradBufs::new(self.channels);
        let mut gin = Tensor::zeros(latent.shape());
        let ln2 = core::f64::consts::LN_2;
        let lam = self.lambda();
        let uniform = lam / self.support_size() as f64;
        for ci in 0..c {
            let p = self.channel_params(store, ci);
            for s in 0..n {
                let base = (s * c + ci) * plane;
                for i in base..base + plane {
                    let v = latent.data()[i].to_f64();
                    let in_support = v.abs() <= self.support_radius as f64 + 0.5;
                    let ctx_hi = Self::cdf_ctx(&p, S::from_f64(v + 0.5));
                    let ctx_lo = Self::cdf_ctx(&p, S::from_f64(v - 0.5));
                    let raw = (ctx_hi.c.to_f64() - ctx_lo.c.to_f64()).max(0.0);
                    let prob = if in_support {
                        (1.0 - lam) * raw + uniform
                    } else {
                        ((1.0 - lam) * raw).max(PMF_FLOOR)
                    };
                    let floored = !in_support && (1.0 - lam) * raw <= PMF_FLOOR;
                    if floored {
                        continue;
                    }
                    // L = scale * (-log2 prob) => dL/dprob = -scale/(prob ln2).
                    let g_prob = -scale / (prob * ln2);
                    let g_c = S::from_f64(g_prob * (1.0 - lam));
                    let d_hi = Self::cdf_dx(&p, &ctx_hi);
                    let d_lo = Self::cdf_dx(&p, &ctx_lo);
                    gin.data_mut()[i] = g_c * (d_hi - d_lo);
                    if wants_params {
                        let xh = S::from_f64(v + 0.5);
                        let xl = S::from_f64(v - 0.5);
                        Self::cdf_backward(&p, &ctx_hi, xh, g_c, ci, &mut bufs);
                        Self::cdf_backward(&p, &ctx_lo, xl, S::ZERO - g_c, ci, &mut bufs);
                    }
                }
            }
        }
        if wants_params {
            grads.accumulate(self.m0, &bufs.m0);
            grads.accumulate(self.b0, &bufs.b0);
            grads.accumulate(self.a0, &bufs.a0);
            grads.accumulate(self.m1, &bufs.m1);
            grads.accumulate(self.b1, &bufs.b1);
            grads.accumulate(self.a1, &bufs.a1);
            grads.accumulate(self.m2, &bufs.m2);
            grads.accumulate(self.b2, &bufs.b2);
        }
        gin
    }

    /// Integer pmf over the support plus the leftover escape mass, as f64
    /// (the range coder's table builder input).
    pub fn pmf_table<S: Scalar>(&self, store: &ParamStore<S>, ci: usize) -> (Vec<f64>, f64) {
        let p = self.channel_params(store, ci);
        let l = self.support_radius;
        let lam = self.lambda();
        let mut probs = Vec::with_capacity(self.support_size());
        for v in -l..=l {
            probs.push(self.prob(&p, v as f64));
        }
        let mass =
            Self::cdf_ctx(&p, S::from_f64(l as f64 + 0.5)).c.to_f64()
                - Self::cdf_ctx(&p, S::from_f64(-(l as f64) - 0.5)).c.to_f64();
        let escape = ((1.0 - lam) * (1.0 - mass)).max(0.0);
        (probs, escape)
    }

    /// First 8 bytes (LE) of the parameter hash; stored in bitstreams to
    /// detect model/stream mismatches at decode time.
    pub fn hash8<S: Scalar>(&self, store: &ParamStore<S>) -> u64 {
        let h = store.hash_partitions(&[Partition::ProbabilityModel]);
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }
}
