//! 2-D convolution (cross-correlation) via strip-mined im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::{he_normal, scoped, Gradients, ParamId, ParamStore, Partition};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Columns per im2col strip; bounds the scratch buffer to ~1 MiB.
const STRIP: usize = 256;

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers He-normal weights and a zero bias under `scope`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut SeedRng,
        scope: &str,
        partition: Partition,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let wshape = [out_c, in_c, k, k];
        let weight = store.register(
            &scoped(scope, "weight"),
            partition,
            &wshape,
            he_normal(rng, &wshape),
        );
        let bias = store.register(
            &scoped(scope, "bias"),
            partition,
            &[out_c],
            vec![S::ZERO; out_c],
        );
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    #[inline]
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.pad >= self.k && w + 2 * self.pad >= self.k,
            "conv input {h}x{w} smaller than kernel {}",
            self.k
        );
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Fills `col` (layout `[K, p1-p0]`, K = in_c*k*k) for one sample.
    #[allow(clippy::too_many_arguments)]
    fn im2col<S: Scalar>(
        &self,
        x: &[S],
        h: usize,
        w: usize,
        ow: usize,
        p0: usize,
        p1: usize,
        col: &mut [S],
    ) {
        let len = p1 - p0;
        let mut kk = 0usize;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for di in 0..self.k {
                for dj in 0..self.k {
                    let row = &mut col[kk * len..(kk + 1) * len];
                    for (idx, p) in (p0..p1).enumerate() {
                        let oy = p / ow;
                        let ox = p % ow;
                        let iy = (oy * self.stride + di) as isize - self.pad as isize;
                        let ix = (ox * self.stride + dj) as isize - self.pad as isize;
                        row[idx] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                        {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            S::ZERO
                        };
                    }
                    kk += 1;
                }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let n_pos = oh * ow;
        let kdim = self.in_c * self.k * self.k;
        let mut out: Tensor<S> = Tensor::zeros(&[n, self.out_c, oh, ow]);
        let wdata = store.get(self.weight);
        let bdata = store.get(self.bias);
        let mut col = vec![S::ZERO; kdim * STRIP.min(n_pos.max(1))];
        for s in 0..n {
            let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
            let out_base = s * self.out_c * n_pos;
            let mut p0 = 0;
            while p0 < n_pos {
                let p1 = (p0 + STRIP).min(n_pos);
                let len = p1 - p0;
                self.im2col(xs, h, w, ow, p0, p1, &mut col[..kdim * len]);
                unsafe {
                    S::gemm(
                        self.out_c,
                        kdim,
                        len,
                        S::ONE,
                        wdata.as_ptr(),
                        kdim as isize,
                        1,
                        col.as_ptr(),
                        len as isize,
                        1,
                        S::ZERO,
                        out.data_mut().as_mut_ptr().add(out_base + p0),
                        n_pos as isize,
                        1,
                    );
                }
                p0 = p1;
            }
            let od = out.data_mut();
            for m in 0..self.out_c {
                let b = bdata[m];
                for v in &mut od[out_base + m * n_pos..out_base + (m + 1) * n_pos] {
                    *v += b;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients (when wanted) and returns the
    /// input gradient unless `need_input_grad` is false.
    #[allow(clippy::needless_range_loop)]
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let (n, c, h, w) = x.dims4();
        let (gn, gc, oh, ow) = gout.dims4();
        assert_eq!((gn, gc), (n, self.out_c), "conv grad shape");
        let n_pos = oh * ow;
        let kdim = self.in_c * self.k * self.k;
        let wants_w = grads.wants(self.weight);
        let wants_b = grads.wants(self.bias);
        let wdata_copy: Vec<S> = if need_input_grad {
            store.get(self.weight).to_vec()
        } else {
            Vec::new()
        };
        let mut gin = if need_input_grad {
            Some(Tensor::zeros(&[n, c, h, w]))
        } else {
            None
        };
        let strip = STRIP.min(n_pos.max(1));
        let mut col = vec![S::ZERO; kdim * strip];
        let mut colgrad = vec![S::ZERO; kdim * strip];
        for s in 0..n {
            let xs_range = s * c * h * w..(s + 1) * c * h * w;
            let gout_base = s * self.out_c * n_pos;
            if wants_b {
                let gb = grads.slot_mut(self.bias);
                for m in 0..self.out_c {
                    let mut acc = S::ZERO;
                    for &g in &gout.data()[gout_base + m * n_pos..gout_base + (m + 1) * n_pos] {
                        acc += g;
                    }
                    gb[m] += acc;
                }
            }
            let mut p0 = 0;
            while p0 < n_pos {
                let p1 = (p0 + strip).min(n_pos);
                let len = p1 - p0;
                if wants_w {
                    self.im2col(
                        &x.data()[xs_range.clone()],
                        h,
                        w,
                        ow,
                        p0,
                        p1,
                        &mut col[..kdim * len],
                    );
                    // gw += gout_strip (M x L) * col^T (L x K)
                    unsafe {
                        S::gemm(
                            self.out_c,
                            len,
                            kdim,
                            S::ONE,
                            gout.data().as_ptr().add(gout_base + p0),
                            n_pos as isize,
                            1,
                            col.as_ptr(),
                            1,
                            len as isize,
                            S::ONE,
                            grads.slot_mut(self.weight).as_mut_ptr(),
                            kdim as isize,
                            1,
                        );
                    }
                }
                if let Some(gin) = gin.as_mut() {
                    // colgrad (K x L) = w^T (K x M) * gout_strip (M x L)
                    unsafe {
                        S::gemm(
                            kdim,
                            self.out_c,
                            len,
                            S::ONE,
                            wdata_copy.as_ptr(),
                            1,
                            kdim as isize,
                            gout.data().as_ptr().add(gout_base + p0),
                            n_pos as isize,
                            1,
                            S::ZERO,
                            colgrad.as_mut_ptr(),
                            len as isize,
                            1,
                        );
                    }
                    let gdata = gin.data_mut();
                    let mut kk = 0usize;
                    for ci in 0..self.in_c {
                        let plane = s * c * h * w + ci * h * w;
                        for di in 0..self.k {
                            for dj in 0..self.k {
                                let row = &colgrad[kk * len..(kk + 1) * len];
                                for (idx, p) in (p0..p1).enumerate() {
                                    let oy = p / ow;
                                    let ox = p % ow;
                                    let iy =
                                        (oy * self.stride + di) as isize - self.pad as isize;
                                    let ix =
                                        (ox * self.stride + dj) as isize - self.pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < h
                                        && (ix as usize) < w
                                    {
                                        let at = plane + iy as usize * w + ix as usize;
                                        gdata[at] += row[idx];
                                    }
                                }
                                kk += 1;
                            }
                        }
                    }
                }
                p0 = p1;
            }
        }
        gin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_check;

    fn naive_conv(
        x: &Tensor<f64>,
        w: &[f64],
        b: &[f64],
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, _, h, wd) = x.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, out_c, oh, ow]);
        for s in 0..n {
            for m in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[m];
                        for c in 0..in_c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let iy = (oy * stride + di) as isize - pad as isize;
                                    let ix = (ox * stride + dj) as isize - pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < h
                                        && (ix as usize) < wd
                                    {
                                        let xv = x.data()[((s * in_c + c) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize];
                                        let wv = w[((m * in_c + c) * k + di) * k + dj];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * out_c + m) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn build_case(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        seed: u64,
    ) -> (ParamStore<f64>, Conv2d, Tensor<f64>) {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed);
        let conv = Conv2d::new(
            &mut store,
            &mut rng,
            "conv",
            Partition::Encoder,
            in_c,
            out_c,
            k,
            stride,
            pad,
        );
        let mut x = Tensor::zeros(&[1, in_c, h, w]);
        for v in x.data_mut().iter_mut() {
            *v = rng.normal();
        }
        (store, conv, x)
    }

    #[test]
    fn forward_matches_naive_loops() {
        for &(in_c, out_c, k, stride, pad, h, w) in &[
            (2usize, 3usize, 3usize, 1usize, 1usize, 5usize, 6usize),
            (2, 3, 3, 2, 1, 7, 5),
            (3, 4, 4, 2, 1, 8, 8),
            (4, 2, 1, 1, 0, 6, 6),
            (1, 2, 3, 2, 1, 64, 64),
        ] {
            let (store, conv, x) = build_case(in_c, out_c, k, stride, pad, h, w, 7);
            let got = conv.forward(&store, &x);
            let want = naive_conv(
                &x,
                store.get(conv.weight),
                store.get(conv.bias),
                in_c,
                out_c,
                k,
                stride,
                pad,
            );
            assert_eq!(got.shape(), want.shape());
            let err = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-10, "max abs err {err} for case k={k} s={stride}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (store, conv, x) = build_case(2, 3, 3, 2, 1, 5, 6, 11);
        let mut rng = SeedRng::new(99);
        let (oh, ow) = conv.out_hw(5, 6);
        let mut gout = Tensor::<f64>::zeros(&[1, 3, oh, ow]);
        for v in gout.data_mut().iter_mut() {
            *v = rng.normal();
        }
        // Objective: sum(gout * conv(x)), whose exact gradient is what
        // backward() propagates for a fixed upstream gout.
        let mut grads = Gradients::new(&store, &[Partition::Encoder]);
        let gin = conv.backward(&store, &x, &gout, &mut grads, true).unwrap();

        // Input gradient.
        let analytic: Vec<f64> = gin.data().to_vec();
        let mut xbuf: Vec<f64> = x.data().to_vec();
        let shape = x.shape().to_vec();
        let worst = finite_difference_check(&mut xbuf, &analytic, 1e-5, 1e-6, |xs| {
            let xt = Tensor::from_vec(&shape, xs.to_vec());
            conv.forward(&store, &xt)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(y, g)| y * g)
                .sum()
        });
        assert!(worst < 1e-6, "input grad rel err {worst}");

        // Weight gradient.
        let analytic_w: Vec<f64> = grads.get(conv.weight).to_vec();
        let mut wbuf: Vec<f64> = store.get(conv.weight).to_vec();
        let worst_w = finite_difference_check(&mut wbuf, &analytic_w, 1e-5, 1e-6, |ws| {
            let mut s2 = store.clone();
            s2.get_mut(conv.weight).copy_from_slice(ws);
            conv.forward(&s2, &x)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(y, g)| y * g)
                .sum()
        });
        assert!(worst_w < 1e-6, "weight grad rel err {worst_w}");

        // Bias gradient: d/db_m = sum of gout over channel m.
        let gb = grads.get(conv.bias);
        let n_pos = oh * ow;
        for m in 0..3 {
            let want: f64 = gout.data()[m * n_pos..(m + 1) * n_pos].iter().sum();
            assert!((gb[m] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn frozen_partition_gets_no_weight_gradient() {
        let (store, conv, x) = build_case(2, 3, 3, 1, 1, 5, 5, 3);
        let gout = conv.forward(&store, &x);
        let mut grads = Gradients::new(&store, &[Partition::DecoderHead]);
        let gin = conv.backward(&store, &x, &gout, &mut grads, true);
        assert!(gin.is_some());
        assert!(grads.get(conv.weight).iter().all(|&v| v == 0.0));
        assert!(grads.get(conv.bias).iter().all(|&v| v == 0.0));
    }
}
