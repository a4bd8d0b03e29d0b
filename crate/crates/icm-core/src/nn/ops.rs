//! Pointwise and structural layer primitives with explicit backward passes.

use alloc::vec;
use alloc::vec::Vec;

use super::{scoped, Gradients, ParamId, ParamStore, Partition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel parametric ReLU.
#[derive(Debug, Clone)]
pub struct PReLU {
    pub a: ParamId,
    pub channels: usize,
}

impl PReLU {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        scope: &str,
        partition: Partition,
        channels: usize,
    ) -> Self {
        let a = store.register(
            &scoped(scope, "slope"),
            partition,
            &[channels],
            vec![S::from_f64(0.25); channels],
        );
        PReLU { a, channels }
    }

    #[allow(clippy::needless_range_loop)]
    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "prelu channels");
        let a = store.get(self.a);
        let mut out = x.clone();
        let plane = h * w;
        for s in 0..n {
            for ci in 0..c {
                let ac = a[ci];
                let base = (s * c + ci) * plane;
                for v in &mut out.data_mut()[base..base + plane] {
                    if v.to_f64() < 0.0 {
                        *v *= ac;
                    }
                }
            }
        }
        out
    }

    /// `x` is the saved forward input.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        gout: &Tensor<S>,
        grads: &mut Gradients<S>,
    ) -> Tensor<S> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(x.shape(), gout.shape(), "prelu grad shape");
        let a = store.get(self.a).to_vec();
        let wants_a = grads.wants(self.a);
        let mut gin = Tensor::zeros(&[n, c, h, w]);
        let plane = h * w;
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * plane;
                let mut ga = S::ZERO;
                for i in base..base + plane {
                    let xv = x.data()[i];
                    let g = gout.data()[i];
                    if xv.to_f64() > 0.0 {
                        gin.data_mut()[i] = g;
                    } else {
                        gin.data_mut()[i] = g * a[ci];
                        ga += g * xv;
                    }
                }
                if wants_a {
                    let slot = grads.slot_mut(self.a);
                    slot[ci] += ga;
                }
            }
        }
        gin
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = x.clone();
    for v in out.data_mut().iter_mut() {
        if v.to_f64() < 0.0 {
            *v = S::ZERO;
        }
    }
    out
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x.shape(), gout.shape());
    let mut gin = gout.clone();
    for (g, &xv) in gin.data_mut().iter_mut().zip(x.data()) {
        if xv.to_f64() <= 0.0 {
            *g = S::ZERO;
        }
    }
    gin
}

pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: f64) -> Tensor<S> {
    let a = S::from_f64(slope);
    let mut out = x.clone();
    for v in out.data_mut().iter_mut() {
        if v.to_f64() < 0.0 {
            *v *= a;
        }
    }
    out
}

pub fn leaky_relu_backward<S: Scalar>(x: &Tensor<S>, gout: &Tensor<S>, slope: f64) -> Tensor<S> {
    assert_eq!(x.shape(), gout.shape());
    let a = S::from_f64(slope);
    let mut gin = gout.clone();
    for (g, &xv) in gin.data_mut().iter_mut().zip(x.data()) {
        if xv.to_f64() <= 0.0 {
            *g *= a;
        }
    }
    gin
}

/// `[n, c*r^2, h, w] -> [n, c, h*r, w*r]`; input channel `c*r^2 + dy*r + dx`
/// lands at output offset `(dy, dx)` within each `r x r` cell.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let (n, c_in, h, w) = x.dims4();
    assert_eq!(c_in % (r * r), 0, "pixel shuffle channel count");
    let c = c_in / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    let (oh, ow) = (h * r, w * r);
    for s in 0..n {
        for co in 0..c {
            for oy in 0..oh {
                let (sy, dy) = (oy / r, oy % r);
                for ox in 0..ow {
                    let (sx, dx) = (ox / r, ox % r);
                    let ci = co * r * r + dy * r + dx;
                    out.data_mut()[((s * c + co) * oh + oy) * ow + ox] =
                        x.data()[((s * c_in + ci) * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<S: Scalar>(gout: &Tensor<S>, r: usize) -> Tensor<S> {
    let (n, c, oh, ow) = gout.dims4();
    assert!(oh % r == 0 && ow % r == 0, "pixel shuffle grad dims");
    let (h, w) = (oh / r, ow / r);
    let c_in = c * r * r;
    let mut gin = Tensor::zeros(&[n, c_in, h, w]);
    for s in 0..n {
        for co in 0..c {
            for oy in 0..oh {
                let (sy, dy) = (oy / r, oy % r);
                for ox in 0..ow {
                    let (sx, dx) = (ox / r, ox % r);
                    let ci = co * r * r + dy * r + dx;
                    gin.data_mut()[((s * c_in + ci) * h + sy) * w + sx] =
                        gout.data()[((s * c + co) * oh + oy) * ow + ox];
                }
            }
        }
    }
    gin
}

/// Instance normalization without affine parameters.
///
/// Returns the normalized tensor and per-(sample, channel) inverse
/// standard deviations; both are needed for the backward pass.
pub fn instance_norm<S: Scalar>(x: &Tensor<S>, eps: f64) -> (Tensor<S>, Vec<S>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    assert!(plane > 0, "instance norm on empty plane");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut invstds = Vec::with_capacity(n * c);
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * plane;
            let xs = &x.data()[base..base + plane];
            let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / plane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (m, i) = (S::from_f64(mean), S::from_f64(inv));
            for (o, &v) in out.data_mut()[base..base + plane].iter_mut().zip(xs) {
                *o = (v - m) * i;
            }
            invstds.push(i);
        }
    }
    (out, invstds)
}

/// `y` is the normalized forward output, `invstd` the saved scales.
pub fn instance_norm_backward<S: Scalar>(
    y: &Tensor<S>,
    invstd: &[S],
    gout: &Tensor<S>,
) -> Tensor<S> {
    let (n, c, h, w) = y.dims4();
    assert_eq!(y.shape(), gout.shape());
    assert_eq!(invstd.len(), n * c);
    let plane = h * w;
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * plane;
            let ys = &y.data()[base..base + plane];
            let gs = &gout.data()[base..base + plane];
            let mean_g = gs.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64;
            let mean_gy = gs
                .iter()
                .zip(ys)
                .map(|(g, y)| g.to_f64() * y.to_f64())
                .sum::<f64>()
                / plane as f64;
            let inv = invstd[s * c + ci];
            let (mg, mgy) = (S::from_f64(mean_g), S::from_f64(mean_gy));
            for ((o, &g), &yv) in gin.data_mut()[base..base + plane]
                .iter_mut()
                .zip(gs)
                .zip(ys)
            {
                *o = inv * (g - mg - yv * mgy);
            }
        }
    }
    gin
}

/// Source index for reflection padding without edge repeat, folded so
/// pads of any size tile back and forth across the input.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads the bottom/right edges by reflection (without repeating the edge
/// sample); pads wider than the input keep mirroring back and forth.
pub fn pad_reflect_rb<S: Scalar>(x: &Tensor<S>, pb: usize, pr: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h + pb, w + pr);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for s in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = reflect_index(oy, h);
                for ox in 0..ow {
                    let sx = reflect_index(ox, w);
                    out.data_mut()[((s * c + ci) * oh + oy) * ow + ox] =
                        x.data()[((s * c + ci) * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Top-left crop back to `h x w`.
pub fn crop_nchw<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, c, ih, iw) = x.dims4();
    assert!(h <= ih && w <= iw, "crop larger than input");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = ((s * c + ci) * ih + y) * iw;
                let dst = ((s * c + ci) * h + y) * w;
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

/// Nearest-neighbor resize to an explicit target size (floor mapping).
pub fn upsample_nearest_to<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for s in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = oy * h / oh;
                for ox in 0..ow {
                    let sx = ox * w / ow;
                    out.data_mut()[((s * c + ci) * oh + oy) * ow + ox] =
                        x.data()[((s * c + ci) * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Scatter-add adjoint of [`upsample_nearest_to`] back to `h x w`.
pub fn upsample_nearest_backward<S: Scalar>(gout: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, c, oh, ow) = gout.dims4();
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    for s in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = oy * h / oh;
                for ox in 0..ow {
                    let sx = ox * w / ow;
                    let at = ((s * c + ci) * h + sy) * w + sx;
                    gin.data_mut()[at] =
                        gin.data_mut()[at] + gout.data()[((s * c + ci) * oh + oy) * ow + ox];
                }
            }
        }
    }
    gin
}
