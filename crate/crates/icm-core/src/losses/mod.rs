//! Training objective for the base codec.
//!
//! L_total = w_rate * rate + w_mse * mse + w_task * proxy, where rate is
//! bits per source pixel under the latent probability model, mse is pixel
//! reconstruction error, and proxy is feature MSE at strides 4 and 16 of
//! the fixed extractor.

pub mod fpn;

pub use fpn::{mse_grad_wrt_first, tensor_mse, FeatureExtractor, Pyramid};

/// Weights of the three base-training terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub w_rate: f64,
    pub w_mse: f64,
    pub w_task: f64,
}

impl Default for LossWeights {
    /// Desk-scale defaults; mse dominates early so reconstructions leave
    /// the gray-average regime quickly.
    fn default() -> Self {
        LossWeights {
            w_rate: 1.0,
            w_mse: 16.0,
            w_task: 1.0,
        }
    }
}

/// One sample's loss terms. `rate_bpp` is bits per source pixel of the
/// pre-padding image, not the padded one.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub proxy: f64,
}

impl LossBreakdown {
    pub fn combine(rate_bpp: f64, mse: f64, proxy: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            total: w.w_rate * rate_bpp + w.w_mse * mse + w.w_task * proxy,
            rate_bpp,
            mse,
            proxy,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.rate_bpp += other.rate_bpp;
        self.mse += other.mse;
        self.proxy += other.proxy;
    }

    pub fn scale(&mut self, k: f64) {
        self.total *= k;
        self.rate_bpp *= k;
        self.mse *= k;
        self.proxy *= k;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.rate_bpp.is_finite()
            && self.mse.is_finite()
            && self.proxy.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_weights_each_term() {
        let w = LossWeights {
            w_rate: 2.0,
            w_mse: 3.0,
            w_task: 5.0,
        };
        let b = LossBreakdown::combine(1.0, 10.0, 100.0, &w);
        assert_eq!(b.total, 2.0 + 30.0 + 500.0);
        assert_eq!(b.rate_bpp, 1.0);
    }

    #[test]
    fn default_weights_match_documented_profile() {
        let w = LossWeights::default();
        assert_eq!((w.w_rate, w.w_mse, w.w_task), (1.0, 16.0, 1.0));
    }

    #[test]
    fn zero_weight_drops_a_term() {
        let w = LossWeights {
            w_rate: 1.0,
            w_mse: 0.0,
            w_task: 1.0,
        };
        let b = LossBreakdown::combine(0.5, 123.0, 0.25, &w);
        assert_eq!(b.total, 0.75);
    }
}
