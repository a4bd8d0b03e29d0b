//! Frequency tables: quantizing model pmfs to integer frequencies that
//! sum to exactly 2^16 per channel.

use alloc::vec;
use alloc::vec::Vec;

use super::range::TOT_FREQ;
use crate::codec::prob::ProbabilityModel;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

/// One channel's symbol alphabet: `2L + 1` integer values followed by an
/// escape symbol for out-of-range values.
#[derive(Debug, Clone)]
pub struct ChannelTable {
    /// Cumulative frequencies, length `nsym + 1`, `cum[nsym] == 2^16`.
    pub cum: Vec<u32>,
}

impl ChannelTable {
    pub fn from_freqs(freqs: &[u32]) -> Self {
        debug_assert_eq!(freqs.iter().sum::<u32>(), TOT_FREQ);
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        ChannelTable { cum }
    }

    #[inline]
    pub fn n_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    #[inline]
    pub fn freq(&self, sym: usize) -> u32 {
        self.cum[sym + 1] - self.cum[sym]
    }

    #[inline]
    pub fn cum_of(&self, sym: usize) -> u32 {
        self.cum[sym]
    }

    /// Symbol whose `[cum, cum+freq)` slot contains `f`.
    #[inline]
    pub fn lookup(&self, f: u32) -> usize {
        // partition_point returns the first index with cum > f; symbols
        // start at index 0 = cum[0..1).
        self.cum.partition_point(|&c| c <= f) - 1
    }

    /// Shannon entropy of the quantized table in bits/symbol.
    pub fn entropy_bits(&self) -> f64 {
        let mut h = 0.0;
        for s in 0..self.n_symbols() {
            let p = self.freq(s) as f64 / TOT_FREQ as f64;
            if p > 0.0 {
                h -= p * p.log2();
            }
        }
        h
    }
}

/// Per-channel tables plus the support geometry they encode.
#[derive(Debug, Clone)]
pub struct CodingTables {
    pub tables: Vec<ChannelTable>,
    pub support_radius: i32,
}

impl CodingTables {
    /// Symbol index of an integer latent value, or the escape symbol.
    #[inline]
    pub fn symbol_of(&self, v: i32) -> usize {
        if v.abs() <= self.support_radius {
            (v + self.support_radius) as usize
        } else {
            self.escape_symbol()
        }
    }

    #[inline]
    pub fn value_of(&self, sym: usize) -> i32 {
        debug_assert!(sym < self.escape_symbol());
        sym as i32 - self.support_radius
    }

    #[inline]
    pub fn escape_symbol(&self) -> usize {
        2 * self.support_radius as usize + 1
    }
}

/// Quantizes nonnegative weights to integer frequencies summing to 2^16,
/// every entry at least 1. Largest-remainder rounding with deterministic
/// index tie-breaks; a uniform input that divides 2^16 exactly maps to
/// exact equal frequencies.
pub fn quantize_pmf(weights: &[f64]) -> Vec<u32> {
    let n = weights.len();
    assert!(n >= 1 && n <= TOT_FREQ as usize, "alphabet size {n}");
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut freqs = vec![1u32; n];
    let mut rems: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut sum: u64 = 0;
    for (i, &w) in weights.iter().enumerate() {
        let share = if total > 0.0 {
            w.max(0.0) / total * TOT_FREQ as f64
        } else {
            TOT_FREQ as f64 / n as f64
        };
        let f = (share.floor() as u32).max(1);
        freqs[i] = f;
        rems.push((i, share - share.floor()));
        sum += f as u64;
    }
    if sum < TOT_FREQ as u64 {
        // Hand out the deficit by largest fractional remainder, cycling
        // if one pass is not enough.
        rems.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut need = (TOT_FREQ as u64 - sum) as usize;
        let mut k = 0;
        while need > 0 {
            freqs[rems[k % n].0] += 1;
            need -= 1;
            k += 1;
        }
    } else if sum > TOT_FREQ as u64 {
        // Claw back the excess from the largest entries, never below 1.
        let mut excess = sum - TOT_FREQ as u64;
        while excess > 0 {
            let (imax, _) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty");
            debug_assert!(freqs[imax] > 1, "cannot shrink below floor");
            let take = ((freqs[imax] - 1) as u64).min(excess);
            freqs[imax] -= take as u32;
            excess -= take;
        }
    }
    debug_assert_eq!(freqs.iter().map(|&f| f as u64).sum::<u64>(), TOT_FREQ as u64);
    freqs
}

/// Builds the per-channel tables for a probability model snapshot.
pub fn build_coding_tables<S: Scalar>(
    pm: &ProbabilityModel,
    store: &ParamStore<S>,
) -> CodingTables {
    let mut tables = Vec::with_capacity(pm.channels);
    for ci in 0..pm.channels {
        let (mut probs, escape) = pm.pmf_table(store, ci);
        probs.push(escape);
        tables.push(ChannelTable::from_freqs(&quantize_pmf(&probs)));
    }
    CodingTables {
        tables,
        support_radius: pm.support_radius,
    }
}
