//! Parameter storage, partition bookkeeping, and the layer zoo.
//!
//! All learnable arrays live in a single [`ParamStore`]; layers hold
//! [`ParamId`] handles instead of owning their weights. Gradients are
//! accumulated in a separate [`Gradients`] object whose trainable mask is
//! decided per optimization step, so frozen parameters keep exactly-zero
//! gradient slots rather than discarded ones.

pub mod conv;
pub mod ops;

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CodecError;
use crate::rng::SeedRng;
use crate::scalar::Scalar;

/// Ownership label for a parameter array. Every array has exactly one.
///
/// `Fixed` marks arrays that are never trainable (the feature extractor);
/// it is not addressable from configuration strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Encoder,
    ProbabilityModel,
    DecoderHead,
    DecoderTail,
    Discriminator,
    Fixed,
}

impl Partition {
    pub const fn label(self) -> &'static str {
        match self {
            Partition::Encoder => "encoder",
            Partition::ProbabilityModel => "probability_model",
            Partition::DecoderHead => "decoder_head",
            Partition::DecoderTail => "decoder_tail",
            Partition::Discriminator => "discriminator",
            Partition::Fixed => "fixed",
        }
    }

    /// Parses a configuration label. `fixed` is internal and rejected here.
    pub fn from_label(s: &str) -> Result<Self, CodecError> {
        match s {
            "encoder" => Ok(Partition::Encoder),
            "probability_model" => Ok(Partition::ProbabilityModel),
            "decoder_head" => Ok(Partition::DecoderHead),
            "decoder_tail" => Ok(Partition::DecoderTail),
            "discriminator" => Ok(Partition::Discriminator),
            other => Err(CodecError::UnknownPartition(other.to_string())),
        }
    }
}

/// Handle to one parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ParamEntry<S> {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Central storage for every learnable array of a model.
///
/// Registration order is creation order and is the canonical iteration
/// order everywhere (hashing, checkpoints, optimizer state), which keeps
/// every downstream artifact deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    /// Registers a new array. Names must be unique within the store.
    pub fn register(
        &mut self,
        name: &str,
        partition: Partition,
        shape: &[usize],
        data: Vec<S>,
    ) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape does not match data length"
        );
        assert!(
            self.find(name).is_none(),
            "parameter {name} registered twice"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            partition,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    #[inline]
    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    #[inline]
    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    #[inline]
    pub fn partition(&self, id: ParamId) -> Partition {
        self.entries[id.0].partition
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids whose partition is in `parts`, in registration order.
    pub fn ids_in(&self, parts: &[Partition]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| parts.contains(&self.partition(id)))
            .collect()
    }

    /// Total number of scalar parameters in the given partitions.
    pub fn count_scalars(&self, parts: &[Partition]) -> usize {
        self.ids_in(parts)
            .iter()
            .map(|&id| self.get(id).len())
            .sum()
    }

    /// SHA-256 over (name, shape, values) of the given partitions, in
    /// registration order. Values are hashed as little-endian f64 bytes,
    /// which is exact for f32 stores.
    pub fn hash_partitions(&self, parts: &[Partition]) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.ids_in(parts) {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for &d in &e.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &e.data {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Hash over every array in the store.
    pub fn hash_all(&self) -> [u8; 32] {
        self.hash_partitions(&[
            Partition::Encoder,
            Partition::ProbabilityModel,
            Partition::DecoderHead,
            Partition::DecoderTail,
            Partition::Discriminator,
            Partition::Fixed,
        ])
    }

    /// Snapshot of one array as f32 (checkpoint payload format).
    pub fn to_f32_vec(&self, id: ParamId) -> Vec<f32> {
        self.get(id).iter().map(|v| v.to_f64() as f32).collect()
    }

    /// Overwrites one array from an f32 slice (checkpoint load).
    pub fn load_f32(&mut self, id: ParamId, data: &[f32]) -> Result<(), CodecError> {
        if data.len() != self.get(id).len() {
            return Err(CodecError::ShapeMismatch {
                expected: alloc::format!("{} scalars", self.get(id).len()),
                got: alloc::format!("{} scalars", data.len()),
            });
        }
        for (dst, &src) in self.entries[id.0].data.iter_mut().zip(data) {
            *dst = S::from_f32(src);
        }
        Ok(())
    }
}

/// Splits a store into (trainable, frozen) id lists by partition label.
pub fn partition_parameters<S: Scalar>(
    store: &ParamStore<S>,
    trainable: &[Partition],
) -> (Vec<ParamId>, Vec<ParamId>) {
    let mut train = Vec::new();
    let mut frozen = Vec::new();
    for id in store.ids() {
        if trainable.contains(&store.partition(id)) {
            train.push(id);
        } else {
            frozen.push(id);
        }
    }
    (train, frozen)
}

/// Per-parameter gradient buffers, allocated for every entry of a store.
///
/// Buffers for non-trainable entries stay exactly zero: layers consult
/// [`Gradients::wants`] before computing a parameter gradient, so frozen
/// gradients are never produced in the first place.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    slots: Vec<Vec<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> Gradients<S> {
    /// Zeroed gradients; only entries whose partition is in `trainable`
    /// will accept accumulation.
    pub fn new(store: &ParamStore<S>, trainable: &[Partition]) -> Self {
        let slots = store.ids().map(|id| vec![S::ZERO; store.get(id).len()]).collect();
        let mask = store
            .ids()
            .map(|id| trainable.contains(&store.partition(id)))
            .collect();
        Gradients {
            slots,
            trainable: mask,
        }
    }

    /// Gradients that reject all accumulation (pure input-gradient passes).
    pub fn frozen(store: &ParamStore<S>) -> Self {
        Self::new(store, &[])
    }

    /// Whether a layer should bother computing this parameter's gradient.
    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.slots[id.0]
    }

    /// Mutable accumulation target. Callers must check [`wants`] first;
    /// writing to a frozen slot is a logic error and panics in debug.
    #[inline]
    pub fn slot_mut(&mut self, id: ParamId) -> &mut [S] {
        debug_assert!(self.trainable[id.0], "gradient write to frozen parameter");
        &mut self.slots[id.0]
    }

    /// Adds `src` into the slot if trainable, otherwise does nothing.
    pub fn accumulate(&mut self, id: ParamId, src: &[S]) {
        if !self.trainable[id.0] {
            return;
        }
        let dst = &mut self.slots[id.0];
        assert_eq!(dst.len(), src.len(), "gradient length mismatch");
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    /// Elementwise sum with another gradient set (ordered batch reduction).
    pub fn add_from(&mut self, other: &Gradients<S>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    /// Scales every trainable slot.
    pub fn scale(&mut self, factor: S) {
        for (slot, &t) in self.slots.iter_mut().zip(&self.trainable) {
            if t {
                for v in slot.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Largest absolute gradient across the given partitions.
    pub fn max_abs_in(&self, store: &ParamStore<S>, parts: &[Partition]) -> f64 {
        let mut m = 0.0f64;
        for id in store.ids_in(parts) {
            for &v in &self.slots[id.0] {
                let a = v.to_f64().abs();
                if a > m {
                    m = a;
                }
            }
        }
        m
    }

    pub fn is_all_finite(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// He-normal initialization for a conv weight of shape
/// `[out_c, in_c, k, k]` (fan-in = `in_c * k * k`).
pub fn he_normal<S: Scalar>(rng: &mut SeedRng, shape: &[usize]) -> Vec<S> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(rng.normal() * std))
        .collect()
}

/// Maps `items` through `f`, in parallel under the `std` feature, and
/// returns results in input order so reductions stay deterministic.
#[cfg(feature = "std")]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "std"))]
pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Joins scope and leaf into a dotted parameter path.
pub fn scoped(scope: &str, leaf: &str) -> String {
    if scope.is_empty() {
        leaf.to_string()
    } else {
        let mut s = String::with_capacity(scope.len() + 1 + leaf.len());
        s.push_str(scope);
        s.push('.');
        s.push_str(leaf);
        s
    }
}

/// Numerically checks an analytic gradient against central differences.
///
/// `f` evaluates the scalar objective; `x` is perturbed in place one
/// coordinate at a time. Returns the worst relative error, where each
/// coordinate's error is normalized by `max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check<F>(
    x: &mut [f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
    mut f: F,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(x);
        x[i] = orig - eps;
        let fm = f(x);
        x[i] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(num.abs()).max(floor);
        let rel = (analytic[i] - num).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_labels_round_trip() {
        for p in [
            Partition::Encoder,
            Partition::ProbabilityModel,
            Partition::DecoderHead,
            Partition::DecoderTail,
            Partition::Discriminator,
        ] {
            assert_eq!(Partition::from_label(p.label()).unwrap(), p);
        }
        assert!(Partition::from_label("fixed").is_err());
        assert!(Partition::from_label("decoder").is_err());
    }

    #[test]
    fn store_register_and_lookup() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let id = store.register(
            "decoder.layer0.conv1.weight",
            Partition::DecoderHead,
            &[2, 3],
            vec![1.0; 6],
        );
        assert_eq!(store.find("decoder.layer0.conv1.weight"), Some(id));
        assert_eq!(store.shape(id), &[2, 3]);
        assert_eq!(store.partition(id), Partition::DecoderHead);
    }

    #[test]
    fn partition_split_covers_store() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("a", Partition::Encoder, &[1], vec![0.0]);
        store.register("b", Partition::DecoderHead, &[1], vec![0.0]);
        store.register("c", Partition::DecoderTail, &[1], vec![0.0]);
        let (train, frozen) =
            partition_parameters(&store, &[Partition::DecoderHead]);
        assert_eq!(train.len(), 1);
        assert_eq!(frozen.len(), 2);
        assert_eq!(store.name(train[0]), "b");
    }

    #[test]
    fn frozen_gradient_slots_stay_zero() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.register("a", Partition::Encoder, &[2], vec![0.0; 2]);
        let b = store.register("b", Partition::DecoderHead, &[2], vec![0.0; 2]);
        let mut g = Gradients::new(&store, &[Partition::DecoderHead]);
        assert!(!g.wants(a));
        assert!(g.wants(b));
        g.accumulate(a, &[5.0, 5.0]);
        g.accumulate(b, &[1.0, 2.0]);
        assert_eq!(g.get(a), &[0.0, 0.0]);
        assert_eq!(g.get(b), &[1.0, 2.0]);
    }

    #[test]
    fn store_hash_changes_with_values() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let id = store.register("w", Partition::Encoder, &[2], vec![1.0, 2.0]);
        let h1 = store.hash_partitions(&[Partition::Encoder]);
        store.get_mut(id)[0] = 1.5;
        let h2 = store.hash_partitions(&[Partition::Encoder]);
        assert_ne!(h1, h2);
    }

    #[test]
    fn finite_difference_agrees_on_quadratic() {
        // f(x) = sum x_i^2, grad = 2x.
        let mut x = vec![0.3f64, -1.2, 2.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let worst = finite_difference_check(&mut x, &analytic, 1e-5, 1e-8, |x| {
            x.iter().map(|v| v * v).sum()
        });
        assert!(worst < 1e-8, "worst rel error {worst}");
    }
}
