//! Core of a learned image codec aimed at machine-vision consumers.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation
//! over in-memory tensors (networks, losses, quantization, entropy
//! coding, metrics). File formats, dataset handling, and the CLI live in
//! the companion `icm` crate.
//!
//! Design pillars:
//! - one [`nn::ParamStore`] owns every learnable array; layers hold ids,
//!   so freezing a partition is structural rather than an optimizer hint;
//! - explicit forward/backward passes per layer (no tape), checked
//!   against central finite differences in f64;
//! - all randomness flows through [`rng::SeedRng`] and all reductions run
//!   in a fixed order, so identical seeds give identical artifacts.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

#[cfg(any(feature = "std", test))]
extern crate std;

pub mod codec;
pub mod entropy;
pub mod error;
pub mod gan;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{CodecError, CodingError, TrainError};
pub use scalar::Scalar;
pub use tensor::Tensor;
