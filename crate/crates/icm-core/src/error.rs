//! Error types shared across the core.

use alloc::string::String;
use core::fmt;

/// Configuration and shape errors raised by the network stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    /// Tensor shapes do not line up for the requested operation.
    ShapeMismatch { expected: String, got: String },
    /// A configuration value is inconsistent with the model.
    Config(String),
    /// A partition label string does not name a known partition.
    UnknownPartition(String),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            CodecError::Config(msg) => write!(f, "configuration error: {msg}"),
            CodecError::UnknownPartition(label) => write!(f, "unknown partition label: {label}"),
        }
    }
}

/// Bitstream encode/decode failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodingError {
    /// Stream does not start with the expected magic bytes.
    BadMagic,
    /// Format version is not supported by this build.
    UnsupportedVersion(u8),
    /// Stream ended before the header or payload was complete.
    Truncated,
    /// Footer checksum does not match the stream contents.
    ChecksumMismatch { expected: u32, got: u32 },
    /// The probability-model hash in the header does not match the tables
    /// supplied for decoding.
    ModelHashMismatch,
    /// Header fields describe an impossible latent geometry.
    BadHeader(String),
}

impl fmt::Display for CodingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodingError::BadMagic => write!(f, "not an ICM bitstream (bad magic)"),
            CodingError::UnsupportedVersion(v) => write!(f, "unsupported bitstream version {v}"),
            CodingError::Truncated => write!(f, "truncated bitstream"),
            CodingError::ChecksumMismatch { expected, got } => {
                write!(f, "checksum mismatch: expected {expected:08x}, got {got:08x}")
            }
            CodingError::ModelHashMismatch => {
                write!(f, "bitstream was coded with a different probability model")
            }
            CodingError::BadHeader(msg) => write!(f, "bad bitstream header: {msg}"),
        }
    }
}

/// Failures raised by training and finetuning steps.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// A loss value stopped being finite; carries the step index and the
    /// offending term values for the diagnostic dump.
    NonFinite { step: u64, detail: String },
    /// The training batch or dataset is empty.
    EmptyBatch,
    /// A configuration value is invalid for this run.
    Config(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            TrainError::EmptyBatch => write!(f, "empty batch"),
            TrainError::Config(msg) => write!(f, "invalid training configuration: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CodecError {}
#[cfg(feature = "std")]
impl std::error::Error for CodingError {}
#[cfg(feature = "std")]
impl std::error::Error for TrainError {}
