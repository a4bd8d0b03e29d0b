//! Filesystem and CLI companion to `icm-core`: dataset ingestion,
//! checkpointing, training and finetuning runs, bitstream files, and
//! evaluation reports.

pub mod checkpoint;
pub mod cli;
pub mod codecfile;
pub mod compare;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod run;

pub use error::{PipelineError, Result};
