//! Deterministic simulator of a systolic-array accelerator running an
//! iterative denoising workload under aggressive voltage and frequency
//! scaling, with checksum-based fault detection and checkpoint rollback.

pub mod abft;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dvfs;
pub mod error;
pub mod fault;
pub mod memsim;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
