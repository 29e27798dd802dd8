//! Core library for dual-adapter adjustable super-resolution.

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod degrade;
pub mod error;
pub mod infer;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perception;
pub mod runlog;
pub mod schedule;
pub mod tensor;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};
