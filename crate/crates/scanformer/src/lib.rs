//! Host-side companion of `scanformer-core`: file formats (RNGT, PLY, PNG),
//! checkpoints, dataset dumps, the training driver, evaluation and
//! benchmarking, and the HTTP scanning service.

pub mod alloc_stats;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod ply;
pub mod rngt;
pub mod service;
pub mod training;

pub use error::{IoError, Result};
