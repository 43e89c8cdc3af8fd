//! Core of a feed-forward multi-view transformer that reconstructs source-view
//! cameras and renders novel-view RGB and point maps from a cached implicit
//! scene representation.
//!
//! This crate is `no_std` compatible (it needs `alloc`). Everything here is a
//! pure function of its inputs: camera geometry, the procedural scene
//! generator and ray caster, the masked attention trunk with its KV-cache, the
//! training objective and optimizer math, and the evaluation metrics. File
//! formats, the CLI and the HTTP service live in the `scanformer` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod attention;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod real;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{CameraPose, Intrinsics, PluckerMap, PointCloud, Similarity};
pub use linalg::{Mat3, Vec3};
pub use real::Real;
