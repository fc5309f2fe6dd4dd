//! Unified sparse 2D/3D vision transformer training stack.
//!
//! 2D images and 3D volumes share one tokenizer, one 3D rotary position
//! scheme and one encoder. Variable-length samples are packed into a single
//! sequence with exact per-sample attention, trained with a centroid
//! prediction loss plus an isotropic-Gaussian regularizer on random 1D
//! projections, and evaluated with linear probes on frozen features.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atomic;
pub mod cli;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod objective;
pub mod packing;
pub mod params;
pub mod rng;
pub mod rope3d;
pub mod substrate;
pub mod tokenizer;
pub mod training;
pub mod views;

pub use error::{Error, Result};
