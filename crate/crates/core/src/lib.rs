//! Core library for an 8-class facial-expression sequence classifier.
//!
//! Everything numeric lives here: a small reverse-mode autodiff tensor
//! engine ([`tensor`]), the multi-head attention branch ([`attention`]),
//! the transformer-encoder branch ([`encoder`]), the concatenation-fusion
//! classifier ([`fusion`]), the focal-loss / Adam / LR-range-test training
//! recipe ([`loss`], [`optim`], [`lr_finder`], [`train`]), macro-F1 scoring
//! ([`metrics`]) and the windowing/batching data model ([`data`]).
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats, the
//! CLI and fixture generation live in the companion `exprfuse-cli` crate.
//! All math is `f64` and deterministic: given the same seed, every forward
//! pass, shuffle and dropout mask is bit-identical across runs.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fmath;
pub mod fusion;
pub mod loss;
pub mod lr_finder;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Tape, Tensor};

/// Feature width produced by the backbone for every frame.
pub const FEATURE_DIM: usize = 888;
/// Number of frames per model sequence window.
pub const SEQ_LEN: usize = 64;
/// Number of expression classes.
pub const NUM_CLASSES: usize = 8;
/// Sentinel label marking padded / unannotated positions. Excluded from
/// loss and metrics.
pub const IGNORE_LABEL: i32 = -1;
