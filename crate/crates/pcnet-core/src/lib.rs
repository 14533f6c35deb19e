//! Desk-scale pairwise-comparison network for scene classification.
//!
//! The crate is organized around a small dense-tensor core with reverse-mode
//! automatic differentiation ([`tensor`], [`tape`], [`ops`]), the channel
//! attention and mutual-representation pipeline ([`attention`]), the model and
//! its losses ([`model`]), in-batch pair mining ([`pairing`]), dataset
//! ingestion and the procedural synthetic set ([`data`]), the SGD training
//! loop with checkpointing ([`training`]) and evaluation plus the ablation
//! harness ([`evaluation`]).
//!
//! Hot kernels are data-parallel via rayon when the `parallel` feature
//! (default) is enabled; every kernel also has a sequential twin used as the
//! fallback and by the benchmark suite.

pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod pairing;
pub(crate) mod parallel;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
