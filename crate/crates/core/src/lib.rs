//! Training and certification of quantized networks whose dot products are
//! guaranteed to fit a chosen accumulator width.
//!
//! The crate is organized bottom-up:
//!
//! - [`qcore`]: integer tensors, data types, quantize / dequantize.
//! - [`bounds`]: accumulator width lower bounds and l1 budgets.
//! - [`wnq`]: the l1-capped weight-normalization quantizer and the baseline.
//! - [`model`] and [`train`]: dense networks, STE gradients, optimizers, fitting.
//! - [`infer`]: bit-accurate integer execution with P-bit accumulators.
//! - [`attack`]: closed-form worst-case inputs and fuzzing.
//! - [`metrics`]: sparsity, entropy and compression estimates.
//! - [`checkpoint`], [`config`], [`data`], [`sweep`]: artifacts and drivers.
//!
//! With the default `parallel` feature, batch evaluation, fuzzing, attacks
//! and sweeps fan out over rayon; without it they run sequentially with
//! identical results.

pub mod attack;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod par;
pub mod qcore;
pub mod reals;
pub mod sweep;
pub mod train;
pub mod wnq;

pub use error::{Error, Result};
