//! Algorithmic core for mean-teacher cross-domain detection.
//!
//! Everything in this crate is pure computation over `f64` buffers: a small
//! tape-based autograd, the simplified two-stage detector, the three
//! consistency losses (region-level, inter-graph, intra-graph), EMA weight
//! tracking, and detection evaluation. IO, datasets and the CLI live in the
//! companion `mtor` crate.

#![no_std]

extern crate alloc;

pub mod boxes;
pub mod consistency;
pub mod detector;
pub mod ema;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod toy2d;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
