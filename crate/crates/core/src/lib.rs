//! Chunk-wise training engine for a small decoder-only transformer.
//!
//! The sequence is split into chunks whose KV caches act as gradient
//! checkpoints along the sequence dimension. Training runs in three modes:
//! naive parallel (one full graph, the exactness reference), sequential
//! chunk-wise (per-chunk graphs with gradient relays, exact up to float
//! reordering), and sparse chunk-wise (backpropagation through a sampled
//! subset of chunks with a compensation factor on each relay).
//!
//! Alongside the engine live the instruments that check its claims: a
//! finite-difference oracle, a linear-recurrence model whose gradient chains
//! are enumerable in exact rational arithmetic, combinatorial path counting,
//! and byte/FLOP ledgers.

// Kernel code indexes several parallel row-major buffers per loop; iterator
// rewrites obscure the stride arithmetic.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod analysis;
pub mod chunkwise;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod profile;
pub mod scalar;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
