//! Dense kernels and a small decoder-only transformer with chunked KV-cache
//! forward, including causal attention over prior cache chunks.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod kernels;
pub mod model;
pub mod params;

pub use attention::{causal_chunk_attention, CacheLeafLabel, CacheOrigin, CacheStore, KVChunk};
pub use config::ModelConfig;
pub use model::{forward_chunk, forward_full, predictable_tokens, ChunkForward};
pub use params::{LayerParams, Params};
