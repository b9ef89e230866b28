//! Chunked forward pass of the decoder.
//!
//! One call processes one chunk of tokens against the cache prefix, returning
//! the chunk loss and the chunk's KV tensors. In recording mode the KV
//! tensors stay graph-attached (gradient relays hook onto them); in inference
//! mode they are detached requires-grad leaves, i.e. checkpoints.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::attention::{causal_chunk_attention, CacheOrigin, KVChunk};
use crate::nn::config::ModelConfig;
use crate::nn::kernels as k;
use crate::nn::params::Params;
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};

/// Output of one chunk forward.
pub struct ChunkForward<T> {
    pub loss: Value<T>,
    pub loss_value: f64,
    pub kv: KVChunk<T>,
}

/// Number of next-token targets in a sequence of `n` tokens. The first token
/// is never a target; every other position is predicted by its predecessor.
pub fn predictable_tokens(n: usize) -> usize {
    n.saturating_sub(1)
}

/// Forward one chunk `tokens[range]` against the cache prefix.
///
/// The chunk loss is the sum of next-token cross-entropy over the chunk's
/// predictable positions divided by the whole sequence's predictable-token
/// count, so chunk losses sum to the unchunked mean loss. The first token of
/// chunk j>1 is the target of chunk j-1's last position.
pub fn forward_chunk<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    range: Range<usize>,
    cache_prefix: &[KVChunk<T>],
    loss_denom: usize,
) -> Result<ChunkForward<T>> {
    let (start, end) = (range.start, range.end);
    assert!(start < end && end <= tokens.len(), "bad chunk range");
    let chunk = &tokens[start..end];
    let c = chunk.len();
    let offset = start;
    let cache_end = cache_prefix.last().map(|ch| ch.end_position()).unwrap_or(0);
    if cache_end != offset {
        return Err(Error::PositionDiscontinuity { expected: cache_end, got: offset });
    }
    if end > cfg.max_position {
        return Err(Error::InvalidArg(format!(
            "sequence end {} exceeds max_position {}",
            end, cfg.max_position
        )));
    }
    for &t in chunk {
        if t >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
    }

    let recording = tape.is_recording();
    let mut x = k::embedding(tape, &params.embed, chunk)?;
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);

    for (layer, lp) in params.layers.iter().enumerate() {
        let h = k::rmsnorm(tape, &x, &lp.attn_norm, cfg.norm_eps);
        let q_proj = k::matmul(tape, &h, &lp.wq);
        let q = k::rope(tape, &q_proj, offset, cfg.n_heads);
        let k_proj = k::matmul(tape, &h, &lp.wk);
        let key = k::rope(tape, &k_proj, offset, cfg.n_heads);
        let val = k::matmul(tape, &h, &lp.wv);
        let attn =
            causal_chunk_attention(tape, &q, &key, &val, cache_prefix, layer, offset, cfg.n_heads)?;
        let attn_out = k::matmul(tape, &attn, &lp.wo);
        x = k::add(tape, &x, &attn_out);

        let h2 = k::rmsnorm(tape, &x, &lp.ffn_norm, cfg.norm_eps);
        let gate_in = k::matmul(tape, &h2, &lp.w_gate);
        let gate = k::silu(tape, &gate_in);
        let up = k::matmul(tape, &h2, &lp.w_up);
        let gated = k::mul(tape, &gate, &up);
        let ffn = k::matmul(tape, &gated, &lp.w_down);
        x = k::add(tape, &x, &ffn);

        // Cache stores post-rotation keys; checkpoints are detached leaves.
        if recording {
            keys.push(key);
            values.push(val);
        } else {
            keys.push(key.detach());
            values.push(val.detach());
        }
    }

    let xn = k::rmsnorm(tape, &x, &params.final_norm, cfg.norm_eps);
    let logits = k::matmul(tape, &xn, &params.head);
    let target_end = (end + 1).min(tokens.len());
    let targets = &tokens[start + 1..target_end];
    let loss = k::cross_entropy_lm(tape, &logits, targets, loss_denom)?;
    let loss_value = loss.scalar().as_f64();

    let kv = KVChunk {
        keys,
        values,
        position_offset: offset,
        len: c,
        origin: if recording { CacheOrigin::Reconstructed } else { CacheOrigin::Checkpoint },
    };
    Ok(ChunkForward { loss, loss_value, kv })
}

/// Unchunked forward of the whole sequence; the loss oracle for chunked runs.
pub fn forward_full<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
) -> Result<ChunkForward<T>> {
    let denom = predictable_tokens(tokens.len());
    forward_chunk(tape, cfg, params, tokens, 0..tokens.len(), &[], denom)
}
