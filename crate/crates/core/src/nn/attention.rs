//! Causal attention over prior cache chunks plus the current chunk.
//!
//! The cache is a list of per-chunk key/value tensors with contiguous
//! absolute offsets. Checkpoint-origin chunks are detached
//! gradient-accumulating leaves written by the inference pass; reconstructed
//! chunks are graph-attached. The attention backward recomputes the softmax
//! probabilities from saved Q/K instead of storing an O(context) probability
//! matrix, which is what keeps per-chunk saved bytes independent of sequence
//! length.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::profile::Phase;
use crate::scalar::Scalar;
use crate::tape::{debug_check_finite, AdjointSink, BackwardOp, LeafId, NodeId, Tape, Value};

/// Whether a chunk's tensors are detached checkpoints or live graph values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOrigin {
    Checkpoint,
    Reconstructed,
}

/// One chunk's per-layer keys and values, each `[len, d_model]`, with the
/// absolute index of its first token.
#[derive(Clone)]
pub struct KVChunk<T> {
    pub keys: Vec<Value<T>>,
    pub values: Vec<Value<T>>,
    pub position_offset: usize,
    pub len: usize,
    pub origin: CacheOrigin,
}

impl<T: Scalar> KVChunk<T> {
    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn end_position(&self) -> usize {
        self.position_offset + self.len
    }

    pub fn byte_size(&self) -> u64 {
        self.keys.iter().map(|v| v.byte_size()).sum::<u64>()
            + self.values.iter().map(|v| v.byte_size()).sum::<u64>()
    }

    pub fn grad_bytes(&self) -> u64 {
        self.keys
            .iter()
            .chain(self.values.iter())
            .filter(|v| v.has_grad())
            .map(|v| v.byte_size())
            .sum()
    }

    pub fn zero_grads(&self) {
        for v in self.keys.iter().chain(self.values.iter()) {
            v.zero_grad();
        }
    }
}

/// Identifies a cache tensor when tracing gradient reachability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLeafLabel {
    pub chunk: usize,
    pub layer: usize,
    pub is_key: bool,
}

/// Ordered, contiguous chunk list: chunk i+1 starts where chunk i ends.
pub struct CacheStore<T> {
    chunks: Vec<KVChunk<T>>,
    layers: usize,
}

impl<T: Scalar> CacheStore<T> {
    pub fn new(layers: usize) -> Self {
        CacheStore { chunks: Vec::new(), layers }
    }

    pub fn push(&mut self, chunk: KVChunk<T>) -> Result<()> {
        if chunk.layers() != self.layers || chunk.values.len() != self.layers {
            return Err(Error::ShapeMismatch {
                op: "cache_push",
                detail: format!("chunk has {} layers, cache expects {}", chunk.layers(), self.layers),
            });
        }
        let expected = self.end_position();
        if chunk.position_offset != expected {
            return Err(Error::PositionDiscontinuity { expected, got: chunk.position_offset });
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn end_position(&self) -> usize {
        self.chunks.last().map(|c| c.end_position()).unwrap_or(0)
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk(&self, i: usize) -> &KVChunk<T> {
        &self.chunks[i]
    }

    pub fn chunks(&self) -> &[KVChunk<T>] {
        &self.chunks
    }

    pub fn prefix(&self, upto: usize) -> &[KVChunk<T>] {
        &self.chunks[..upto]
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.byte_size()).sum()
    }

    pub fn grad_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.grad_bytes()).sum()
    }

    pub fn zero_grads(&self) {
        for c in &self.chunks {
            c.zero_grads();
        }
    }

    /// Map from leaf id to cache position, for gradient-reachability traces.
    pub fn leaf_labels(&self) -> Vec<(LeafId, CacheLeafLabel)> {
        let mut out = Vec::new();
        for (ci, chunk) in self.chunks.iter().enumerate() {
            for layer in 0..chunk.layers() {
                if let Some(id) = chunk.keys[layer].leaf_id() {
                    out.push((id, CacheLeafLabel { chunk: ci, layer, is_key: true }));
                }
                if let Some(id) = chunk.values[layer].leaf_id() {
                    out.push((id, CacheLeafLabel { chunk: ci, layer, is_key: false }));
                }
            }
        }
        out
    }
}

struct ChunkRef<T> {
    k_node: Option<NodeId>,
    v_node: Option<NodeId>,
    k_data: Rc<Vec<T>>,
    v_data: Rc<Vec<T>>,
    len: usize,
}

struct AttentionRule<T> {
    q_node: Option<NodeId>,
    kc_node: Option<NodeId>,
    vc_node: Option<NodeId>,
    q_data: Rc<Vec<T>>,
    kc_data: Rc<Vec<T>>,
    vc_data: Rc<Vec<T>>,
    cache: Vec<ChunkRef<T>>,
    rows: usize,
    n_heads: usize,
    head_dim: usize,
    ctx_sum: u64,
}

impl<T: Scalar> AttentionRule<T> {
    fn d(&self) -> usize {
        self.n_heads * self.head_dim
    }

    fn cache_len(&self) -> usize {
        self.cache.iter().map(|c| c.len).sum()
    }

    /// Key row at context index `j` (cache chunks first, then current chunk).
    fn key_row(&self, j: usize) -> &[T] {
        let d = self.d();
        let mut idx = j;
        for c in &self.cache {
            if idx < c.len {
                return &c.k_data[idx * d..(idx + 1) * d];
            }
            idx -= c.len;
        }
        &self.kc_data[idx * d..(idx + 1) * d]
    }

    fn value_row(&self, j: usize) -> &[T] {
        let d = self.d();
        let mut idx = j;
        for c in &self.cache {
            if idx < c.len {
                return &c.v_data[idx * d..(idx + 1) * d];
            }
            idx -= c.len;
        }
        &self.vc_data[idx * d..(idx + 1) * d]
    }
}

fn attention_forward<T: Scalar>(rule: &AttentionRule<T>) -> Vec<T> {
    let d = rule.d();
    let (h_count, dh) = (rule.n_heads, rule.head_dim);
    let cache_len = rule.cache_len();
    let inv_scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); rule.rows * d];
    let mut scores: Vec<T> = Vec::new();
    let mut probs: Vec<T> = Vec::new();
    for i in 0..rule.rows {
        let ctx = cache_len + i + 1;
        scores.resize(ctx, T::zero());
        probs.resize(ctx, T::zero());
        for h in 0..h_count {
            let col = h * dh;
            let q_row = &rule.q_data[i * d + col..i * d + col + dh];
            for j in 0..ctx {
                let k_row = &rule.key_row(j)[col..col + dh];
                let mut dot = T::zero();
                for (a, b) in q_row.iter().zip(k_row) {
                    dot = dot + *a * *b;
                }
                scores[j] = dot * inv_scale;
            }
            crate::nn::kernels::softmax_row_into(&scores[..ctx], &mut probs[..ctx]);
            let out_row = &mut out[i * d + col..i * d + col + dh];
            for j in 0..ctx {
                let p = probs[j];
                let v_row = &rule.value_row(j)[col..col + dh];
                for (o, v) in out_row.iter_mut().zip(v_row) {
                    *o = *o + p * *v;
                }
            }
        }
    }
    out
}

impl<T: Scalar> BackwardOp<T> for AttentionRule<T> {
    fn family(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let d = self.d();
        let (h_count, dh) = (self.n_heads, self.head_dim);
        let cache_len = self.cache_len();
        let inv_scale = T::of_f64(1.0 / (dh as f64).sqrt());

        let mut dq = vec![T::zero(); self.rows * d];
        let mut dk_cur = vec![T::zero(); self.rows * d];
        let mut dv_cur = vec![T::zero(); self.rows * d];
        let mut dk_cache: Vec<Vec<T>> =
            self.cache.iter().map(|c| vec![T::zero(); c.len * d]).collect();
        let mut dv_cache: Vec<Vec<T>> =
            self.cache.iter().map(|c| vec![T::zero(); c.len * d]).collect();

        // Splits a context index into (cache chunk, row) or current row.
        let locate = |j: usize| -> (Option<usize>, usize) {
            let mut idx = j;
            for (ci, c) in self.cache.iter().enumerate() {
                if idx < c.len {
                    return (Some(ci), idx);
                }
                idx -= c.len;
            }
            (None, idx)
        };

        let mut scores: Vec<T> = Vec::new();
        let mut probs: Vec<T> = Vec::new();
        let mut dscores: Vec<T> = Vec::new();
        for i in 0..self.rows {
            let ctx = cache_len + i + 1;
            scores.resize(ctx, T::zero());
            probs.resize(ctx, T::zero());
            dscores.resize(ctx, T::zero());
            for h in 0..h_count {
                let col = h * dh;
                let q_row = &self.q_data[i * d + col..i * d + col + dh];
                // Recompute the probability row from saved Q/K.
                for j in 0..ctx {
                    let k_row = &self.key_row(j)[col..col + dh];
                    let mut dot = T::zero();
                    for (a, b) in q_row.iter().zip(k_row) {
                        dot = dot + *a * *b;
                    }
                    scores[j] = dot * inv_scale;
                }
                crate::nn::kernels::softmax_row_into(&scores[..ctx], &mut probs[..ctx]);

                let g_out = &adj[i * d + col..i * d + col + dh];
                // dV and d(probs); then softmax VJP into dscores.
                let mut dot = T::zero();
                for j in 0..ctx {
                    let v_row = &self.value_row(j)[col..col + dh];
                    let mut dp = T::zero();
                    for (g, v) in g_out.iter().zip(v_row) {
                        dp = dp + *g * *v;
                    }
                    dscores[j] = dp;
                    dot = dot + dp * probs[j];
                }
                for j in 0..ctx {
                    dscores[j] = probs[j] * (dscores[j] - dot) * inv_scale;
                    let p = probs[j];
                    let (chunk, row) = locate(j);
                    let (dk_row, dv_row) = match chunk {
                        Some(ci) => (
                            &mut dk_cache[ci][row * d + col..row * d + col + dh],
                            &mut dv_cache[ci][row * d + col..row * d + col + dh],
                        ),
                        None => (
                            &mut dk_cur[row * d + col..row * d + col + dh],
                            &mut dv_cur[row * d + col..row * d + col + dh],
                        ),
                    };
                    let ds = dscores[j];
                    let k_row = self.key_row(j);
                    for x in 0..dh {
                        dv_row[x] = dv_row[x] + p * g_out[x];
                        dk_row[x] = dk_row[x] + ds * q_row[x];
                        dq[i * d + col + x] = dq[i * d + col + x] + ds * k_row[col + x];
                    }
                }
            }
        }

        if let Some(n) = self.q_node {
            sink.accumulate(n, &dq);
        }
        if let Some(n) = self.kc_node {
            sink.accumulate(n, &dk_cur);
        }
        if let Some(n) = self.vc_node {
            sink.accumulate(n, &dv_cur);
        }
        for (ci, c) in self.cache.iter().enumerate() {
            if let Some(n) = c.k_node {
                sink.accumulate(n, &dk_cache[ci]);
            }
            if let Some(n) = c.v_node {
                sink.accumulate(n, &dv_cache[ci]);
            }
        }
    }

    fn backward_flops(&self) -> u64 {
        2 * (4 * self.d() as u64 + 5 * self.n_heads as u64) * self.ctx_sum
    }

    fn recompute_flops(&self) -> u64 {
        (2 * self.d() as u64 + 5 * self.n_heads as u64) * self.ctx_sum
    }
}

/// Causal attention of the current chunk's queries over `cache_prefix` plus
/// the current chunk's own keys/values. Token at absolute position p attends
/// to every cached position and to current positions <= p; scores are scaled
/// by 1/sqrt(head_dim). `q`, `k_cur`, `v_cur` are `[rows, d_model]` with keys
/// already rotated.
pub fn causal_chunk_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: &Value<T>,
    k_cur: &Value<T>,
    v_cur: &Value<T>,
    cache_prefix: &[KVChunk<T>],
    layer: usize,
    offset: usize,
    n_heads: usize,
) -> Result<Value<T>> {
    let (rows, d) = (q.shape()[0], q.shape()[1]);
    assert_eq!(k_cur.shape(), q.shape(), "attention: k shape mismatch");
    assert_eq!(v_cur.shape(), q.shape(), "attention: v shape mismatch");
    assert_eq!(d % n_heads, 0, "attention: d_model not divisible by heads");
    let cache_end = cache_prefix.last().map(|c| c.end_position()).unwrap_or(0);
    if cache_end != offset {
        return Err(Error::PositionDiscontinuity { expected: cache_end, got: offset });
    }

    let recording = tape.is_recording();
    let mut cache_refs = Vec::with_capacity(cache_prefix.len());
    for chunk in cache_prefix {
        let (kn, vn) = if recording {
            (tape.parent_of(&chunk.keys[layer]), tape.parent_of(&chunk.values[layer]))
        } else {
            (None, None)
        };
        cache_refs.push(ChunkRef {
            k_node: kn,
            v_node: vn,
            k_data: chunk.keys[layer].data_rc(),
            v_data: chunk.values[layer].data_rc(),
            len: chunk.len,
        });
    }
    let cache_len: usize = cache_refs.iter().map(|c| c.len).sum();
    let ctx_sum: u64 = (0..rows).map(|i| (cache_len + i + 1) as u64).sum();

    let (qn, kn, vn) = if recording {
        (tape.parent_of(q), tape.parent_of(k_cur), tape.parent_of(v_cur))
    } else {
        (None, None, None)
    };
    let rule = AttentionRule {
        q_node: qn,
        kc_node: kn,
        vc_node: vn,
        q_data: q.data_rc(),
        kc_data: k_cur.data_rc(),
        vc_data: v_cur.data_rc(),
        cache: cache_refs,
        rows,
        n_heads,
        head_dim: d / n_heads,
        ctx_sum,
    };
    let data = attention_forward(&rule);
    debug_check_finite("attention", &data);
    tape.meter().add_flops(
        "attention",
        Phase::Forward,
        (4 * d as u64 + 5 * n_heads as u64) * ctx_sum,
    );
    if !recording {
        return Ok(Value::constant(data, vec![rows, d]));
    }
    let parents: Vec<NodeId> = rule
        .q_node
        .into_iter()
        .chain(rule.kc_node)
        .chain(rule.vc_node)
        .chain(rule.cache.iter().flat_map(|c| c.k_node.into_iter().chain(c.v_node)))
        .collect();
    // Only the current chunk's graph-sourced Q/K/V count as saved activation
    // bytes; cache references are leaves and belong to the KV-cache category.
    let saved = [q, k_cur, v_cur]
        .iter()
        .filter(|v| v.node().is_some())
        .map(|v| v.byte_size())
        .sum();
    Ok(tape.emit(Box::new(rule), parents, data, vec![rows, d], saved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Meter;
    use crate::tape::Mode;

    fn value_from(rows: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Value<f64> {
        let data: Vec<f64> = (0..rows * d).map(|i| f(i / d, i % d)).collect();
        Value::leaf(data, vec![rows, d])
    }

    #[test]
    fn single_token_empty_cache_returns_value() {
        let mut tape = Tape::new(Mode::Recording, Meter::new());
        let q = value_from(1, 4, |_, c| 0.3 * c as f64 - 0.1);
        let k = value_from(1, 4, |_, c| 0.7 - 0.2 * c as f64);
        let v = value_from(1, 4, |_, c| 1.0 + c as f64);
        let out = causal_chunk_attention(&mut tape, &q, &k, &v, &[], 0, 0, 2).unwrap();
        for (o, x) in out.data().iter().zip(v.data()) {
            assert!((o - x).abs() < 1e-15);
        }
    }

    #[test]
    fn chunked_matches_full_sequence() {
        // Two chunks of 2 against one chunk of 4 with identical tokens.
        let rows = 4usize;
        let d = 6usize;
        let heads = 3usize;
        let gen = |r: usize, c: usize| ((r * 31 + c * 17) % 13) as f64 * 0.11 - 0.6;
        let gen_k = |r: usize, c: usize| ((r * 7 + c * 5) % 11) as f64 * 0.13 - 0.7;
        let gen_v = |r: usize, c: usize| ((r * 3 + c * 19) % 17) as f64 * 0.07 - 0.5;

        let mut tape = Tape::<f64>::new(Mode::Inference, Meter::new());
        let q_full = value_from(rows, d, gen);
        let k_full = value_from(rows, d, gen_k);
        let v_full = value_from(rows, d, gen_v);
        let full =
            causal_chunk_attention(&mut tape, &q_full, &k_full, &v_full, &[], 0, 0, heads).unwrap();

        // First half as its own chunk, cached; second half attends over it.
        let take = |v: &Value<f64>, lo: usize, hi: usize| {
            Value::leaf(v.data()[lo * d..hi * d].to_vec(), vec![hi - lo, d])
        };
        let out_a = causal_chunk_attention(
            &mut tape,
            &take(&q_full, 0, 2),
            &take(&k_full, 0, 2),
            &take(&v_full, 0, 2),
            &[],
            0,
            0,
            heads,
        )
        .unwrap();
        let cached = KVChunk {
            keys: vec![take(&k_full, 0, 2)],
            values: vec![take(&v_full, 0, 2)],
            position_offset: 0,
            len: 2,
            origin: CacheOrigin::Checkpoint,
        };
        let out_b = causal_chunk_attention(
            &mut tape,
            &take(&q_full, 2, 4),
            &take(&k_full, 2, 4),
            &take(&v_full, 2, 4),
            std::slice::from_ref(&cached),
            0,
            2,
            heads,
        )
        .unwrap();

        for i in 0..2 * d {
            assert!((full.data()[i] - out_a.data()[i]).abs() <= 1e-12);
            assert!((full.data()[2 * d + i] - out_b.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn future_tokens_are_masked() {
        let d = 4usize;
        let mut tape = Tape::<f64>::new(Mode::Inference, Meter::new());
        let q = value_from(3, d, |r, c| (r + c) as f64 * 0.21 - 0.4);
        let k = value_from(3, d, |r, c| (r * 2 + c) as f64 * 0.17 - 0.3);
        let v = value_from(3, d, |r, c| (r + 2 * c) as f64 * 0.23 - 0.9);
        let base = causal_chunk_attention(&mut tape, &q, &k, &v, &[], 0, 0, 2).unwrap();

        // Zero the last token's key/value; rows 0 and 1 must not change.
        let mut k2 = k.data().to_vec();
        let mut v2 = v.data().to_vec();
        for x in k2[2 * d..].iter_mut() {
            *x = 0.0;
        }
        for x in v2[2 * d..].iter_mut() {
            *x = 0.0;
        }
        let k2 = Value::leaf(k2, vec![3, d]);
        let v2 = Value::leaf(v2, vec![3, d]);
        let masked = causal_chunk_attention(&mut tape, &q, &k2, &v2, &[], 0, 0, 2).unwrap();
        for i in 0..2 * d {
            assert_eq!(base.data()[i], masked.data()[i]);
        }
    }

    #[test]
    fn discontiguous_chunk_is_rejected() {
        let mut tape = Tape::<f64>::new(Mode::Inference, Meter::new());
        let q = value_from(1, 4, |_, _| 0.1);
        let r = causal_chunk_attention(&mut tape, &q, &q, &q, &[], 0, 3, 2);
        assert!(matches!(r, Err(Error::PositionDiscontinuity { .. })));
    }

    #[test]
    fn cache_push_checks_contiguity() {
        let mut cache = CacheStore::<f64>::new(1);
        let mk = |offset: usize, len: usize| KVChunk {
            keys: vec![Value::leaf(vec![0.0; len * 2], vec![len, 2])],
            values: vec![Value::leaf(vec![0.0; len * 2], vec![len, 2])],
            position_offset: offset,
            len,
            origin: CacheOrigin::Checkpoint,
        };
        cache.push(mk(0, 3)).unwrap();
        assert!(cache.push(mk(4, 2)).is_err());
        cache.push(mk(3, 2)).unwrap();
        assert_eq!(cache.end_position(), 5);
    }
}
