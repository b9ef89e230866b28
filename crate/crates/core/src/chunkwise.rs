//! The three training modes: naive parallel (the exactness reference),
//! sequential chunk-wise, and sparse chunk-wise.
//!
//! A chunk-wise step runs two stages. Stage 1 forwards every chunk in
//! inference mode and stores the detached KV caches as checkpoints. Stage 2
//! walks chunks in descending order: each chunk's graph is reconstructed from
//! the checkpoints, its KV tensors are seeded with the gradient the
//! checkpoint has accumulated from later chunks (scaled by the relay factor),
//! and the chunk is backpropagated. At most one chunk graph is live at any
//! instant. Sparse mode runs stage 2 only on a sampled subset of chunks,
//! scaling each relay by min(k/t, cap) to compensate chain attenuation.

use std::time::Instant;

use rand::Rng;

use crate::analysis::ChainTrace;
use crate::error::{Error, Result};
use crate::nn::attention::{CacheStore, KVChunk};
use crate::nn::config::ModelConfig;
use crate::nn::model::{forward_chunk, forward_full, predictable_tokens};
use crate::nn::params::Params;
use crate::profile::{FlopLedger, Meter};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Naive,
    Seco,
    Spaco,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Naive => f.write_str("naive"),
            TrainMode::Seco => f.write_str("seco"),
            TrainMode::Spaco => f.write_str("spaco"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(TrainMode::Naive),
            "seco" => Ok(TrainMode::Seco),
            "spaco" => Ok(TrainMode::Spaco),
            other => Err(Error::InvalidArg(format!("unknown mode {other}"))),
        }
    }
}

/// Full chunking configuration for one step.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub num_chunks: usize,
    /// Chunks backpropagated per sparse step; `None` outside sparse mode.
    pub budget: Option<usize>,
    /// Upper bound on the relay scaler; `None` disables the cap.
    pub compensation_cap: Option<f64>,
    pub seed: u64,
}

impl ChunkPlan {
    /// Plan covering `seq_len` tokens with `chunk_size`-token chunks (ragged
    /// last chunk permitted).
    pub fn for_sequence(seq_len: usize, chunk_size: usize) -> Self {
        assert!(chunk_size >= 1, "chunk_size must be >= 1");
        assert!(seq_len >= 1, "empty sequence");
        ChunkPlan {
            chunk_size,
            num_chunks: seq_len.div_ceil(chunk_size),
            budget: None,
            compensation_cap: Some(2.0),
            seed: 0,
        }
    }

    pub fn with_budget(mut self, t: usize) -> Self {
        self.budget = Some(t);
        self
    }

    pub fn with_cap(mut self, cap: Option<f64>) -> Self {
        self.compensation_cap = cap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Token range of chunk `j`.
    pub fn chunk_range(&self, j: usize, seq_len: usize) -> std::ops::Range<usize> {
        let start = j * self.chunk_size;
        start..((start + self.chunk_size).min(seq_len))
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::InvalidArg("chunk_size must be >= 1".into()));
        }
        if self.num_chunks != seq_len.div_ceil(self.chunk_size) {
            return Err(Error::InvalidArg(format!(
                "num_chunks {} does not cover {} tokens with chunk_size {}",
                self.num_chunks, seq_len, self.chunk_size
            )));
        }
        if let Some(t) = self.budget {
            if t == 0 || t > self.num_chunks {
                return Err(Error::InvalidArg(format!(
                    "budget {t} outside 1..={}",
                    self.num_chunks
                )));
            }
        }
        if let Some(cap) = self.compensation_cap {
            if cap < 1.0 {
                return Err(Error::InvalidArg("compensation cap must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Per-step measurements.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub mode: TrainMode,
    /// Stage-1 losses of every chunk, ascending chunk order.
    pub chunk_losses: Vec<f64>,
    /// Sum of all chunk losses: the exact sequence loss.
    pub total_loss: f64,
    /// Chunk indices backpropagated, in processing (descending) order.
    pub selected: Vec<usize>,
    /// Sum of reconstructed-chunk losses (equals `total_loss` when dense).
    pub selected_loss_sum: f64,
    pub relay_scaler: f64,
    pub grad_l2: f64,
    pub peak_activation_bytes: u64,
    /// Largest single chunk-graph watermark; the one-graph memory bound.
    pub single_chunk_peak_bytes: u64,
    pub kv_cache_bytes: u64,
    pub flops: FlopLedger,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
}

/// Relay scaler `min(k/t, cap)`.
pub fn relay_scaler(num_chunks: usize, budget: usize, cap: Option<f64>) -> f64 {
    let raw = num_chunks as f64 / budget as f64;
    match cap {
        Some(c) => raw.min(c),
        None => raw,
    }
}

/// Install gradient-relay hooks: every key/value tensor of the reconstructed
/// chunk is seeded with `checkpoint_grad * scaler` on top of whatever
/// gradient arrives from the chunk's own loss. A checkpoint that accumulated
/// nothing relays zeros.
pub fn relay_gradients<T: Scalar>(
    tape: &mut Tape<T>,
    checkpoint: &KVChunk<T>,
    reconstructed: &KVChunk<T>,
    scaler: f64,
) {
    assert_eq!(checkpoint.layers(), reconstructed.layers(), "relay: layer count mismatch");
    let s = T::of_f64(scaler);
    for layer in 0..checkpoint.layers() {
        let base_k = checkpoint.keys[layer].grad_or_zeros();
        let base_v = checkpoint.values[layer].grad_or_zeros();
        assert_eq!(
            base_k.len(),
            reconstructed.keys[layer].numel(),
            "relay: key shape mismatch at layer {layer}"
        );
        assert_eq!(
            base_v.len(),
            reconstructed.values[layer].numel(),
            "relay: value shape mismatch at layer {layer}"
        );
        tape.register_hook(&reconstructed.keys[layer], base_k, s);
        tape.register_hook(&reconstructed.values[layer], base_v, s);
    }
}

/// `t` distinct indices uniform over size-`t` subsets of `0..k`, descending.
pub fn sample_indices(k: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t > k {
        return Err(Error::InvalidArg(format!("budget {t} exceeds {k} chunks")));
    }
    let mut picked = rand::seq::index::sample(rng, k, t).into_vec();
    picked.sort_unstable_by(|a, b| b.cmp(a));
    Ok(picked)
}

/// Single full-graph forward/backward: the gradient exactness oracle.
pub fn naive_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    meter: &Meter,
) -> Result<(f64, StepReport)> {
    let start = Instant::now();
    let mut tape = Tape::new(Mode::Recording, meter.clone());
    let out = forward_full(&mut tape, cfg, params, tokens)?;
    let stage1_ms = start.elapsed().as_secs_f64() * 1e3;

    let back = Instant::now();
    let peak = tape.peak_bytes();
    tape.backward(&[(&out.loss, &[T::one()])], false)?;
    let stage2_ms = back.elapsed().as_secs_f64() * 1e3;

    meter.record_param_bytes(params.param_bytes());
    meter.record_grad_bytes(params.grad_bytes());
    let report = StepReport {
        mode: TrainMode::Naive,
        chunk_losses: vec![out.loss_value],
        total_loss: out.loss_value,
        selected: vec![0],
        selected_loss_sum: out.loss_value,
        relay_scaler: 1.0,
        grad_l2: params.grad_l2(),
        peak_activation_bytes: peak,
        single_chunk_peak_bytes: peak,
        kv_cache_bytes: 0,
        flops: meter.flops(),
        stage1_ms,
        stage2_ms,
    };
    Ok((out.loss_value, report))
}

struct StageTwo<'a> {
    selected: Vec<usize>,
    scaler: f64,
    mode: TrainMode,
    trace: Option<&'a mut ChainTrace>,
}

fn chunkwise_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
    meter: &Meter,
    stage2: StageTwo<'_>,
) -> Result<StepReport> {
    plan.validate(tokens.len())?;
    let k = plan.num_chunks;
    let denom = predictable_tokens(tokens.len());
    let baseline_live = meter.live_activation_bytes();

    // Stage 1: sequential inference pass producing checkpoints.
    let t0 = Instant::now();
    let mut cache = CacheStore::new(cfg.layers);
    let mut chunk_losses = Vec::with_capacity(k);
    for j in 0..k {
        let mut tape = Tape::new(Mode::Inference, meter.clone());
        let out = forward_chunk(
            &mut tape,
            cfg,
            params,
            tokens,
            plan.chunk_range(j, tokens.len()),
            cache.chunks(),
            denom,
        )?;
        chunk_losses.push(out.loss_value);
        cache.push(out.kv)?;
    }
    let stage1_ms = t0.elapsed().as_secs_f64() * 1e3;
    meter.record_kv_bytes(cache.total_bytes());

    let leaf_labels: std::collections::HashMap<_, _> =
        cache.leaf_labels().into_iter().collect();

    // Stage 2: reconstruct and backpropagate selected chunks, descending.
    let t1 = Instant::now();
    let StageTwo { selected, scaler, mode, mut trace } = stage2;
    let mut selected_loss_sum = 0.0;
    let mut single_chunk_peak = 0u64;
    for &j in &selected {
        let mut tape = Tape::new(Mode::Recording, meter.clone());
        let out = forward_chunk(
            &mut tape,
            cfg,
            params,
            tokens,
            plan.chunk_range(j, tokens.len()),
            cache.prefix(j),
            denom,
        )?;
        selected_loss_sum += out.loss_value;
        debug_assert!(
            (0..cfg.layers).all(|l| {
                out.kv.keys[l].data() == cache.chunk(j).keys[l].data()
                    && out.kv.values[l].data() == cache.chunk(j).values[l].data()
            }),
            "reconstruction of chunk {j} is not bit-exact"
        );

        if let Some(tr) = trace.as_deref_mut() {
            tr.record_chunk(&tape, j, &out, &leaf_labels);
        }

        relay_gradients(&mut tape, cache.chunk(j), &out.kv, scaler);
        tape.backward(&[(&out.loss, &[T::one()])], false)?;

        single_chunk_peak = single_chunk_peak.max(tape.peak_bytes());
        let live = meter.live_activation_bytes();
        if live != baseline_live {
            return Err(Error::InvalidArg(format!(
                "one-graph bound violated: {live} activation bytes live after freeing chunk {j}"
            )));
        }
    }
    let stage2_ms = t1.elapsed().as_secs_f64() * 1e3;

    meter.record_param_bytes(params.param_bytes());
    meter.record_grad_bytes(params.grad_bytes() + cache.grad_bytes());
    let peak = meter.peak_activation_bytes().saturating_sub(baseline_live);
    if peak > single_chunk_peak + single_chunk_peak / 20 {
        return Err(Error::InvalidArg(format!(
            "one-graph bound violated: peak {peak} exceeds 1.05x single-chunk {single_chunk_peak}"
        )));
    }

    Ok(StepReport {
        mode,
        total_loss: chunk_losses.iter().sum(),
        chunk_losses,
        selected,
        selected_loss_sum,
        relay_scaler: scaler,
        grad_l2: params.grad_l2(),
        peak_activation_bytes: peak,
        single_chunk_peak_bytes: single_chunk_peak,
        kv_cache_bytes: cache.total_bytes(),
        flops: meter.flops(),
        stage1_ms,
        stage2_ms,
    })
}

/// Sequential chunk-wise step: every chunk reconstructed and backpropagated
/// in descending order with unit relays. Accumulated parameter gradients
/// match `naive_step` up to float reordering.
pub fn seco_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
    meter: &Meter,
) -> Result<StepReport> {
    let selected: Vec<usize> = (0..plan.num_chunks).rev().collect();
    chunkwise_step(
        cfg,
        params,
        tokens,
        plan,
        meter,
        StageTwo { selected, scaler: 1.0, mode: TrainMode::Seco, trace: None },
    )
}

/// [`seco_step`] that also records which cache checkpoints each reconstructed
/// chunk's gradient can reach, per layer.
pub fn seco_step_traced<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
    meter: &Meter,
) -> Result<(StepReport, ChainTrace)> {
    let mut trace = ChainTrace::new(cfg.layers, plan.num_chunks);
    let selected: Vec<usize> = (0..plan.num_chunks).rev().collect();
    let report = chunkwise_step(
        cfg,
        params,
        tokens,
        plan,
        meter,
        StageTwo { selected, scaler: 1.0, mode: TrainMode::Seco, trace: Some(&mut trace) },
    )?;
    Ok((report, trace))
}

/// Sparse chunk-wise step: stage 1 runs in full, stage 2 only over `budget`
/// sampled chunks with relays scaled by `min(k/t, cap)`.
pub fn spaco_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
    rng: &mut impl Rng,
    meter: &Meter,
) -> Result<StepReport> {
    let t = plan
        .budget
        .ok_or_else(|| Error::InvalidArg("sparse step requires a budget".into()))?;
    let selected = sample_indices(plan.num_chunks, t, rng)?;
    let scaler = relay_scaler(plan.num_chunks, t, plan.compensation_cap);
    chunkwise_step(
        cfg,
        params,
        tokens,
        plan,
        meter,
        StageTwo { selected, scaler, mode: TrainMode::Spaco, trace: None },
    )
}

// ---------------------------------------------------------------------------
// Parameter updates

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArg(format!("unknown optimizer {other}"))),
        }
    }
}

/// Plain gradient descent on whatever gradients the leaves accumulated.
pub fn sgd_update<T: Scalar>(params: &mut Params<T>, lr: f64) {
    let lr = T::of_f64(lr);
    for (_, v) in params.tensors_mut() {
        let Some(grad) = v.grad() else { continue };
        let data = v.data_mut();
        for (p, g) in data.iter_mut().zip(&grad) {
            *p = *p - lr * *g;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state, one buffer per parameter tensor.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &Params<T>) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, v)| v.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

pub fn adam_update<T: Scalar>(params: &mut Params<T>, state: &mut AdamState, hyper: AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (idx, (_, value)) in params.tensors_mut().into_iter().enumerate() {
        let Some(grad) = value.grad() else { continue };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = value.data_mut();
        for i in 0..data.len() {
            let g = grad[i].as_f64();
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let upd = hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            data[i] = data[i] - T::of_f64(upd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::max_abs_grad_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..vocab)).collect()
    }

    #[test]
    fn relay_scaler_examples() {
        assert_eq!(relay_scaler(6, 4, None), 1.5);
        assert_eq!(relay_scaler(64, 8, Some(2.0)), 2.0);
        assert_eq!(relay_scaler(8, 8, Some(2.0)), 1.0);
    }

    #[test]
    fn sample_indices_full_budget_returns_all() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let idx = sample_indices(5, 5, &mut rng).unwrap();
        assert_eq!(idx, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn sample_indices_rejects_oversized_budget() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(sample_indices(4, 5, &mut rng).is_err());
    }

    #[test]
    fn sample_indices_is_descending_and_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let idx = sample_indices(16, 6, &mut rng).unwrap();
            assert_eq!(idx.len(), 6);
            for w in idx.windows(2) {
                assert!(w[0] > w[1]);
            }
        }
    }

    #[test]
    fn sample_indices_marginals_match_hypergeometric() {
        // Each index appears with probability t/k = 0.5.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let (k, t, trials) = (8usize, 4usize, 100_000usize);
        let mut counts = vec![0usize; k];
        for _ in 0..trials {
            for i in sample_indices(k, t, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / trials as f64;
            assert!((f - 0.5).abs() <= 0.01, "index {i} frequency {f}");
        }
    }

    #[test]
    fn seco_k1_equals_naive_bit_exactly() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(16, cfg.vocab_size, 3);
        let params = Params::<f64>::init(&cfg, 21);

        let (naive_loss, _) = naive_step(&cfg, &params, &tokens, &Meter::new()).unwrap();
        let naive_grads = params.grads_snapshot();
        params.zero_grads();

        let plan = ChunkPlan::for_sequence(tokens.len(), tokens.len());
        let report = seco_step(&cfg, &params, &tokens, &plan, &Meter::new()).unwrap();
        let seco_grads = params.grads_snapshot();

        assert_eq!(naive_loss, report.total_loss);
        assert_eq!(max_abs_grad_diff(&naive_grads, &seco_grads), 0.0);
    }

    #[test]
    fn seco_matches_naive_on_small_model() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(40, cfg.vocab_size, 5);
        let params = Params::<f64>::init(&cfg, 23);

        let (_, _) = naive_step(&cfg, &params, &tokens, &Meter::new()).unwrap();
        let naive_grads = params.grads_snapshot();
        params.zero_grads();

        let plan = ChunkPlan::for_sequence(tokens.len(), 8);
        let report = seco_step(&cfg, &params, &tokens, &plan, &Meter::new()).unwrap();
        let seco_grads = params.grads_snapshot();

        let diff = max_abs_grad_diff(&naive_grads, &seco_grads);
        assert!(diff <= 1e-12, "max abs gradient difference {diff}");
        assert_eq!(report.selected, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn seco_handles_ragged_last_chunk() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(37, cfg.vocab_size, 6);
        let params = Params::<f64>::init(&cfg, 29);

        let (_, _) = naive_step(&cfg, &params, &tokens, &Meter::new()).unwrap();
        let naive_grads = params.grads_snapshot();
        params.zero_grads();

        let plan = ChunkPlan::for_sequence(tokens.len(), 8);
        assert_eq!(plan.num_chunks, 5);
        seco_step(&cfg, &params, &tokens, &plan, &Meter::new()).unwrap();
        let diff = max_abs_grad_diff(&naive_grads, &params.grads_snapshot());
        assert!(diff <= 1e-12, "max abs gradient difference {diff}");
    }

    #[test]
    fn spaco_with_full_budget_reproduces_seco_bit_exactly() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(32, cfg.vocab_size, 8);
        let params = Params::<f64>::init(&cfg, 31);

        let plan = ChunkPlan::for_sequence(tokens.len(), 8);
        seco_step(&cfg, &params, &tokens, &plan, &Meter::new()).unwrap();
        let seco_grads = params.grads_snapshot();
        params.zero_grads();

        let sparse_plan = plan.clone().with_budget(4);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let report =
            spaco_step(&cfg, &params, &tokens, &sparse_plan, &mut rng, &Meter::new()).unwrap();
        assert_eq!(report.relay_scaler, 1.0);
        assert_eq!(report.selected, vec![3, 2, 1, 0]);
        assert_eq!(max_abs_grad_diff(&seco_grads, &params.grads_snapshot()), 0.0);
    }

    #[test]
    fn spaco_reconstructs_exactly_budget_chunks() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(64, cfg.vocab_size, 9);
        let params = Params::<f64>::init(&cfg, 37);
        let plan = ChunkPlan::for_sequence(tokens.len(), 8).with_budget(3);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let report =
            spaco_step(&cfg, &params, &tokens, &plan, &mut rng, &Meter::new()).unwrap();
        assert_eq!(report.selected.len(), 3);
        assert_eq!(report.relay_scaler, 2.0); // min(8/3, cap 2)
        assert_eq!(report.chunk_losses.len(), 8);
    }

    #[test]
    #[should_panic(expected = "key shape mismatch")]
    fn relay_with_mismatched_shapes_is_rejected() {
        use crate::nn::attention::{CacheOrigin, KVChunk};
        use crate::tape::{Mode, Tape, Value};
        let mk = |len: usize| KVChunk::<f64> {
            keys: vec![Value::leaf(vec![0.0; len * 4], vec![len, 4])],
            values: vec![Value::leaf(vec![0.0; len * 4], vec![len, 4])],
            position_offset: 0,
            len,
            origin: CacheOrigin::Checkpoint,
        };
        let mut tape = Tape::new(Mode::Recording, Meter::new());
        relay_gradients(&mut tape, &mk(2), &mk(3), 1.0);
    }

    #[test]
    fn sgd_with_zero_lr_is_identity() {
        let cfg = ModelConfig::tiny();
        let tokens = random_tokens(16, cfg.vocab_size, 3);
        let mut params = Params::<f64>::init(&cfg, 41);
        let before = params.flatten();
        naive_step(&cfg, &params, &tokens, &Meter::new()).unwrap();
        sgd_update(&mut params, 0.0);
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        // One parameter tensor pretending to be theta; loss = theta^2.
        let mut params = Params::<f64>::init(&ModelConfig::tiny(), 1);
        let theta0 = params.embed.data()[0];
        params.embed.accumulate_grad(
            &std::iter::once(2.0 * theta0)
                .chain(std::iter::repeat(0.0))
                .take(params.embed.numel())
                .collect::<Vec<_>>(),
        );
        sgd_update(&mut params, 0.1);
        let theta1 = params.embed.data()[0];
        assert!(theta1.abs() < theta0.abs());
    }

    #[test]
    fn adam_first_step_is_lr_sign_scaled() {
        let cfg = ModelConfig::tiny();
        let mut params = Params::<f64>::init(&cfg, 2);
        let before = params.embed.data().to_vec();
        let grads: Vec<f64> =
            (0..params.embed.numel()).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
        params.embed.accumulate_grad(&grads);
        let hyper = AdamHyper::with_lr(1e-2);
        let mut state = AdamState::new(&params);
        adam_update(&mut params, &mut state, hyper);
        for ((after, before), g) in params.embed.data().iter().zip(&before).zip(&grads) {
            let step = before - after;
            let expected = hyper.lr * g.signum();
            assert!(
                (step - expected).abs() < 1e-6,
                "first adam step {step} vs sign-scaled {expected}"
            );
        }
    }
}
