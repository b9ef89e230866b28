//! Byte-exact memory accounting, declared FLOP counting, and phase timing.
//!
//! Memory is measured by the engine's own ledger rather than process RSS, so
//! the numbers are deterministic and platform-independent. FLOP costs are
//! declared per kernel (e.g. matmul = 2*m*n*k) rather than measured; the
//! declaration lives next to each kernel in `nn::kernels`. Backward work is
//! split into gradient math (`backward_flops`) and re-derivation of forward
//! quantities the kernel chose not to store (`recompute_flops`).

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::{Duration, Instant};

/// Which ledger bucket a declared FLOP count lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
    Recompute,
}

/// Declared floating-point operation totals for one measured region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub recompute_flops: u64,
}

impl FlopLedger {
    pub fn total(&self) -> u64 {
        self.forward_flops + self.backward_flops + self.recompute_flops
    }
}

/// Byte counts by category. Categories are disjoint: a buffer is counted in
/// exactly one (saved non-leaf activations vs KV-cache leaves vs parameters
/// vs accumulated leaf gradients).
#[derive(Debug, Clone, Copy, Default)]
pub struct MemoryLedger {
    pub live_activation_bytes: u64,
    pub peak_activation_bytes: u64,
    pub kv_cache_bytes: u64,
    pub param_bytes: u64,
    pub grad_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct FamilyFlops {
    forward: u64,
    backward: u64,
    recompute: u64,
}

#[derive(Default)]
struct MeterInner {
    flops: FlopLedger,
    families: BTreeMap<&'static str, FamilyFlops>,
    live_activation: u64,
    peak_activation: u64,
    kv_cache: u64,
    param_bytes: u64,
    grad_bytes: u64,
}

/// Shared instrumentation sink for one measured region. Tapes report saved
/// activation bytes here; kernels report declared FLOPs. Cheap to clone;
/// confined to one execution context.
#[derive(Clone, Default)]
pub struct Meter {
    inner: Rc<RefCell<MeterInner>>,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_flops(&self, family: &'static str, phase: Phase, count: u64) {
        let mut m = self.inner.borrow_mut();
        let fam = m.families.entry(family).or_default();
        match phase {
            Phase::Forward => {
                fam.forward += count;
                m.flops.forward_flops += count;
            }
            Phase::Backward => {
                fam.backward += count;
                m.flops.backward_flops += count;
            }
            Phase::Recompute => {
                fam.recompute += count;
                m.flops.recompute_flops += count;
            }
        }
    }

    pub fn alloc_activation(&self, bytes: u64) {
        let mut m = self.inner.borrow_mut();
        m.live_activation += bytes;
        m.peak_activation = m.peak_activation.max(m.live_activation);
    }

    pub fn free_activation(&self, bytes: u64) {
        let mut m = self.inner.borrow_mut();
        debug_assert!(m.live_activation >= bytes, "activation ledger underflow");
        m.live_activation = m.live_activation.saturating_sub(bytes);
    }

    /// Record the KV-cache footprint; the ledger keeps the high-water mark.
    pub fn record_kv_bytes(&self, bytes: u64) {
        let mut m = self.inner.borrow_mut();
        m.kv_cache = m.kv_cache.max(bytes);
    }

    pub fn record_param_bytes(&self, bytes: u64) {
        let mut m = self.inner.borrow_mut();
        m.param_bytes = m.param_bytes.max(bytes);
    }

    pub fn record_grad_bytes(&self, bytes: u64) {
        let mut m = self.inner.borrow_mut();
        m.grad_bytes = m.grad_bytes.max(bytes);
    }

    pub fn flops(&self) -> FlopLedger {
        self.inner.borrow().flops
    }

    pub fn memory(&self) -> MemoryLedger {
        let m = self.inner.borrow();
        MemoryLedger {
            live_activation_bytes: m.live_activation,
            peak_activation_bytes: m.peak_activation,
            kv_cache_bytes: m.kv_cache,
            param_bytes: m.param_bytes,
            grad_bytes: m.grad_bytes,
        }
    }

    pub fn live_activation_bytes(&self) -> u64 {
        self.inner.borrow().live_activation
    }

    pub fn peak_activation_bytes(&self) -> u64 {
        self.inner.borrow().peak_activation
    }

    /// Per-family (forward, backward, recompute) declared FLOPs.
    pub fn family_flops(&self) -> Vec<(&'static str, u64, u64, u64)> {
        self.inner
            .borrow()
            .families
            .iter()
            .map(|(k, v)| (*k, v.forward, v.backward, v.recompute))
            .collect()
    }
}

/// Result of running a step function under a fresh meter.
pub struct Instrumented<R> {
    pub result: R,
    pub memory: MemoryLedger,
    pub flops: FlopLedger,
    pub elapsed: Duration,
}

/// Run `f` with a fresh [`Meter`] and return its ledgers and wall time.
pub fn instrument<R>(f: impl FnOnce(&Meter) -> R) -> Instrumented<R> {
    let meter = Meter::new();
    let start = Instant::now();
    let result = f(&meter);
    let elapsed = start.elapsed();
    Instrumented {
        result,
        memory: meter.memory(),
        flops: meter.flops(),
        elapsed,
    }
}

/// One row of the scaling report emitted by the bench command.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub mode: crate::chunkwise::TrainMode,
    pub seq_len: usize,
    pub chunk_size: usize,
    pub budget: Option<usize>,
    pub peak_act_bytes: u64,
    pub kv_bytes: u64,
    /// Forward plus recomputation FLOPs (all forward-direction work).
    pub fwd_flops: u64,
    pub bwd_flops: u64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub total_ms: f64,
}

/// Run one instrumented step per (mode, seq_len) on synthetic data and
/// collect time, peak memory by category, and declared FLOPs.
pub fn report_scaling<T: crate::scalar::Scalar>(
    cfg: &crate::nn::ModelConfig,
    mode: crate::chunkwise::TrainMode,
    seq_lens: &[usize],
    chunk_size: usize,
    budget: Option<usize>,
    cap: Option<f64>,
    seed: u64,
) -> crate::error::Result<Vec<ScalingRow>> {
    use crate::chunkwise::{naive_step, seco_step, spaco_step, ChunkPlan, TrainMode};
    use rand::SeedableRng;

    let mut rows = Vec::with_capacity(seq_lens.len());
    for &seq in seq_lens {
        let tokens: Vec<usize> = crate::data::synth_markov(seed, 2, seq)
            .into_iter()
            .map(|t| t % cfg.vocab_size)
            .collect();
        let params = crate::nn::Params::<T>::init(cfg, seed);
        let mut plan = ChunkPlan::for_sequence(seq, chunk_size).with_cap(cap).with_seed(seed);
        if let Some(t) = budget {
            let capped = t.min(plan.num_chunks);
            plan = plan.with_budget(capped);
        }
        let meter = Meter::new();
        let start = Instant::now();
        let report = match mode {
            TrainMode::Naive => naive_step(cfg, &params, &tokens, &meter)?.1,
            TrainMode::Seco => seco_step(cfg, &params, &tokens, &plan, &meter)?,
            TrainMode::Spaco => {
                if plan.budget.is_none() {
                    return Err(crate::error::Error::InvalidArg(
                        "sparse scaling report requires a budget".into(),
                    ));
                }
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
                spaco_step(cfg, &params, &tokens, &plan, &mut rng, &meter)?
            }
        };
        params.zero_grads();
        rows.push(ScalingRow {
            mode,
            seq_len: seq,
            chunk_size: if mode == TrainMode::Naive { seq } else { chunk_size },
            budget: if mode == TrainMode::Spaco { plan.budget } else { None },
            peak_act_bytes: report.peak_activation_bytes,
            kv_bytes: report.kv_cache_bytes,
            fwd_flops: report.flops.forward_flops + report.flops.recompute_flops,
            bwd_flops: report.flops.backward_flops,
            stage1_ms: report.stage1_ms,
            stage2_ms: report.stage2_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_watermark() {
        let m = Meter::new();
        m.alloc_activation(100);
        m.alloc_activation(50);
        m.free_activation(120);
        m.alloc_activation(10);
        assert_eq!(m.live_activation_bytes(), 40);
        assert_eq!(m.peak_activation_bytes(), 150);
    }

    #[test]
    fn flop_phases_are_separate() {
        let m = Meter::new();
        m.add_flops("matmul", Phase::Forward, 10);
        m.add_flops("matmul", Phase::Backward, 20);
        m.add_flops("attention", Phase::Recompute, 5);
        let l = m.flops();
        assert_eq!(l.forward_flops, 10);
        assert_eq!(l.backward_flops, 20);
        assert_eq!(l.recompute_flops, 5);
        assert_eq!(l.total(), 35);
    }

    #[test]
    fn kv_watermark_keeps_max() {
        let m = Meter::new();
        m.record_kv_bytes(10);
        m.record_kv_bytes(4);
        assert_eq!(m.memory().kv_cache_bytes, 10);
    }
}
