//! Ledger properties: conservation, category scaling, the declared
//! backward/forward FLOP convention, and scaling-report shapes.

use chunkgrad::chunkwise::{naive_step, seco_step, ChunkPlan, TrainMode};
use chunkgrad::data::synth_markov;
use chunkgrad::nn::{forward_full, ModelConfig, Params};
use chunkgrad::profile::{instrument, report_scaling, Meter};
use chunkgrad::tape::{Mode, Tape};

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    synth_markov(seed, 2, n).into_iter().map(|t| t % vocab).collect()
}

#[test]
fn naive_peak_doubles_with_sequence_length() {
    let cfg = ModelConfig::toy();
    let params = Params::<f32>::init(&cfg, 3);
    let peak_of = |seq: usize| {
        let toks = tokens(seq, cfg.vocab_size, 1);
        let run = instrument(|meter| naive_step(&cfg, &params, &toks, meter).unwrap());
        params.zero_grads();
        run.memory.peak_activation_bytes
    };
    let (p1, p2) = (peak_of(128), peak_of(256));
    let ratio = p2 as f64 / p1 as f64;
    assert!((ratio - 2.0).abs() < 0.05, "peak {p1} -> {p2}, ratio {ratio}");
}

#[test]
fn ledger_conservation_after_chunkwise_step() {
    let cfg = ModelConfig::tiny();
    let params = Params::<f64>::init(&cfg, 5);
    let toks = tokens(32, cfg.vocab_size, 2);
    let plan = ChunkPlan::for_sequence(32, 8);
    let run = instrument(|meter| seco_step(&cfg, &params, &toks, &plan, meter).unwrap());
    assert_eq!(run.memory.live_activation_bytes, 0, "every allocation must be freed");
    assert!(run.memory.peak_activation_bytes > 0);
    assert!(run.memory.kv_cache_bytes > 0);
    assert!(run.memory.grad_bytes > 0);
    assert_eq!(run.memory.param_bytes, params.param_bytes());
}

#[test]
fn one_graph_bound_holds_during_chunkwise_step() {
    // The activation watermark of a whole chunk-wise step never exceeds the
    // largest single chunk graph by more than 5%. With serial tapes the two
    // are equal.
    let cfg = ModelConfig::toy();
    let params = Params::<f32>::init(&cfg, 13);
    let toks = tokens(512, cfg.vocab_size, 6);
    let plan = ChunkPlan::for_sequence(512, 64);
    let report = seco_step(&cfg, &params, &toks, &plan, &Meter::new()).unwrap();
    params.zero_grads();
    assert!(report.single_chunk_peak_bytes > 0);
    assert!(
        report.peak_activation_bytes as f64
            <= 1.05 * report.single_chunk_peak_bytes as f64,
        "step peak {} vs single-chunk peak {}",
        report.peak_activation_bytes,
        report.single_chunk_peak_bytes
    );
}

#[test]
fn backward_is_twice_forward_per_kernel_family() {
    // Declared-cost convention: on a naive step (no recomputation mixed in),
    // every family's backward FLOPs are 2x its forward FLOPs within 10%.
    let cfg = ModelConfig::toy();
    let params = Params::<f64>::init(&cfg, 7);
    let toks = tokens(128, cfg.vocab_size, 3);
    let meter = Meter::new();
    naive_step(&cfg, &params, &toks, &meter).unwrap();
    params.zero_grads();
    for (family, fwd, bwd, _rec) in meter.family_flops() {
        if fwd == 0 {
            continue;
        }
        let ratio = bwd as f64 / fwd as f64;
        assert!(
            (ratio - 2.0).abs() <= 0.2,
            "family {family}: backward/forward = {ratio:.3}"
        );
    }
}

#[test]
fn chunked_forward_flops_match_unchunked() {
    // The declared forward cost is chunking-invariant: attention is counted
    // per absolute position either way.
    let cfg = ModelConfig::tiny();
    let params = Params::<f64>::init(&cfg, 9);
    let toks = tokens(48, cfg.vocab_size, 4);

    let full = instrument(|meter| {
        let mut tape = Tape::new(Mode::Inference, meter.clone());
        forward_full(&mut tape, &cfg, &params, &toks).unwrap().loss_value
    });
    let chunked = instrument(|meter| {
        let plan = ChunkPlan::for_sequence(48, 8);
        seco_step(&cfg, &params, &toks, &plan, meter).unwrap();
    });
    params.zero_grads();
    // Stage 1 of the chunk-wise step equals one full forward.
    assert_eq!(chunked.flops.forward_flops, 2 * full.flops.forward_flops);
}

#[test]
fn naive_forward_flops_grow_superlinearly() {
    // Quadratic attention term: positive second difference over evenly
    // spaced sequence lengths, far above linear-fit residue.
    let cfg = ModelConfig::toy();
    let params = Params::<f64>::init(&cfg, 11);
    let fwd_of = |seq: usize| {
        let toks = tokens(seq, cfg.vocab_size, 5);
        let run = instrument(|meter| {
            let mut tape = Tape::new(Mode::Inference, meter.clone());
            forward_full(&mut tape, &cfg, &params, &toks).unwrap().loss_value
        });
        run.flops.forward_flops as f64
    };
    let (f1, f2, f3) = (fwd_of(1024), fwd_of(2048), fwd_of(3072));
    let second_difference = f3 - 2.0 * f2 + f1;
    assert!(
        second_difference > 0.05 * f1,
        "quadratic term should be visible: d2 = {second_difference}, f(1024) = {f1}"
    );
}

#[test]
fn scaling_report_shapes() {
    // Wide-model regime: per-chunk cost is dominated by the projections, so
    // sparse backward FLOPs stay flat as the sequence grows at fixed budget.
    let cfg = ModelConfig {
        layers: 1,
        d_model: 256,
        n_heads: 4,
        head_dim: 64,
        vocab_size: 64,
        norm_eps: 1e-5,
        max_position: 512,
    };
    let rows =
        report_scaling::<f32>(&cfg, TrainMode::Spaco, &[16, 32, 64], 2, Some(4), Some(2.0), 1)
            .unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        assert_eq!(row.mode, TrainMode::Spaco);
        assert_eq!(row.budget, Some(4));
        // KV bytes exactly linear in sequence length.
        let slope = (2 * cfg.layers * cfg.d_model * 4) as u64;
        assert_eq!(row.kv_bytes, slope * row.seq_len as u64);
    }
    let b0 = rows[0].bwd_flops as f64;
    let b2 = rows[2].bwd_flops as f64;
    assert!(
        (b2 / b0 - 1.0).abs() < 0.05,
        "sparse backward flat at fixed budget: {b0} -> {b2}"
    );
}
