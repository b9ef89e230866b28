//! Command implementations. Each command writes CSV to the given sink and
//! returns a structured summary so tests can assert on both.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::analysis;
use crate::chunkwise::{
    adam_update, naive_step, seco_step, sgd_update, spaco_step, AdamHyper, AdamState,
    OptimizerKind, TrainMode,
};
use crate::cli::config::{DtypeChoice, RunConfig};
use crate::data;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::params::{max_abs_grad_diff, max_rel_grad_diff, Params};
use crate::profile::Meter;
use crate::scalar::Scalar;

/// Deterministic per-trial seed derivation (splitmix64 of the root seed).
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn load_tokens(cfg: &RunConfig) -> Result<Vec<usize>> {
    match &cfg.data_path {
        Some(path) => data::ingest_text(Path::new(path), Some(cfg.corpus_tokens)),
        None => Ok(data::synth_markov(cfg.resolved_seed(), cfg.synth_order, cfg.corpus_tokens)),
    }
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Run naive and sequential chunk-wise steps on identical data and compare
/// accumulated gradients element-wise. Always float64.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<GradcheckOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let seed = cfg.resolved_seed();
    let tokens: Vec<usize> = load_tokens(cfg)?
        .into_iter()
        .map(|t| t % model_cfg.vocab_size)
        .take(cfg.seq_len)
        .collect();
    if tokens.len() < cfg.seq_len {
        return Err(Error::EmptyData(format!(
            "need {} tokens, corpus has {}",
            cfg.seq_len,
            tokens.len()
        )));
    }

    let params = Params::<f64>::init(&model_cfg, seed);
    let (naive_loss, _) = naive_step(&model_cfg, &params, &tokens, &Meter::new())?;
    let naive_grads = params.grads_snapshot();
    params.zero_grads();

    let plan = cfg.plan();
    let report = seco_step(&model_cfg, &params, &tokens, &plan, &Meter::new())?;
    let seco_grads = params.grads_snapshot();

    let max_abs = max_abs_grad_diff(&naive_grads, &seco_grads);
    let max_rel = max_rel_grad_diff(&naive_grads, &seco_grads, 1e-12);
    let pass = max_abs <= cfg.gradcheck_threshold;
    writeln!(out, "dtype=float64 seq_len={} chunk_size={} chunks={}", cfg.seq_len, cfg.chunk_size, plan.num_chunks)?;
    writeln!(out, "naive_loss={naive_loss} seco_loss={}", report.total_loss)?;
    writeln!(out, "max_abs_diff={max_abs:e}")?;
    writeln!(out, "max_rel_diff={max_rel:e}")?;
    writeln!(
        out,
        "gradcheck: {} (threshold {:e})",
        if pass { "PASS" } else { "FAIL" },
        cfg.gradcheck_threshold
    )?;
    Ok(GradcheckOutcome {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        threshold: cfg.gradcheck_threshold,
        pass,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig, csv: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    match cfg.dtype {
        DtypeChoice::F32 => train_impl::<f32>(cfg, csv),
        DtypeChoice::F64 => train_impl::<f64>(cfg, csv),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig, csv: &mut dyn Write) -> Result<TrainSummary> {
    let model_cfg = cfg.model_config();
    let seed = cfg.resolved_seed();
    let tokens: Vec<usize> =
        load_tokens(cfg)?.into_iter().map(|t| t % model_cfg.vocab_size).collect();
    if tokens.len() < cfg.seq_len {
        return Err(Error::EmptyData(format!(
            "data provides {} tokens, one sequence needs {}",
            tokens.len(),
            cfg.seq_len
        )));
    }

    let mut params = Params::<T>::init(&model_cfg, seed);
    let plan = cfg.plan();
    // Chunk-sampling stream, decorrelated from the init stream.
    let mut seed_state = seed;
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(&mut seed_state));
    let mut adam = AdamState::new(&params);
    let window_starts = tokens.len() - cfg.seq_len + 1;

    if cfg.timings {
        writeln!(csv, "step,loss,grad_norm,lr,elapsed_ms")?;
    } else {
        writeln!(csv, "step,loss,grad_norm,lr")?;
    }

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let mut batch_loss = 0.0;
        for b in 0..cfg.batch_accum {
            let widx = step * cfg.batch_accum + b;
            let start = (widx * cfg.seq_len) % window_starts;
            let window = &tokens[start..start + cfg.seq_len];
            let meter = Meter::new();
            let loss = match cfg.mode {
                TrainMode::Naive => naive_step(&model_cfg, &params, window, &meter)?.0,
                TrainMode::Seco => {
                    seco_step(&model_cfg, &params, window, &plan, &meter)?.total_loss
                }
                TrainMode::Spaco => {
                    spaco_step(&model_cfg, &params, window, &plan, &mut rng, &meter)?.total_loss
                }
            };
            batch_loss += loss;
        }
        batch_loss /= cfg.batch_accum as f64;
        if cfg.batch_accum > 1 {
            let inv = T::of_f64(1.0 / cfg.batch_accum as f64);
            for (_, v) in params.tensors() {
                v.scale_grad(inv);
            }
        }
        let grad_norm = params.grad_l2();
        match cfg.optimizer {
            OptimizerKind::Sgd => sgd_update(&mut params, cfg.lr),
            OptimizerKind::Adam => adam_update(&mut params, &mut adam, AdamHyper::with_lr(cfg.lr)),
        }
        params.zero_grads();

        if cfg.timings {
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            writeln!(csv, "{step},{batch_loss},{grad_norm},{},{ms:.3}", cfg.lr)?;
        } else {
            writeln!(csv, "{step},{batch_loss},{grad_norm},{}", cfg.lr)?;
        }
        losses.push(batch_loss);
    }

    if let Some(path) = &cfg.out_checkpoint {
        let mut f = std::fs::File::create(path)?;
        checkpoint::save(&mut f, &model_cfg, &params)?;
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(TrainSummary { losses, final_loss })
}

// ---------------------------------------------------------------------------
// bench

pub use crate::profile::ScalingRow;

pub fn cmd_bench(
    cfg: &RunConfig,
    modes: &[TrainMode],
    seq_lens: &[usize],
    csv: &mut dyn Write,
) -> Result<Vec<ScalingRow>> {
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let seed = cfg.resolved_seed();
    if let Some(&seq) = seq_lens.iter().find(|&&s| s > model_cfg.max_position) {
        return Err(Error::InvalidArg(format!(
            "seq_len {seq} exceeds max_position {}",
            model_cfg.max_position
        )));
    }
    if cfg.timings {
        writeln!(
            csv,
            "mode,seq_len,chunk_size,budget,peak_act_bytes,kv_bytes,fwd_flops,bwd_flops,stage1_ms,stage2_ms,total_ms"
        )?;
    } else {
        writeln!(csv, "mode,seq_len,chunk_size,budget,peak_act_bytes,kv_bytes,fwd_flops,bwd_flops")?;
    }

    let mut rows = Vec::new();
    for &mode in modes {
        let mode_rows = match cfg.dtype {
            DtypeChoice::F32 => crate::profile::report_scaling::<f32>(
                &model_cfg,
                mode,
                seq_lens,
                cfg.chunk_size,
                cfg.budget,
                cfg.compensation_cap,
                seed,
            )?,
            DtypeChoice::F64 => crate::profile::report_scaling::<f64>(
                &model_cfg,
                mode,
                seq_lens,
                cfg.chunk_size,
                cfg.budget,
                cfg.compensation_cap,
                seed,
            )?,
        };
        for row in mode_rows {
            let budget_col = row.budget.map(|b| b.to_string()).unwrap_or_default();
            if cfg.timings {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3}",
                    row.mode,
                    row.seq_len,
                    row.chunk_size,
                    budget_col,
                    row.peak_act_bytes,
                    row.kv_bytes,
                    row.fwd_flops,
                    row.bwd_flops,
                    row.stage1_ms,
                    row.stage2_ms,
                    row.total_ms
                )?;
            } else {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    row.mode,
                    row.seq_len,
                    row.chunk_size,
                    budget_col,
                    row.peak_act_bytes,
                    row.kv_bytes,
                    row.fwd_flops,
                    row.bwd_flops
                )?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// bias

#[derive(Debug, Clone)]
pub struct BiasArgs {
    pub k: usize,
    pub t: usize,
    pub cap: Option<f64>,
    pub exhaustive: bool,
    pub trials: usize,
    pub parallel_trials: usize,
    pub seed: u64,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl Default for BiasArgs {
    fn default() -> Self {
        BiasArgs {
            k: 8,
            t: 4,
            cap: None,
            exhaustive: true,
            trials: 10_000,
            parallel_trials: 1,
            seed: 42,
            state_dim: 2,
            input_dim: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiasOutcome {
    pub cosine: f64,
    pub rel_bias_raw: f64,
    pub rel_bias_rescaled: f64,
    pub closed_form_identity: Option<bool>,
}

pub fn cmd_bias(args: &BiasArgs, csv: &mut dyn Write) -> Result<BiasOutcome> {
    let spec = analysis::ChainOracleSpec::seeded(args.state_dim, args.input_dim, args.k, args.seed);
    let cap_col = args.cap.map(|c| c.to_string()).unwrap_or_default();
    writeln!(csv, "k,t,cap,method,trials,order,scaling,cosine,rel_bias_raw,rel_bias_rescaled,identity")?;

    if args.exhaustive {
        let report = analysis::exhaustive_spaco_expectation(&spec, args.t, args.cap)?;
        for (i, s) in report.per_order_scaling.iter().enumerate() {
            use num_traits::ToPrimitive;
            writeln!(
                csv,
                "{},{},{},exhaustive,{},{},{},,,,",
                args.k,
                args.t,
                cap_col,
                report.subsets,
                i + 1,
                s.to_f64().unwrap_or(f64::NAN)
            )?;
        }
        writeln!(
            csv,
            "{},{},{},exhaustive,{},total,,{},{},{},{}",
            args.k,
            args.t,
            cap_col,
            report.subsets,
            report.cosine_with_exact,
            report.rel_bias_raw,
            report.rel_bias_loss_rescaled,
            report.closed_form_identity
        )?;
        Ok(BiasOutcome {
            cosine: report.cosine_with_exact,
            rel_bias_raw: report.rel_bias_raw,
            rel_bias_rescaled: report.rel_bias_loss_rescaled,
            closed_form_identity: Some(report.closed_form_identity),
        })
    } else {
        let mirror = spec.to_f64();
        let exact = analysis::oracle_exact_gradient(&spec).total.to_f64();
        let mean = monte_carlo_mean(&mirror, args)?;
        let cosine = analysis::cosine(&mean, &exact);
        let norm: f64 = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 =
            mean.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rescale = args.k as f64 / args.t as f64;
        let diff_rescaled: f64 = mean
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a * rescale - b) * (a * rescale - b))
            .sum::<f64>()
            .sqrt();
        let outcome = BiasOutcome {
            cosine,
            rel_bias_raw: diff / norm,
            rel_bias_rescaled: diff_rescaled / norm,
            closed_form_identity: None,
        };
        writeln!(
            csv,
            "{},{},{},montecarlo,{},total,,{},{},{},",
            args.k, args.t, cap_col, args.trials, outcome.cosine, outcome.rel_bias_raw,
            outcome.rel_bias_rescaled
        )?;
        Ok(outcome)
    }
}

/// Monte Carlo mean, optionally across threads. Per-thread seeds come from a
/// splitmix64 stream of the root seed, and thread results merge in thread
/// order, so the outcome is independent of scheduling.
fn monte_carlo_mean(mirror: &analysis::OracleF64, args: &BiasArgs) -> Result<Vec<f64>> {
    let workers = args.parallel_trials.max(1);
    let per = args.trials / workers;
    let mut extra = args.trials % workers;
    let mut seeds = Vec::with_capacity(workers);
    let mut state = args.seed;
    let mut shares = Vec::with_capacity(workers);
    for _ in 0..workers {
        seeds.push(splitmix64(&mut state));
        shares.push(per + if extra > 0 { extra -= 1; 1 } else { 0 });
    }

    let results: Vec<Result<analysis::MonteCarloReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .zip(&shares)
            .map(|(&seed, &n)| {
                let mirror = mirror.clone();
                let (t, cap) = (args.t, args.cap);
                scope.spawn(move || {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed);
                    analysis::spaco_expectation_monte_carlo(&mirror, t, cap, n, &mut rng)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut total = 0usize;
    let mut mean: Option<Vec<f64>> = None;
    for r in results {
        let r = r?;
        let acc = mean.get_or_insert_with(|| vec![0.0; r.mean.len()]);
        for (a, m) in acc.iter_mut().zip(&r.mean) {
            *a += m * r.trials as f64;
        }
        total += r.trials;
    }
    let mut mean = mean.ok_or_else(|| Error::InvalidArg("zero trials".into()))?;
    for m in mean.iter_mut() {
        *m /= total as f64;
    }
    Ok(mean)
}

// ---------------------------------------------------------------------------
// paths

pub fn cmd_paths(n_max: usize, csv: &mut dyn Write) -> Result<()> {
    use num_traits::ToPrimitive;
    writeln!(
        csv,
        "n,p,t,path_count,enumerated,path_ratio,ratio_approx,surv_independent,surv_exact"
    )?;
    for n in 2..=n_max {
        let dag = analysis::Dag::complete(n);
        for p in 0..n {
            let count = analysis::path_count(n, p)?;
            let enumerated = analysis::enumerate_paths(&dag, p);
            for t in 1..=n {
                let ratio = if t > p {
                    analysis::path_ratio(n, t, p)?.to_f64().unwrap_or(f64::NAN).to_string()
                } else {
                    String::new()
                };
                let approx = if t > p {
                    analysis::path_ratio_approx(n, t, p).to_string()
                } else {
                    String::new()
                };
                let si = analysis::survival_probability(n, t, p, analysis::SurvivalModel::Independent)?
                    .to_f64()
                    .unwrap_or(f64::NAN);
                let se = analysis::survival_probability(
                    n,
                    t,
                    p,
                    analysis::SurvivalModel::HypergeometricExact,
                )?
                .to_f64()
                .unwrap_or(f64::NAN);
                writeln!(csv, "{n},{p},{t},{count},{enumerated},{ratio},{approx},{si},{se}")?;
            }
        }
    }
    Ok(())
}
