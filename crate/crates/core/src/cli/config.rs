//! Run configuration: a flat JSON document, every field overridable by a
//! `--key value` flag. Flags win over the file; the file wins over defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::chunkwise::{ChunkPlan, OptimizerKind, TrainMode};
use crate::error::{Error, Result};
use crate::nn::config::ModelConfig;
use crate::scalar::Dtype;

pub const SEED_ENV: &str = "CHUNKGRAD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeChoice {
    F32,
    F64,
}

impl DtypeChoice {
    pub fn dtype(self) -> Dtype {
        match self {
            DtypeChoice::F32 => Dtype::F32,
            DtypeChoice::F64 => Dtype::F64,
        }
    }
}

impl std::str::FromStr for DtypeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DtypeChoice::F32),
            "f64" | "float64" => Ok(DtypeChoice::F64),
            other => Err(Error::InvalidArg(format!("unknown dtype {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Model.
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub max_position: usize,
    // Chunking.
    pub seq_len: usize,
    pub chunk_size: usize,
    pub budget: Option<usize>,
    /// `null` disables the cap.
    pub compensation_cap: Option<f64>,
    // Training.
    pub mode: TrainMode,
    pub dtype: DtypeChoice,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_accum: usize,
    // Data: a UTF-8 text file, or the synthetic Markov generator.
    pub data_path: Option<String>,
    pub synth_order: usize,
    pub corpus_tokens: usize,
    // Misc.
    pub seed: Option<u64>,
    pub gradcheck_threshold: f64,
    pub out_csv: Option<String>,
    pub out_checkpoint: Option<String>,
    /// Include wall-time columns in CSV output. Off by default so command
    /// output is byte-deterministic for a given (config, seed).
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 4,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 256,
            norm_eps: 1e-5,
            max_position: 8192,
            seq_len: 512,
            chunk_size: 64,
            budget: None,
            compensation_cap: Some(2.0),
            mode: TrainMode::Seco,
            dtype: DtypeChoice::F32,
            steps: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_accum: 1,
            data_path: None,
            synth_order: 2,
            corpus_tokens: 65536,
            seed: None,
            gradcheck_threshold: 1e-10,
            out_csv: None,
            out_checkpoint: None,
            timings: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &PathBuf) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            vocab_size: self.vocab_size,
            norm_eps: self.norm_eps,
            max_position: self.max_position,
        }
    }

    pub fn plan(&self) -> ChunkPlan {
        let mut plan = ChunkPlan::for_sequence(self.seq_len, self.chunk_size)
            .with_cap(self.compensation_cap)
            .with_seed(self.resolved_seed());
        if let Some(t) = self.budget {
            plan = plan.with_budget(t);
        }
        plan
    }

    /// Seed resolution: explicit field, then the CHUNKGRAD_SEED environment
    /// variable, then 42.
    pub fn resolved_seed(&self) -> u64 {
        if let Some(s) = self.seed {
            return s;
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            if let Ok(s) = v.parse() {
                return s;
            }
        }
        42
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.seq_len == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidArg("seq_len and chunk_size must be >= 1".into()));
        }
        if self.mode == TrainMode::Spaco && self.budget.is_none() {
            return Err(Error::InvalidArg("spaco mode requires a budget".into()));
        }
        self.plan().validate(self.seq_len)?;
        if self.batch_accum == 0 {
            return Err(Error::InvalidArg("batch_accum must be >= 1".into()));
        }
        if self.seq_len > self.max_position {
            return Err(Error::InvalidArg(format!(
                "seq_len {} exceeds max_position {}",
                self.seq_len, self.max_position
            )));
        }
        Ok(())
    }
}

/// Every configuration field as an optional command-line override.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Flat JSON configuration file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub norm_eps: Option<f64>,
    #[arg(long)]
    pub max_position: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, alias = "chunk")]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub compensation_cap: Option<f64>,
    /// Disable the compensation cap entirely.
    #[arg(long)]
    pub no_cap: bool,
    /// naive | seco | spaco
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// f32 | f64
    #[arg(long)]
    pub dtype: Option<DtypeChoice>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd | adam
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub batch_accum: Option<usize>,
    #[arg(long)]
    pub data_path: Option<String>,
    #[arg(long)]
    pub synth_order: Option<usize>,
    #[arg(long)]
    pub corpus_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, alias = "threshold")]
    pub gradcheck_threshold: Option<f64>,
    #[arg(long)]
    pub out_csv: Option<String>,
    #[arg(long)]
    pub out_checkpoint: Option<String>,
    /// Include wall-time columns in CSV output (breaks byte determinism).
    #[arg(long)]
    pub timings: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v.into(); })*
            };
        }
        apply!(layers, d_model, n_heads, head_dim, vocab_size, max_position);
        apply!(seq_len, chunk_size, steps, batch_accum, synth_order, corpus_tokens);
        if let Some(v) = self.norm_eps {
            cfg.norm_eps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.gradcheck_threshold {
            cfg.gradcheck_threshold = v;
        }
        if let Some(v) = self.budget {
            cfg.budget = Some(v);
        }
        if let Some(v) = self.compensation_cap {
            cfg.compensation_cap = Some(v);
        }
        if self.no_cap {
            cfg.compensation_cap = None;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.dtype {
            cfg.dtype = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = &self.data_path {
            cfg.data_path = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &self.out_csv {
            cfg.out_csv = Some(v.clone());
        }
        if let Some(v) = &self.out_checkpoint {
            cfg.out_checkpoint = Some(v.clone());
        }
        if self.timings {
            cfg.timings = true;
        }
        Ok(cfg)
    }
}
