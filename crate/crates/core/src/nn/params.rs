//! Model parameters: gradient-accumulating leaves shared by every chunk tape.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tape::Value;

#[derive(Clone)]
pub struct LayerParams<T> {
    pub wq: Value<T>,
    pub wk: Value<T>,
    pub wv: Value<T>,
    pub wo: Value<T>,
    pub w_gate: Value<T>,
    pub w_up: Value<T>,
    pub w_down: Value<T>,
    pub attn_norm: Value<T>,
    pub ffn_norm: Value<T>,
}

#[derive(Clone)]
pub struct Params<T> {
    pub embed: Value<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Value<T>,
    pub head: Value<T>,
}

impl<T: Scalar> Params<T> {
    /// Deterministic initialization: weights from N(0, 0.02²), residual-write
    /// projections (wo, w_down) scaled down by sqrt(2*layers), norm gains 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f64, 0.02).unwrap();
        let resid_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let resid = Normal::new(0.0f64, resid_std).unwrap();
        let d = cfg.d_model;
        let f = cfg.ffn_dim();

        let mut sample = |dist: &Normal<f64>, rows: usize, cols: usize| -> Value<T> {
            let data: Vec<T> = (0..rows * cols)
                .map(|_| T::of_f64(dist.sample(&mut rng)))
                .collect();
            Value::leaf(data, vec![rows, cols])
        };

        let embed = sample(&base, cfg.vocab_size, d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                wq: sample(&base, d, d),
                wk: sample(&base, d, d),
                wv: sample(&base, d, d),
                wo: sample(&resid, d, d),
                w_gate: sample(&base, d, f),
                w_up: sample(&base, d, f),
                w_down: sample(&resid, f, d),
                attn_norm: Value::leaf(vec![T::one(); d], vec![d]),
                ffn_norm: Value::leaf(vec![T::one(); d], vec![d]),
            });
        }
        let final_norm = Value::leaf(vec![T::one(); d], vec![d]);
        let head = sample(&base, d, cfg.vocab_size);
        Params { embed, layers, final_norm, head }
    }

    /// Named tensors in a fixed, deterministic order.
    pub fn tensors(&self) -> Vec<(String, &Value<T>)> {
        let mut out: Vec<(String, &Value<T>)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.w_gate"), &l.w_gate));
            out.push((format!("layer{i}.w_up"), &l.w_up));
            out.push((format!("layer{i}.w_down"), &l.w_down));
            out.push((format!("layer{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layer{i}.ffn_norm"), &l.ffn_norm));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Value<T>)> {
        let mut out: Vec<(String, &mut Value<T>)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layer{i}.w_up"), &mut l.w_up));
            out.push((format!("layer{i}.w_down"), &mut l.w_down));
            out.push((format!("layer{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layer{i}.ffn_norm"), &mut l.ffn_norm));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn zero_grads(&self) {
        for (_, v) in self.tensors() {
            v.zero_grad();
        }
    }

    /// Snapshot of accumulated gradients (zeros where none arrived), in
    /// tensor order.
    pub fn grads_snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.tensors()
            .into_iter()
            .map(|(name, v)| (name, v.grad_or_zeros()))
            .collect()
    }

    pub fn grad_l2(&self) -> f64 {
        let mut total = 0.0f64;
        for (_, v) in self.tensors() {
            if let Some(g) = v.grad() {
                for x in g {
                    let x = x.as_f64();
                    total += x * x;
                }
            }
        }
        total.sqrt()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, v)| v.numel()).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.tensors().iter().map(|(_, v)| v.byte_size()).sum()
    }

    pub fn grad_bytes(&self) -> u64 {
        self.tensors()
            .iter()
            .filter(|(_, v)| v.has_grad())
            .map(|(_, v)| v.byte_size())
            .sum()
    }

    /// Flatten all parameters into one vector (finite-difference harness).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, v) in self.tensors() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Rebuild parameters from a flat vector produced by [`Params::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        for (_, v) in self.tensors_mut() {
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector size mismatch");
    }
}

pub fn max_abs_grad_diff<T: Scalar>(a: &[(String, Vec<T>)], b: &[(String, Vec<T>)]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut max = 0.0f64;
    for ((na, ga), (nb, gb)) in a.iter().zip(b) {
        assert_eq!(na, nb, "tensor order mismatch");
        for (x, y) in ga.iter().zip(gb) {
            max = max.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    max
}

/// Max relative difference with an absolute floor, for gradcheck reporting.
pub fn max_rel_grad_diff<T: Scalar>(
    a: &[(String, Vec<T>)],
    b: &[(String, Vec<T>)],
    floor: f64,
) -> f64 {
    let mut max = 0.0f64;
    for ((_, ga), (_, gb)) in a.iter().zip(b) {
        for (x, y) in ga.iter().zip(gb) {
            let (x, y) = (x.as_f64(), y.as_f64());
            let denom = x.abs().max(y.abs()).max(floor);
            max = max.max((x - y).abs() / denom);
        }
    }
    max
}
