//! Dense kernels with tape-registered backward rules.
//!
//! Every kernel works in both tape modes: in inference mode it computes data
//! and returns a constant; in recording mode it also registers a backward
//! rule. Each rule declares exactly which buffers its backward needs; those
//! and nothing else are retained, and only non-leaf buffers count toward the
//! activation ledger.
//!
//! Declared FLOP costs (documented convention, counted not measured):
//! matmul forward = 2*m*n*k and backward = 4*m*n*k (its two gradient
//! matmuls); elementwise/normalization kernels declare backward = 2× forward.
//! Softmax recomputation inside a backward is booked as recompute, not
//! backward.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::profile::Phase;
use crate::scalar::Scalar;
use crate::tape::{debug_check_finite, AdjointSink, BackwardOp, NodeId, Tape, Value};

/// Bytes of the graph-sourced inputs a rule saves; leaf and constant sources
/// are excluded from the activation ledger.
fn graph_bytes<T: Scalar>(values: &[&Value<T>]) -> u64 {
    values
        .iter()
        .filter(|v| v.node().is_some())
        .map(|v| v.byte_size())
        .sum()
}

pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// add

struct AddRule {
    a: Option<NodeId>,
    b: Option<NodeId>,
    numel: usize,
}

impl<T: Scalar> BackwardOp<T> for AddRule {
    fn family(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        if let Some(a) = self.a {
            sink.accumulate(a, adj);
        }
        if let Some(b) = self.b {
            sink.accumulate(b, adj);
        }
    }

    fn backward_flops(&self) -> u64 {
        2 * self.numel as u64
    }
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>, b: &Value<T>) -> Value<T> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    debug_check_finite("elementwise", &data);
    tape.meter().add_flops("elementwise", Phase::Forward, a.numel() as u64);
    if !tape.is_recording() {
        return Value::constant(data, a.shape().to_vec());
    }
    let pa = tape.parent_of(a);
    let pb = tape.parent_of(b);
    let parents = pa.into_iter().chain(pb).collect();
    let rule = AddRule { a: pa, b: pb, numel: a.numel() };
    tape.emit(Box::new(rule), parents, data, a.shape().to_vec(), 0)
}

// ---------------------------------------------------------------------------
// mul (elementwise)

struct MulRule<T> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Rc<Vec<T>>,
    b_data: Rc<Vec<T>>,
}

impl<T: Scalar> BackwardOp<T> for MulRule<T> {
    fn family(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        if let Some(a) = self.a {
            sink.with(a, |dst| {
                for ((d, g), b) in dst.iter_mut().zip(adj).zip(self.b_data.iter()) {
                    *d = *d + *g * *b;
                }
            });
        }
        if let Some(b) = self.b {
            sink.with(b, |dst| {
                for ((d, g), a) in dst.iter_mut().zip(adj).zip(self.a_data.iter()) {
                    *d = *d + *g * *a;
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        2 * self.a_data.len() as u64
    }
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>, b: &Value<T>) -> Value<T> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    debug_check_finite("elementwise", &data);
    tape.meter().add_flops("elementwise", Phase::Forward, a.numel() as u64);
    if !tape.is_recording() {
        return Value::constant(data, a.shape().to_vec());
    }
    let pa = tape.parent_of(a);
    let pb = tape.parent_of(b);
    let parents = pa.into_iter().chain(pb).collect();
    let saved = graph_bytes(&[a, b]);
    let rule = MulRule { a: pa, b: pb, a_data: a.data_rc(), b_data: b.data_rc() };
    tape.emit(Box::new(rule), parents, data, a.shape().to_vec(), saved)
}

// ---------------------------------------------------------------------------
// scale (by a compile-time-known scalar; no gradient to the scalar)

struct ScaleRule<T> {
    input: Option<NodeId>,
    factor: T,
    numel: usize,
}

impl<T: Scalar> BackwardOp<T> for ScaleRule<T> {
    fn family(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        if let Some(input) = self.input {
            sink.with(input, |dst| {
                for (d, g) in dst.iter_mut().zip(adj) {
                    *d = *d + *g * self.factor;
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        2 * self.numel as u64
    }
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>, factor: f64) -> Value<T> {
    let f = T::of_f64(factor);
    let data: Vec<T> = a.data().iter().map(|x| *x * f).collect();
    debug_check_finite("elementwise", &data);
    tape.meter().add_flops("elementwise", Phase::Forward, a.numel() as u64);
    if !tape.is_recording() {
        return Value::constant(data, a.shape().to_vec());
    }
    let p = tape.parent_of(a);
    let rule = ScaleRule { input: p, factor: f, numel: a.numel() };
    tape.emit(Box::new(rule), p.into_iter().collect(), data, a.shape().to_vec(), 0)
}

// ---------------------------------------------------------------------------
// silu

struct SiluRule<T> {
    input: Option<NodeId>,
    x: Rc<Vec<T>>,
}

impl<T: Scalar> BackwardOp<T> for SiluRule<T> {
    fn family(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        if let Some(input) = self.input {
            sink.with(input, |dst| {
                let one = T::one();
                for ((d, g), &x) in dst.iter_mut().zip(adj).zip(self.x.iter()) {
                    let s = one / (one + (-x).exp());
                    *d = *d + *g * (s + x * s * (one - s));
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        8 * self.x.len() as u64
    }
}

pub fn silu<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>) -> Value<T> {
    let one = T::one();
    let data: Vec<T> = a.data().iter().map(|&x| x / (one + (-x).exp())).collect();
    debug_check_finite("elementwise", &data);
    tape.meter().add_flops("elementwise", Phase::Forward, 4 * a.numel() as u64);
    if !tape.is_recording() {
        return Value::constant(data, a.shape().to_vec());
    }
    let p = tape.parent_of(a);
    let saved = graph_bytes(&[a]);
    let rule = SiluRule { input: p, x: a.data_rc() };
    tape.emit(Box::new(rule), p.into_iter().collect(), data, a.shape().to_vec(), saved)
}

// ---------------------------------------------------------------------------
// sum (reduce to scalar)

struct SumRule {
    input: Option<NodeId>,
    numel: usize,
}

impl<T: Scalar> BackwardOp<T> for SumRule {
    fn family(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let g = adj[0];
        if let Some(input) = self.input {
            sink.with(input, |dst| {
                for d in dst.iter_mut() {
                    *d = *d + g;
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        2 * self.numel as u64
    }
}

pub fn sum<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>) -> Value<T> {
    let mut s = T::zero();
    for &x in a.data() {
        s = s + x;
    }
    tape.meter().add_flops("elementwise", Phase::Forward, a.numel() as u64);
    if !tape.is_recording() {
        return Value::constant(vec![s], vec![1]);
    }
    let p = tape.parent_of(a);
    let rule = SumRule { input: p, numel: a.numel() };
    tape.emit(Box::new(rule), p.into_iter().collect(), vec![s], vec![1], 0)
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulRule<T> {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Rc<Vec<T>>,
    b_data: Rc<Vec<T>>,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> BackwardOp<T> for MatmulRule<T> {
    fn family(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(a) = self.a {
            // dA = dY * Bᵀ
            sink.with(a, |da| {
                for i in 0..m {
                    let gyrow = &adj[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let brow = &self.b_data[kk * n..(kk + 1) * n];
                        let mut acc = T::zero();
                        for (g, bv) in gyrow.iter().zip(brow) {
                            acc = acc + *g * *bv;
                        }
                        darow[kk] = darow[kk] + acc;
                    }
                }
            });
        }
        if let Some(b) = self.b {
            // dB = Aᵀ * dY
            sink.with(b, |db| {
                for i in 0..m {
                    let arow = &self.a_data[i * k..(i + 1) * k];
                    let gyrow = &adj[i * n..(i + 1) * n];
                    for (kk, &av) in arow.iter().enumerate() {
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        for (d, g) in dbrow.iter_mut().zip(gyrow) {
                            *d = *d + av * *g;
                        }
                    }
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        4 * (self.m * self.n * self.k) as u64
    }
}

/// `a`: `[m, k]`, `b`: `[k, n]` → `[m, n]`, row-major.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: &Value<T>, b: &Value<T>) -> Value<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul: inner dimension mismatch {k} vs {k2}");
    let mut data = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut data);
    debug_check_finite("matmul", &data);
    tape.meter().add_flops("matmul", Phase::Forward, 2 * (m * n * k) as u64);
    if !tape.is_recording() {
        return Value::constant(data, vec![m, n]);
    }
    let pa = tape.parent_of(a);
    let pb = tape.parent_of(b);
    let parents = pa.into_iter().chain(pb).collect();
    let saved = graph_bytes(&[a, b]);
    let rule = MatmulRule { a: pa, b: pb, a_data: a.data_rc(), b_data: b.data_rc(), m, k, n };
    tape.emit(Box::new(rule), parents, data, vec![m, n], saved)
}

// ---------------------------------------------------------------------------
// rmsnorm

struct RmsNormRule<T> {
    x: Option<NodeId>,
    gain: Option<NodeId>,
    x_data: Rc<Vec<T>>,
    gain_data: Rc<Vec<T>>,
    inv_rms: Vec<T>,
    rows: usize,
    dim: usize,
}

impl<T: Scalar> BackwardOp<T> for RmsNormRule<T> {
    fn family(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let (rows, d) = (self.rows, self.dim);
        let dim_t = T::of_usize(d);
        if let Some(xn) = self.x {
            sink.with(xn, |dx| {
                for r in 0..rows {
                    let x = &self.x_data[r * d..(r + 1) * d];
                    let gy = &adj[r * d..(r + 1) * d];
                    let inv = self.inv_rms[r];
                    // dot = sum g*dy*x
                    let mut dot = T::zero();
                    for i in 0..d {
                        dot = dot + self.gain_data[i] * gy[i] * x[i];
                    }
                    let coef = dot * inv * inv * inv / dim_t;
                    let row = &mut dx[r * d..(r + 1) * d];
                    for i in 0..d {
                        row[i] = row[i] + self.gain_data[i] * gy[i] * inv - x[i] * coef;
                    }
                }
            });
        }
        if let Some(gn) = self.gain {
            sink.with(gn, |dg| {
                for r in 0..rows {
                    let x = &self.x_data[r * d..(r + 1) * d];
                    let gy = &adj[r * d..(r + 1) * d];
                    let inv = self.inv_rms[r];
                    for i in 0..d {
                        dg[i] = dg[i] + gy[i] * x[i] * inv;
                    }
                }
            });
        }
    }

    fn backward_flops(&self) -> u64 {
        8 * (self.rows * self.dim) as u64
    }
}

/// Row-wise RMS normalization with learned gain: `y = x * gain / rms(x)`.
pub fn rmsnorm<T: Scalar>(tape: &mut Tape<T>, x: &Value<T>, gain: &Value<T>, eps: f64) -> Value<T> {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(gain.numel(), d, "rmsnorm: gain dimension mismatch");
    let eps_t = T::of_f64(eps);
    let dim_t = T::of_usize(d);
    let mut data = vec![T::zero(); rows * d];
    let mut inv_rms = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut ss = T::zero();
        for &v in row {
            ss = ss + v * v;
        }
        let inv = T::one() / (ss / dim_t + eps_t).sqrt();
        inv_rms[r] = inv;
        for i in 0..d {
            data[r * d + i] = row[i] * inv * gain.data()[i];
        }
    }
    debug_check_finite("rmsnorm", &data);
    tape.meter().add_flops("rmsnorm", Phase::Forward, 4 * (rows * d) as u64);
    if !tape.is_recording() {
        return Value::constant(data, vec![rows, d]);
    }
    let px = tape.parent_of(x);
    let pg = tape.parent_of(gain);
    let parents = px.into_iter().chain(pg).collect();
    let saved = graph_bytes(&[x]) + (rows * T::DTYPE.size_bytes()) as u64;
    let rule = RmsNormRule {
        x: px,
        gain: pg,
        x_data: x.data_rc(),
        gain_data: gain.data_rc(),
        inv_rms,
        rows,
        dim: d,
    };
    tape.emit(Box::new(rule), parents, data, vec![rows, d], saved)
}

// ---------------------------------------------------------------------------
// rotary position embedding

fn rope_angles<T: Scalar>(pos: usize, half: usize, head_dim: usize) -> impl Iterator<Item = (T, T)> {
    (0..half).map(move |i| {
        let theta = 10000f64.powf(-((2 * i) as f64) / head_dim as f64);
        let angle = pos as f64 * theta;
        (T::of_f64(angle.cos()), T::of_f64(angle.sin()))
    })
}

struct RopeRule {
    input: Option<NodeId>,
    offset: usize,
    rows: usize,
    dim: usize,
    n_heads: usize,
}

impl<T: Scalar> BackwardOp<T> for RopeRule {
    fn family(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let Some(input) = self.input else { return };
        let head_dim = self.dim / self.n_heads;
        let half = head_dim / 2;
        sink.with(input, |dx| {
            for r in 0..self.rows {
                let pos = self.offset + r;
                let angles: Vec<(T, T)> = rope_angles(pos, half, head_dim).collect();
                for h in 0..self.n_heads {
                    let base = r * self.dim + h * head_dim;
                    for (i, &(c, s)) in angles.iter().enumerate() {
                        let g0 = adj[base + 2 * i];
                        let g1 = adj[base + 2 * i + 1];
                        // Inverse rotation.
                        dx[base + 2 * i] = dx[base + 2 * i] + g0 * c + g1 * s;
                        dx[base + 2 * i + 1] = dx[base + 2 * i + 1] - g0 * s + g1 * c;
                    }
                }
            }
        });
    }

    fn backward_flops(&self) -> u64 {
        12 * (self.rows * self.dim) as u64
    }
}

/// Rotate query/key pairs by absolute position (`offset` + row index), per
/// head. Chunked and unchunked forwards agree because positions are absolute.
pub fn rope<T: Scalar>(tape: &mut Tape<T>, x: &Value<T>, offset: usize, n_heads: usize) -> Value<T> {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(d % n_heads, 0, "rope: d_model not divisible by heads");
    let head_dim = d / n_heads;
    assert_eq!(head_dim % 2, 0, "rope: head_dim must be even");
    let half = head_dim / 2;
    let mut data = x.data().to_vec();
    for r in 0..rows {
        let pos = offset + r;
        let angles: Vec<(T, T)> = rope_angles(pos, half, head_dim).collect();
        for h in 0..n_heads {
            let base = r * d + h * head_dim;
            for (i, &(c, s)) in angles.iter().enumerate() {
                let x0 = data[base + 2 * i];
                let x1 = data[base + 2 * i + 1];
                data[base + 2 * i] = x0 * c - x1 * s;
                data[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    debug_check_finite("rope", &data);
    tape.meter().add_flops("rope", Phase::Forward, 6 * (rows * d) as u64);
    if !tape.is_recording() {
        return Value::constant(data, vec![rows, d]);
    }
    let p = tape.parent_of(x);
    let rule = RopeRule { input: p, offset, rows, dim: d, n_heads };
    tape.emit(Box::new(rule), p.into_iter().collect(), data, vec![rows, d], 0)
}

// ---------------------------------------------------------------------------
// softmax (row-wise)

struct SoftmaxRule<T> {
    input: Option<NodeId>,
    out: Rc<Vec<T>>,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxRule<T> {
    fn family(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let Some(input) = self.input else { return };
        let (rows, cols) = (self.rows, self.cols);
        sink.with(input, |dx| {
            for r in 0..rows {
                let y = &self.out[r * cols..(r + 1) * cols];
                let gy = &adj[r * cols..(r + 1) * cols];
                let mut dot = T::zero();
                for (g, v) in gy.iter().zip(y) {
                    dot = dot + *g * *v;
                }
                let row = &mut dx[r * cols..(r + 1) * cols];
                for i in 0..cols {
                    row[i] = row[i] + y[i] * (gy[i] - dot);
                }
            }
        });
    }

    fn backward_flops(&self) -> u64 {
        10 * (self.rows * self.cols) as u64
    }
}

pub(crate) fn softmax_row_into<T: Scalar>(scores: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &s in scores {
        if s > max {
            max = s;
        }
    }
    let mut total = T::zero();
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        total = total + e;
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub fn softmax<T: Scalar>(tape: &mut Tape<T>, x: &Value<T>) -> Value<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let (src, dst) = (&x.data()[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        softmax_row_into(src, dst);
    }
    debug_check_finite("softmax", &data);
    tape.meter().add_flops("softmax", Phase::Forward, 5 * (rows * cols) as u64);
    if !tape.is_recording() {
        return Value::constant(data, vec![rows, cols]);
    }
    let p = tape.parent_of(x);
    let saved_out = (rows * cols * T::DTYPE.size_bytes()) as u64;
    let out = Rc::new(data);
    let rule = SoftmaxRule { input: p, out: Rc::clone(&out), rows, cols };
    tape.emit_shared(Box::new(rule), p.into_iter().collect(), out, vec![rows, cols], saved_out)
}

// ---------------------------------------------------------------------------
// next-token cross entropy

struct CrossEntropyRule<T> {
    logits: Option<NodeId>,
    logits_data: Rc<Vec<T>>,
    targets: Vec<usize>,
    vocab: usize,
    denom: T,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyRule<T> {
    fn family(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let Some(logits) = self.logits else { return };
        let v = self.vocab;
        let g = adj[0] / self.denom;
        sink.with(logits, |dl| {
            let mut probs = vec![T::zero(); v];
            for (r, &target) in self.targets.iter().enumerate() {
                let row = &self.logits_data[r * v..(r + 1) * v];
                softmax_row_into(row, &mut probs);
                let drow = &mut dl[r * v..(r + 1) * v];
                for i in 0..v {
                    drow[i] = drow[i] + probs[i] * g;
                }
                drow[target] = drow[target] - g;
            }
        });
    }

    fn backward_flops(&self) -> u64 {
        10 * (self.targets.len() * self.vocab) as u64
    }

    fn recompute_flops(&self) -> u64 {
        5 * (self.targets.len() * self.vocab) as u64
    }
}

/// Sum of next-token cross-entropy over rows `0..targets.len()`, divided by
/// `denom` (the whole sequence's predictable-token count, so chunk losses sum
/// to the full-sequence mean loss).
pub fn cross_entropy_lm<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Value<T>,
    targets: &[usize],
    denom: usize,
) -> Result<Value<T>> {
    let (rows, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() > rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_lm",
            detail: format!("{} targets for {} rows", targets.len(), rows),
        });
    }
    for &t in targets {
        if t >= v {
            return Err(Error::TokenOutOfRange { token: t, vocab: v });
        }
    }
    if denom == 0 {
        return Err(Error::InvalidArg(
            "loss normalizer is zero: sequence has no predictable tokens".into(),
        ));
    }
    let denom_t = T::of_usize(denom);
    let mut total = T::zero();
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits.data()[r * v..(r + 1) * v];
        let mut max = T::neg_infinity();
        for &s in row {
            if s > max {
                max = s;
            }
        }
        let mut lse = T::zero();
        for &s in row {
            lse = lse + (s - max).exp();
        }
        total = total + (lse.ln() + max - row[target]);
    }
    let loss = total / denom_t;
    tape.meter()
        .add_flops("cross_entropy", Phase::Forward, 5 * (targets.len() * v) as u64);
    if !tape.is_recording() {
        return Ok(Value::constant(vec![loss], vec![1]));
    }
    let p = tape.parent_of(logits);
    let saved = graph_bytes(&[logits]);
    let rule = CrossEntropyRule {
        logits: p,
        logits_data: logits.data_rc(),
        targets: targets.to_vec(),
        vocab: v,
        denom: denom_t,
    };
    Ok(tape.emit(Box::new(rule), p.into_iter().collect(), vec![loss], vec![1], saved))
}

// ---------------------------------------------------------------------------
// embedding lookup

struct EmbeddingRule {
    table: Option<NodeId>,
    tokens: Vec<usize>,
    dim: usize,
}

impl<T: Scalar> BackwardOp<T> for EmbeddingRule {
    fn family(&self) -> &'static str {
        "embedding"
    }

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>) {
        let Some(table) = self.table else { return };
        let d = self.dim;
        sink.with(table, |dt| {
            for (r, &tok) in self.tokens.iter().enumerate() {
                let src = &adj[r * d..(r + 1) * d];
                let dst = &mut dt[tok * d..(tok + 1) * d];
                for (x, g) in dst.iter_mut().zip(src) {
                    *x = *x + *g;
                }
            }
        });
    }

    fn backward_flops(&self) -> u64 {
        2 * (self.tokens.len() * self.dim) as u64
    }
}

pub fn embedding<T: Scalar>(
    tape: &mut Tape<T>,
    table: &Value<T>,
    tokens: &[usize],
) -> Result<Value<T>> {
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut data = vec![T::zero(); tokens.len() * d];
    for (r, &tok) in tokens.iter().enumerate() {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        data[r * d..(r + 1) * d].copy_from_slice(&table.data()[tok * d..(tok + 1) * d]);
    }
    tape.meter()
        .add_flops("embedding", Phase::Forward, (tokens.len() * d) as u64);
    if !tape.is_recording() {
        return Ok(Value::constant(data, vec![tokens.len(), d]));
    }
    let p = tape.parent_of(table);
    let rule = EmbeddingRule { table: p, tokens: tokens.to_vec(), dim: d };
    Ok(tape.emit(Box::new(rule), p.into_iter().collect(), data, vec![tokens.len(), d], 0))
}

// ---------------------------------------------------------------------------

pub mod testing {
    use super::*;

    /// Backward rule that routes nothing; lets tests drive `Tape::record`
    /// directly.
    pub struct NoopRule;

    impl<T: Scalar> BackwardOp<T> for NoopRule {
        fn family(&self) -> &'static str {
            "noop"
        }

        fn backward(&self, _adj: &[T], _sink: &mut AdjointSink<'_, T>) {}

        fn backward_flops(&self) -> u64 {
            0
        }
    }
}
