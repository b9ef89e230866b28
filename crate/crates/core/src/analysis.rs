//! Closed-form and brute-force verification instruments.
//!
//! Three groups live here:
//! - combinatorics of gradient paths in a complete DAG (exact integers and
//!   rationals, so the tests have no tolerances);
//! - a linear recurrence `m_i = A*m_{i-1} + B*x_i`, `J_j = c*m_j` whose
//!   gradient decomposes into enumerable chains: the instrument for checking
//!   relay compensation, since the transformer's chains are not individually
//!   extractable;
//! - the gradient-reachability trace of a chunk-wise step and the longest
//!   cache-to-cache chain in it.
//!
//! Chain bookkeeping convention: a chain of order `p` passes through `p`
//! cache states, crosses `p - 1` relays (collecting `scaler^(p-1)`), and
//! needs `p` distinct chunks selected: the `p - 1` relay chunks plus the
//! chunk whose loss roots the chain.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::attention::CacheLeafLabel;
use crate::nn::model::ChunkForward;
use crate::scalar::Scalar;
use crate::tape::{LeafId, Tape};

// ---------------------------------------------------------------------------
// Path combinatorics

/// Directed acyclic graph on nodes `0..n` with edges `i -> j` only for
/// `i < j`.
pub struct Dag {
    n: usize,
    adj: Vec<Vec<usize>>,
}

impl Dag {
    /// Complete DAG: all n(n-1)/2 forward edges.
    pub fn complete(n: usize) -> Self {
        let adj = (0..n).map(|i| ((i + 1)..n).collect()).collect();
        Dag { n, adj }
    }

    /// Sub-DAG with an explicit edge list.
    pub fn with_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= j || j >= n {
                return Err(Error::InvalidArg(format!("bad edge ({i}, {j})")));
            }
            adj[i].push(j);
        }
        Ok(Dag { n, adj })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(|a| a.len()).sum()
    }
}

/// Exact number of p-edge directed paths in a complete DAG on n nodes:
/// C(n, p+1), each path being a choice of p+1 ordered nodes.
pub fn path_count(n: usize, p: usize) -> Result<u128> {
    if n == 0 || p > n - 1 {
        return Err(Error::InvalidArg(format!("path order {p} outside 0..={}", n.max(1) - 1)));
    }
    Ok(binomial_u128(n as u128, (p + 1) as u128))
}

fn binomial_u128(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn binomial_big(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let mut acc = BigInt::one();
    for i in 0..k.min(n - k) {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Exhaustive DFS count of directed p-edge paths: the brute-force oracle for
/// [`path_count`].
pub fn enumerate_paths(dag: &Dag, p: usize) -> u128 {
    fn dfs(dag: &Dag, node: usize, remaining: usize) -> u128 {
        if remaining == 0 {
            return 1;
        }
        dag.adj[node].iter().map(|&next| dfs(dag, next, remaining - 1)).sum()
    }
    (0..dag.n).map(|start| dfs(dag, start, p)).sum()
}

/// Exact dense/sparse path-count ratio for p-edge paths:
/// `k(k-1)...(k-p) / t(t-1)...(t-p)`.
pub fn path_ratio(k: usize, t: usize, p: usize) -> Result<BigRational> {
    if t <= p {
        return Err(Error::InvalidArg(format!("need t > p, got t={t}, p={p}")));
    }
    if k < t {
        return Err(Error::InvalidArg(format!("need k >= t, got k={k}, t={t}")));
    }
    Ok(BigRational::new(falling(k, p + 1), falling(t, p + 1)))
}

/// `(k/t)^(p+1)`: the large-t approximation of [`path_ratio`].
pub fn path_ratio_approx(k: usize, t: usize, p: usize) -> f64 {
    (k as f64 / t as f64).powi(p as i32 + 1)
}

fn falling(x: usize, terms: usize) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..terms {
        if i > x {
            return BigInt::zero();
        }
        acc *= BigInt::from(x - i);
    }
    acc
}

/// Probability that `required` specific chunks all land in a uniform size-t
/// subset of k: `C(k-r, t-r) / C(k, t)`, zero when `required > t`.
pub fn subset_inclusion_probability(k: usize, t: usize, required: usize) -> Result<BigRational> {
    if t > k {
        return Err(Error::InvalidArg(format!("budget {t} exceeds {k} chunks")));
    }
    if required > t {
        return Ok(BigRational::zero());
    }
    Ok(BigRational::new(binomial_big(k - required, t - required), binomial_big(k, t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurvivalModel {
    /// Treats the p selection events of a p-hop chain as independent.
    Independent,
    /// Exact under distinct-index sampling: a p-hop chain needs its p relay
    /// chunks and its loss chunk, p+1 distinct chunks in total.
    HypergeometricExact,
}

/// Probability that a p-hop gradient chain survives t-of-k chunk sampling.
pub fn survival_probability(
    k: usize,
    t: usize,
    p: usize,
    model: SurvivalModel,
) -> Result<BigRational> {
    if t > k {
        return Err(Error::InvalidArg(format!("budget {t} exceeds {k} chunks")));
    }
    match model {
        SurvivalModel::Independent => {
            let ratio = BigRational::new(BigInt::from(t), BigInt::from(k));
            let mut acc = BigRational::one();
            for _ in 0..p {
                acc *= ratio.clone();
            }
            Ok(acc)
        }
        SurvivalModel::HypergeometricExact => subset_inclusion_probability(k, t, p + 1),
    }
}

// ---------------------------------------------------------------------------
// Linear recurrence oracle

/// Linear recurrence `m_i = A*m_{i-1} + B*x_i`, `J_j = c*m_j`, `m_0 = 0`,
/// held in exact rationals. Its chunk-wise gradient decomposes into chains
/// indexed by consecutive runs of chunks, which makes the expected effect of
/// sparse sampling computable in closed form.
#[derive(Clone)]
pub struct ChainOracleSpec {
    pub state_dim: usize,
    pub input_dim: usize,
    pub num_chunks: usize,
    /// `state_dim × state_dim`, row-major.
    pub a: Vec<BigRational>,
    /// `state_dim × input_dim`, row-major.
    pub b: Vec<BigRational>,
    /// Readout, length `state_dim`.
    pub c: Vec<BigRational>,
    /// Inputs `x_1..x_k`, each length `input_dim`.
    pub x: Vec<Vec<BigRational>>,
}

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

impl ChainOracleSpec {
    /// Deterministic small-rational instance. Entries of `A` stay well below
    /// 1 in magnitude so chain values decay geometrically with order.
    pub fn seeded(state_dim: usize, input_dim: usize, num_chunks: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut small = |den: i64| {
            let n = rng.random_range(-6..=6i64);
            ratio(if n == 0 { 1 } else { n }, den)
        };
        let a = (0..state_dim * state_dim).map(|_| small(20)).collect();
        let b = (0..state_dim * input_dim).map(|_| small(10)).collect();
        let c = (0..state_dim).map(|_| small(10)).collect();
        let x = (0..num_chunks)
            .map(|_| (0..input_dim).map(|_| small(10)).collect())
            .collect();
        ChainOracleSpec { state_dim, input_dim, num_chunks, a, b, c, x }
    }

    /// States `m_0..m_k` (index 0 is the zero initial state).
    pub fn states(&self) -> Vec<Vec<BigRational>> {
        let d = self.state_dim;
        let mut states = vec![vec![BigRational::zero(); d]];
        for x in &self.x {
            let prev = states.last().unwrap();
            let mut m = mat_vec(&self.a, prev, d, d);
            let bx = mat_vec(&self.b, x, d, self.input_dim);
            for (mi, bi) in m.iter_mut().zip(bx) {
                *mi += bi;
            }
            states.push(m);
        }
        states
    }

    pub fn to_f64(&self) -> OracleF64 {
        OracleF64 {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            num_chunks: self.num_chunks,
            a: self.a.iter().map(rat_f64).collect(),
            b: self.b.iter().map(rat_f64).collect(),
            c: self.c.iter().map(rat_f64).collect(),
            x: self.x.iter().map(|v| v.iter().map(rat_f64).collect()).collect(),
        }
    }
}

/// Float mirror of [`ChainOracleSpec`] for Monte Carlo and finite
/// differences.
#[derive(Clone)]
pub struct OracleF64 {
    pub state_dim: usize,
    pub input_dim: usize,
    pub num_chunks: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<Vec<f64>>,
}

impl OracleF64 {
    /// Total loss `sum_j c*m_j` for given flat `[A | B | c]` parameters.
    pub fn total_loss(&self, flat: &[f64]) -> f64 {
        let d = self.state_dim;
        let u = self.input_dim;
        let (a, rest) = flat.split_at(d * d);
        let (b, c) = rest.split_at(d * u);
        let mut m = vec![0.0; d];
        let mut total = 0.0;
        for x in &self.x {
            let mut next = vec![0.0; d];
            for r in 0..d {
                let mut acc = 0.0;
                for col in 0..d {
                    acc += a[r * d + col] * m[col];
                }
                for col in 0..u {
                    acc += b[r * u + col] * x[col];
                }
                next[r] = acc;
            }
            m = next;
            total += c.iter().zip(&m).map(|(ci, mi)| ci * mi).sum::<f64>();
        }
        total
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = self.a.clone();
        flat.extend_from_slice(&self.b);
        flat.extend_from_slice(&self.c);
        flat
    }
}

fn rat_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("rational out of f64 range")
}

fn mat_vec<T>(m: &[T], v: &[T], rows: usize, cols: usize) -> Vec<T>
where
    T: Clone + Zero + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = T::zero();
        for c in 0..cols {
            acc = acc + m[r * cols + c].clone() * v[c].clone();
        }
        out.push(acc);
    }
    out
}

fn mat_t_vec<T>(m: &[T], w: &[T], rows: usize, cols: usize) -> Vec<T>
where
    T: Clone + Zero + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for (c, o) in out.iter_mut().enumerate() {
            *o = o.clone() + m[r * cols + c].clone() * w[r].clone();
        }
    }
    out
}

/// Gradient of the oracle loss with respect to (A, B, c).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGrad<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

impl<T> OracleGrad<T>
where
    T: Clone + Zero + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    fn zero(d: usize, u: usize) -> Self {
        OracleGrad {
            a: vec![T::zero(); d * d],
            b: vec![T::zero(); d * u],
            c: vec![T::zero(); d],
        }
    }

    fn add_outer_a(&mut self, w: &[T], v: &[T], scale: &T) {
        let cols = v.len();
        for (r, wr) in w.iter().enumerate() {
            for (c, vc) in v.iter().enumerate() {
                let cur = self.a[r * cols + c].clone();
                self.a[r * cols + c] = cur + wr.clone() * vc.clone() * scale.clone();
            }
        }
    }

    fn add_outer_b(&mut self, w: &[T], v: &[T], scale: &T) {
        let cols = v.len();
        for (r, wr) in w.iter().enumerate() {
            for (c, vc) in v.iter().enumerate() {
                let cur = self.b[r * cols + c].clone();
                self.b[r * cols + c] = cur + wr.clone() * vc.clone() * scale.clone();
            }
        }
    }

    fn add_c(&mut self, v: &[T], scale: &T) {
        for (o, vi) in self.c.iter_mut().zip(v) {
            *o = o.clone() + vi.clone() * scale.clone();
        }
    }

    pub fn add(&mut self, other: &Self) {
        for (o, x) in self.a.iter_mut().zip(&other.a) {
            *o = o.clone() + x.clone();
        }
        for (o, x) in self.b.iter_mut().zip(&other.b) {
            *o = o.clone() + x.clone();
        }
        for (o, x) in self.c.iter_mut().zip(&other.c) {
            *o = o.clone() + x.clone();
        }
    }

    pub fn scale(&mut self, s: &T) {
        for o in self.a.iter_mut().chain(self.b.iter_mut()).chain(self.c.iter_mut()) {
            *o = o.clone() * s.clone();
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.a.clone();
        out.extend(self.b.iter().cloned());
        out.extend(self.c.iter().cloned());
        out
    }
}

impl OracleGrad<BigRational> {
    pub fn to_f64(&self) -> Vec<f64> {
        self.flatten().iter().map(rat_f64).collect()
    }
}

/// Exact gradient with its per-order chain decomposition. `by_order[p-1]`
/// collects every chain that traverses `p` cache states.
pub struct ExactGradient {
    pub total: OracleGrad<BigRational>,
    pub by_order: Vec<OracleGrad<BigRational>>,
}

/// Closed-form chain expansion of the oracle gradient.
///
/// An order-p chain rooted at chunk j runs through states
/// `m_{j-p+1} .. m_j`; its prefix factor is `(Aᵀ)^(p-1)*c`, and it ends in
/// `∂m_i/∂A = m_{i-1}ᵀ` or `∂m_i/∂B = x_iᵀ`. The readout gradient `m_j`
/// rides with order 1 (it needs only chunk j).
pub fn oracle_exact_gradient(spec: &ChainOracleSpec) -> ExactGradient {
    let d = spec.state_dim;
    let u = spec.input_dim;
    let k = spec.num_chunks;
    let states = spec.states();
    let one = BigRational::one();

    let mut by_order = Vec::with_capacity(k);
    let mut prefix = spec.c.clone(); // (Aᵀ)^(p-1) * c
    for p in 1..=k {
        let mut z = OracleGrad::<BigRational>::zero(d, u);
        for j in p..=k {
            let i = j - p + 1; // chain [i..j]
            z.add_outer_a(&prefix, &states[i - 1], &one);
            z.add_outer_b(&prefix, &spec.x[i - 1], &one);
        }
        if p == 1 {
            for mj in states.iter().skip(1) {
                z.add_c(mj, &one);
            }
        }
        by_order.push(z);
        prefix = mat_t_vec(&spec.a, &prefix, d, d);
    }

    let mut total = OracleGrad::<BigRational>::zero(d, u);
    for z in &by_order {
        total.add(z);
    }
    ExactGradient { total, by_order }
}

/// Literal sparse stage-2 procedure on the oracle for one subset, processed
/// in descending order: reconstruct chunk j, seed its state with the
/// checkpoint gradient times `scaler`, backpropagate, deposit onto the
/// previous checkpoint.
pub fn relay_simulation<T>(
    a: &[T],
    c: &[T],
    x: &[Vec<T>],
    states: &[Vec<T>],
    d: usize,
    u: usize,
    subset_desc: &[usize],
    scaler: &T,
) -> OracleGrad<T>
where
    T: Clone + Zero + One + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let k = x.len();
    let mut chk_grad: Vec<Option<Vec<T>>> = vec![None; k + 1];
    let mut grad = OracleGrad::<T>::zero(d, u);
    let one = T::one();
    for &j0 in subset_desc {
        let chunk = j0 + 1; // states are 1-based
        // Adjoint of m_chunk: readout seed plus scaled relay.
        let mut w: Vec<T> = c.to_vec();
        if let Some(relay) = &chk_grad[chunk] {
            for (wi, ri) in w.iter_mut().zip(relay) {
                *wi = wi.clone() + ri.clone() * scaler.clone();
            }
        }
        grad.add_c(&states[chunk], &one);
        grad.add_outer_a(&w, &states[chunk - 1], &one);
        grad.add_outer_b(&w, &x[j0], &one);
        if chunk > 1 {
            let deposit = mat_t_vec(a, &w, d, d);
            match &mut chk_grad[chunk - 1] {
                Some(g) => {
                    for (gi, di) in g.iter_mut().zip(deposit) {
                        *gi = gi.clone() + di;
                    }
                }
                slot => *slot = Some(deposit),
            }
        }
    }
    grad
}

/// Independent route for the telescoping check: enumerate surviving chains
/// directly. A chain `[i..j]` survives iff every chunk in the run is in the
/// subset, and carries `scaler^(p-1)`.
pub fn chain_sum_for_subset(
    spec: &ChainOracleSpec,
    subset: &[usize],
    scaler: &BigRational,
) -> OracleGrad<BigRational> {
    let d = spec.state_dim;
    let u = spec.input_dim;
    let states = spec.states();
    let selected: std::collections::HashSet<usize> = subset.iter().copied().collect();
    let mut grad = OracleGrad::<BigRational>::zero(d, u);
    let one = BigRational::one();
    for &j0 in subset {
        let j = j0 + 1;
        grad.add_c(&states[j], &one);
        let mut prefix = spec.c.clone();
        let mut gamma = BigRational::one();
        let mut i = j;
        loop {
            if !selected.contains(&(i - 1)) {
                break;
            }
            grad.add_outer_a(&prefix, &states[i - 1], &gamma);
            grad.add_outer_b(&prefix, &spec.x[i - 1], &gamma);
            if i == 1 {
                break;
            }
            prefix = mat_t_vec(&spec.a, &prefix, d, d);
            gamma *= scaler.clone();
            i -= 1;
        }
    }
    grad
}

/// Per-order effective scaling of the literal algorithm under t-of-k
/// sampling: an order-p chain crosses p-1 relays and needs p chunks, so its
/// expectation carries `scaler^(p-1) * C(k-p, t-p)/C(k, t)`.
pub fn expected_order_scaling(
    k: usize,
    t: usize,
    scaler: &BigRational,
    p: usize,
) -> Result<BigRational> {
    let mut s = subset_inclusion_probability(k, t, p)?;
    for _ in 1..p {
        s *= scaler.clone();
    }
    Ok(s)
}

/// Exhaustive mean of the literal sparse gradient over all C(k, t) subsets,
/// with its closed-form cross-check and comparisons against the exact
/// gradient.
pub struct CompensationReport {
    pub k: usize,
    pub t: usize,
    pub scaler: BigRational,
    pub subsets: usize,
    pub mean: OracleGrad<BigRational>,
    pub exact: ExactGradient,
    pub per_order_scaling: Vec<BigRational>,
    /// Whether `mean` equals `sum_p s_p*z_p` exactly in rational arithmetic.
    pub closed_form_identity: bool,
    pub cosine_with_exact: f64,
    pub rel_bias_raw: f64,
    /// Bias after undoing the t/k loss-subsampling factor.
    pub rel_bias_loss_rescaled: f64,
}

pub fn capped_scaler(k: usize, t: usize, cap: Option<f64>) -> BigRational {
    let raw = BigRational::new(BigInt::from(k), BigInt::from(t));
    match cap {
        Some(c) => {
            let cap_r = BigRational::from_float(c).expect("finite cap");
            if raw > cap_r {
                cap_r
            } else {
                raw
            }
        }
        None => raw,
    }
}

pub fn exhaustive_spaco_expectation(
    spec: &ChainOracleSpec,
    t: usize,
    cap: Option<f64>,
) -> Result<CompensationReport> {
    use itertools::Itertools;
    let k = spec.num_chunks;
    if t == 0 || t > k {
        return Err(Error::InvalidArg(format!("budget {t} outside 1..={k}")));
    }
    let total_subsets = binomial_u128(k as u128, t as u128);
    if total_subsets > 10_000 {
        return Err(Error::InvalidArg(format!(
            "C({k}, {t}) = {total_subsets} subsets is infeasible to enumerate; use Monte Carlo"
        )));
    }
    let scaler = capped_scaler(k, t, cap);
    let states = spec.states();
    let d = spec.state_dim;
    let u = spec.input_dim;

    let mut sum = OracleGrad::<BigRational>::zero(d, u);
    let mut count = 0usize;
    for combo in (0..k).combinations(t) {
        let mut subset = combo;
        subset.sort_unstable_by(|a, b| b.cmp(a));
        let g = relay_simulation(&spec.a, &spec.c, &spec.x, &states, d, u, &subset, &scaler);
        sum.add(&g);
        count += 1;
    }
    let inv = BigRational::new(BigInt::one(), BigInt::from(count));
    sum.scale(&inv);

    let exact = oracle_exact_gradient(spec);
    let per_order_scaling: Vec<BigRational> = (1..=k)
        .map(|p| expected_order_scaling(k, t, &scaler, p))
        .collect::<Result<_>>()?;

    // Closed form: sum_p s_p * z_p, compared exactly.
    let mut predicted = OracleGrad::<BigRational>::zero(d, u);
    for (z, s) in exact.by_order.iter().zip(&per_order_scaling) {
        let mut term = z.clone();
        term.scale(s);
        predicted.add(&term);
    }
    let closed_form_identity = predicted == sum;

    let mean_f = sum.to_f64();
    let exact_f = exact.total.to_f64();
    let cosine_with_exact = cosine(&mean_f, &exact_f);
    let rel_bias_raw = rel_l2(&mean_f, &exact_f);
    let rescale = k as f64 / t as f64;
    let rescaled: Vec<f64> = mean_f.iter().map(|v| v * rescale).collect();
    let rel_bias_loss_rescaled = rel_l2(&rescaled, &exact_f);

    Ok(CompensationReport {
        k,
        t,
        scaler,
        subsets: count,
        mean: sum,
        exact,
        per_order_scaling,
        closed_form_identity,
        cosine_with_exact,
        rel_bias_raw,
        rel_bias_loss_rescaled,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Monte Carlo estimate of the sparse-gradient mean, with per-component
/// standard errors.
pub struct MonteCarloReport {
    pub trials: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn spaco_expectation_monte_carlo(
    spec: &OracleF64,
    t: usize,
    cap: Option<f64>,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<MonteCarloReport> {
    let k = spec.num_chunks;
    if t == 0 || t > k {
        return Err(Error::InvalidArg(format!("budget {t} outside 1..={k}")));
    }
    let scaler = rat_f64(&capped_scaler(k, t, cap));
    let d = spec.state_dim;
    let u = spec.input_dim;
    let states = {
        let mut states = vec![vec![0.0; d]];
        for x in &spec.x {
            let prev = states.last().unwrap().clone();
            let mut m = mat_vec(&spec.a, &prev, d, d);
            let bx = mat_vec(&spec.b, x, d, u);
            for (mi, bi) in m.iter_mut().zip(bx) {
                *mi += bi;
            }
            states.push(m);
        }
        states
    };

    let dim = d * d + d * u + d;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for _ in 0..trials {
        let subset = crate::chunkwise::sample_indices(k, t, rng)?;
        let g = relay_simulation(&spec.a, &spec.c, &spec.x, &states, d, u, &subset, &scaler);
        for (i, v) in g.flatten().into_iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(MonteCarloReport { trials, mean, stderr })
}

// ---------------------------------------------------------------------------
// Gradient-reachability trace

/// Which cache checkpoints each reconstructed chunk's gradients can reach,
/// per layer, recorded during a chunk-wise step.
pub struct ChainTrace {
    pub layers: usize,
    pub num_chunks: usize,
    /// Per processed chunk: checkpoints reachable from its loss node.
    pub loss_reach: Vec<(usize, Vec<CacheLeafLabel>)>,
    /// Checkpoints reachable from chunk j's layer-l KV tensors.
    pub kv_reach: HashMap<(usize, usize), Vec<CacheLeafLabel>>,
}

impl ChainTrace {
    pub fn new(layers: usize, num_chunks: usize) -> Self {
        ChainTrace { layers, num_chunks, loss_reach: Vec::new(), kv_reach: HashMap::new() }
    }

    pub(crate) fn record_chunk<T: Scalar>(
        &mut self,
        tape: &Tape<T>,
        chunk: usize,
        out: &ChunkForward<T>,
        labels: &HashMap<LeafId, CacheLeafLabel>,
    ) {
        let collect = |ids: Vec<LeafId>| -> Vec<CacheLeafLabel> {
            let mut seen = std::collections::HashSet::new();
            let mut v = Vec::new();
            for id in ids {
                if let Some(label) = labels.get(&id) {
                    if seen.insert((label.chunk, label.layer, label.is_key)) {
                        v.push(*label);
                    }
                }
            }
            v
        };
        if let Some(node) = out.loss.node() {
            self.loss_reach.push((chunk, collect(tape.reachable_leaves(node))));
        }
        for layer in 0..self.layers {
            let mut ids = Vec::new();
            if let Some(node) = out.kv.keys[layer].node() {
                ids.extend(tape.reachable_leaves(node));
            }
            if let Some(node) = out.kv.values[layer].node() {
                ids.extend(tape.reachable_leaves(node));
            }
            self.kv_reach.insert((chunk, layer), collect(ids));
        }
    }
}

/// Length of the longest cache-to-cache dependency path in the recorded
/// gradient graph, counted in cache nodes.
pub fn longest_cache_chain(trace: &ChainTrace) -> usize {
    fn depth(
        trace: &ChainTrace,
        node: (usize, usize),
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if let Some(&d) = memo.get(&node) {
            return d;
        }
        let mut best = 1;
        if let Some(targets) = trace.kv_reach.get(&node) {
            for t in targets {
                best = best.max(1 + depth(trace, (t.chunk, t.layer), memo));
            }
        }
        memo.insert(node, best);
        best
    }

    let mut memo = HashMap::new();
    let mut longest = 0;
    for (_, targets) in &trace.loss_reach {
        for t in targets {
            longest = longest.max(depth(trace, (t.chunk, t.layer), &mut memo));
        }
    }
    longest
}
