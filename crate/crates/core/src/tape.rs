//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! The tape records one chunk's computation graph; `backward` replays it in
//! reverse, seeding any number of roots and accumulating into leaf gradient
//! slots that outlive the tape. Leaf slots are the glue between chunk graphs:
//! a KV checkpoint keeps collecting gradient across many tapes and relays it
//! into the next reconstruction via hooks.
//!
//! Determinism: adjoints accumulate in reverse node order and leaf slots are
//! flushed exactly once per backward, when the sweep reaches the leaf's
//! interned position. Identical runs produce bit-identical gradients.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::profile::{Meter, Phase};
use crate::scalar::Scalar;

static NEXT_LEAF_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a gradient-accumulating leaf, unique per process.
pub type LeafId = u64;

/// Index of a node on one tape.
pub type NodeId = usize;

/// Execution mode. In inference mode nothing is recorded and saved-activation
/// counters do not grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Recording,
    Inference,
}

/// Gradient slot shared by every `Value` handle of one leaf. Accumulation is
/// additive across backward calls and across tapes.
pub struct LeafSlot<T> {
    id: LeafId,
    numel: usize,
    grad: RefCell<Option<Vec<T>>>,
}

impl<T: Scalar> LeafSlot<T> {
    fn new(numel: usize) -> Rc<Self> {
        Rc::new(LeafSlot {
            id: NEXT_LEAF_ID.fetch_add(1, Ordering::Relaxed),
            numel,
            grad: RefCell::new(None),
        })
    }

    pub fn id(&self) -> LeafId {
        self.id
    }

    fn accumulate(&self, contribution: &[T]) {
        assert_eq!(contribution.len(), self.numel, "leaf gradient size mismatch");
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

/// Reference to a node on a specific tape. Values carry this so misuse across
/// tapes is caught.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub tape: u64,
    pub node: NodeId,
}

/// A dense row-major tensor handle. Three states:
/// - constant: `node == None`, no gradient slot;
/// - leaf with `requires_grad`: `node == None`, has a slot that accumulates;
/// - graph value: produced by a recorded op, `node == Some`.
#[derive(Clone)]
pub struct Value<T> {
    data: Rc<Vec<T>>,
    shape: Vec<usize>,
    node: Option<NodeRef>,
    leaf: Option<Rc<LeafSlot<T>>>,
}

impl<T: Scalar> Value<T> {
    pub fn constant(data: Vec<T>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Value { data: Rc::new(data), shape, node: None, leaf: None }
    }

    /// Leaf with `requires_grad = true`; its grad buffer is lazily allocated
    /// on first accumulation.
    pub fn leaf(data: Vec<T>, shape: Vec<usize>) -> Self {
        let numel = data.len();
        assert_eq!(numel, shape.iter().product::<usize>(), "shape/data mismatch");
        Value { data: Rc::new(data), shape, node: None, leaf: Some(LeafSlot::new(numel)) }
    }

    pub(crate) fn from_node_rc(data: Rc<Vec<T>>, shape: Vec<usize>, node: NodeRef) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Value { data, shape, node: Some(node), leaf: None }
    }

    /// Leaf sharing this value's buffer bit-exactly, detached from any graph.
    pub fn detach(&self) -> Self {
        Value {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
            leaf: Some(LeafSlot::new(self.data.len())),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    /// Mutable access to the underlying buffer; clones if shared. Used by
    /// optimizer updates between steps, never mid-graph.
    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Rc::make_mut(&mut self.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn byte_size(&self) -> u64 {
        (self.numel() * T::DTYPE.size_bytes()) as u64
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.leaf.is_some()
    }

    pub fn leaf_id(&self) -> Option<LeafId> {
        self.leaf.as_ref().map(|s| s.id)
    }

    pub(crate) fn leaf_slot(&self) -> Option<&Rc<LeafSlot<T>>> {
        self.leaf.as_ref()
    }

    /// Copy of the accumulated gradient, if any has arrived.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.leaf.as_ref().and_then(|s| s.grad.borrow().clone())
    }

    /// Accumulated gradient or zeros of the right size.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.leaf.as_ref().is_some_and(|s| s.grad.borrow().is_some())
    }

    pub fn zero_grad(&self) {
        if let Some(slot) = &self.leaf {
            *slot.grad.borrow_mut() = None;
        }
    }

    /// Scale the accumulated gradient in place (gradient averaging across
    /// accumulation steps). No-op when nothing has accumulated.
    pub fn scale_grad(&self, factor: T) {
        if let Some(slot) = &self.leaf {
            if let Some(g) = slot.grad.borrow_mut().as_mut() {
                for x in g.iter_mut() {
                    *x = *x * factor;
                }
            }
        }
    }

    /// Direct accumulation into a leaf's grad, as a backward with seed would.
    pub fn accumulate_grad(&self, contribution: &[T]) {
        let slot = self.leaf.as_ref().expect("accumulate_grad on non-leaf value");
        slot.accumulate(contribution);
    }

    pub fn scalar(&self) -> T {
        assert_eq!(self.numel(), 1, "scalar() on non-scalar value");
        self.data[0]
    }
}

struct Hook<T> {
    base: Rc<Vec<T>>,
    scaler: T,
}

enum NodeKind<T> {
    Leaf(Rc<LeafSlot<T>>),
    Op(Box<dyn BackwardOp<T>>),
}

struct Node<T> {
    kind: NodeKind<T>,
    parents: Vec<NodeId>,
    hooks: Vec<Hook<T>>,
    numel: usize,
}

/// Backward rule of one recorded operation. The rule owns everything its
/// reverse pass needs (saved buffers, parent node ids, dims) and reports its
/// declared FLOP cost, split into gradient math and recomputation.
pub trait BackwardOp<T: Scalar> {
    /// Kernel family name for the per-family FLOP tally.
    fn family(&self) -> &'static str;

    fn backward(&self, adj: &[T], sink: &mut AdjointSink<'_, T>);

    fn backward_flops(&self) -> u64;

    fn recompute_flops(&self) -> u64 {
        0
    }
}

/// Routes gradient contributions from an op to its parents' adjoints.
pub struct AdjointSink<'a, T> {
    adjoints: &'a mut Vec<Option<Vec<T>>>,
    numels: &'a [usize],
}

impl<T: Scalar> AdjointSink<'_, T> {
    /// Add `contribution` into the adjoint of `node`.
    pub fn accumulate(&mut self, node: NodeId, contribution: &[T]) {
        self.with(node, |adj| {
            for (a, c) in adj.iter_mut().zip(contribution) {
                *a = *a + *c;
            }
        });
    }

    /// Get-or-allocate the adjoint of `node` and let the op add in place.
    pub fn with(&mut self, node: NodeId, f: impl FnOnce(&mut [T])) {
        let slot = &mut self.adjoints[node];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.numels[node]]);
        }
        f(slot.as_mut().unwrap());
    }
}

/// Append-only computation graph for one chunk.
pub struct Tape<T: Scalar> {
    id: u64,
    mode: Mode,
    nodes: Vec<Node<T>>,
    leaf_nodes: HashMap<LeafId, NodeId>,
    live_bytes: u64,
    peak_bytes: u64,
    freed: bool,
    meter: Meter,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode, meter: Meter) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
            leaf_nodes: HashMap::new(),
            live_bytes: 0,
            peak_bytes: 0,
            freed: false,
            meter,
        }
    }

    pub fn recording(meter: Meter) -> Self {
        Tape::new(Mode::Recording, meter)
    }

    pub fn inference(meter: Meter) -> Self {
        Tape::new(Mode::Inference, meter)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switch recording/inference. Idempotent; counters are preserved.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Recording && !self.freed
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Record one operation. `saved_bytes` is the size of non-leaf buffers the
    /// rule retains for backward; it drives the activation ledger.
    pub fn record(
        &mut self,
        rule: Box<dyn BackwardOp<T>>,
        parents: Vec<NodeId>,
        out_numel: usize,
        saved_bytes: u64,
    ) -> NodeId {
        assert!(!self.freed, "record on freed tape");
        assert!(
            self.mode == Mode::Recording,
            "contract violation: record({}) while tape is in inference mode",
            rule.family()
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Op(rule),
            parents,
            hooks: Vec::new(),
            numel: out_numel,
        });
        self.live_bytes += saved_bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.meter.alloc_activation(saved_bytes);
        id
    }

    /// Helper for kernels: record and wrap the output in a graph `Value`.
    pub fn emit(
        &mut self,
        rule: Box<dyn BackwardOp<T>>,
        parents: Vec<NodeId>,
        data: Vec<T>,
        shape: Vec<usize>,
        saved_bytes: u64,
    ) -> Value<T> {
        self.emit_shared(rule, parents, Rc::new(data), shape, saved_bytes)
    }

    /// Like [`Tape::emit`], for kernels whose rule saves the output buffer
    /// itself: the value and the rule share one allocation.
    pub fn emit_shared(
        &mut self,
        rule: Box<dyn BackwardOp<T>>,
        parents: Vec<NodeId>,
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        saved_bytes: u64,
    ) -> Value<T> {
        let node = self.record(rule, parents, data.len(), saved_bytes);
        Value::from_node_rc(data, shape, NodeRef { tape: self.id, node })
    }

    /// Intern a gradient-accumulating leaf as a node so hooks fire and its
    /// slot is flushed in deterministic sweep order. The `Value` keeps
    /// `node == None`; the mapping is tape-internal.
    pub fn leaf_node(&mut self, v: &Value<T>) -> NodeId {
        assert!(!self.freed, "leaf_node on freed tape");
        assert!(self.mode == Mode::Recording, "leaf_node in inference mode");
        let slot = v
            .leaf_slot()
            .expect("leaf_node requires a requires_grad leaf value");
        if let Some(&id) = self.leaf_nodes.get(&slot.id) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf(Rc::clone(slot)),
            parents: Vec::new(),
            hooks: Vec::new(),
            numel: slot.numel,
        });
        self.leaf_nodes.insert(slot.id, id);
        id
    }

    /// Node id to route a parent's gradient to: the producing node for graph
    /// values, an interned leaf node for leaves, `None` for constants.
    pub fn parent_of(&mut self, v: &Value<T>) -> Option<NodeId> {
        match v.node() {
            Some(nr) => {
                assert_eq!(nr.tape, self.id, "value belongs to a different tape");
                Some(nr.node)
            }
            None if v.requires_grad() => Some(self.leaf_node(v)),
            None => None,
        }
    }

    /// Register a gradient hook on `v`: during backward the gradient arriving
    /// at `v` becomes `arriving + base * scaler` before further propagation.
    /// Fires once per backward even when no upstream gradient arrives.
    pub fn register_hook(&mut self, v: &Value<T>, base: Vec<T>, scaler: T) {
        assert!(!self.freed, "register_hook on freed tape");
        assert_eq!(
            base.len(),
            v.numel(),
            "contract violation: hook base shape mismatch ({} vs {})",
            base.len(),
            v.numel()
        );
        let node = self
            .parent_of(v)
            .expect("register_hook on a constant value");
        self.nodes[node].hooks.push(Hook { base: Rc::new(base), scaler });
    }

    /// Reverse sweep from `roots`, each seeded with a gradient of its own
    /// shape. Multiple roots accumulate additively. Leaf slots reachable from
    /// any root (or carrying hooks) receive their exact reverse-mode
    /// derivative. The graph is freed afterwards unless `retain` is set.
    pub fn backward(&mut self, roots: &[(&Value<T>, &[T])], retain: bool) -> Result<()> {
        if self.freed {
            return Err(Error::InvalidArg("backward on freed tape".into()));
        }
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Vec<T>>> = Vec::new();
        adjoints.resize_with(n, || None);

        for (v, seed) in roots {
            if seed.len() != v.numel() {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    detail: format!("seed has {} elements, root has {}", seed.len(), v.numel()),
                });
            }
            match v.node() {
                Some(nr) => {
                    if nr.tape != self.id {
                        return Err(Error::InvalidArg(
                            "backward root lives on a different tape".into(),
                        ));
                    }
                    let slot = &mut adjoints[nr.node];
                    match slot.as_mut() {
                        Some(a) => {
                            for (ai, si) in a.iter_mut().zip(*seed) {
                                *ai = *ai + *si;
                            }
                        }
                        None => *slot = Some(seed.to_vec()),
                    }
                }
                None => {
                    // Seeding a leaf root accumulates directly.
                    let slot = v.leaf_slot().ok_or_else(|| {
                        Error::InvalidArg("backward root is a constant".into())
                    })?;
                    slot.accumulate(seed);
                }
            }
        }

        let numels: Vec<usize> = self.nodes.iter().map(|n| n.numel).collect();
        for id in (0..n).rev() {
            let adj_opt = adjoints[id].take();
            let has_hooks = !self.nodes[id].hooks.is_empty();
            if adj_opt.is_none() && !has_hooks {
                continue;
            }
            let mut adj = adj_opt.unwrap_or_else(|| vec![T::zero(); numels[id]]);
            for hook in &self.nodes[id].hooks {
                debug_assert_eq!(hook.base.len(), adj.len());
                for (a, b) in adj.iter_mut().zip(hook.base.iter()) {
                    *a = *a + *b * hook.scaler;
                }
            }
            match &self.nodes[id].kind {
                NodeKind::Leaf(slot) => slot.accumulate(&adj),
                NodeKind::Op(rule) => {
                    self.meter.add_flops(rule.family(), Phase::Backward, rule.backward_flops());
                    let rf = rule.recompute_flops();
                    if rf > 0 {
                        self.meter.add_flops(rule.family(), Phase::Recompute, rf);
                    }
                    let mut sink = AdjointSink { adjoints: &mut adjoints, numels: &numels };
                    rule.backward(&adj, &mut sink);
                }
            }
        }

        if !retain {
            self.free();
        }
        Ok(())
    }

    /// Drop the graph. `live_bytes` returns to zero, node ids are invalidated,
    /// hooks are cleared; `peak_bytes` is retained for reporting.
    pub fn free(&mut self) {
        if self.freed {
            return;
        }
        self.meter.free_activation(self.live_bytes);
        self.live_bytes = 0;
        self.nodes.clear();
        self.leaf_nodes.clear();
        self.freed = true;
    }

    /// Leaf ids reachable from `root` by following parent edges. Used to trace
    /// which cache checkpoints a reconstructed chunk's gradient can reach.
    pub fn reachable_leaves(&self, root: NodeRef) -> Vec<LeafId> {
        assert_eq!(root.tape, self.id, "root belongs to a different tape");
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.node];
        let mut out = Vec::new();
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            if let NodeKind::Leaf(slot) = &self.nodes[id].kind {
                out.push(slot.id);
            }
            stack.extend(self.nodes[id].parents.iter().copied());
        }
        out
    }
}

impl<T: Scalar> Drop for Tape<T> {
    fn drop(&mut self) {
        self.free();
    }
}

/// Central finite difference `(f(theta+epse_i) - f(theta-epse_i)) / 2eps` per coordinate:
/// the independent oracle every backward rule is checked against.
pub fn finite_difference_grad<T, F>(mut f: F, theta: &[T], eps: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    let mut grad = vec![T::zero(); theta.len()];
    let mut work = theta.to_vec();
    let two = T::of_f64(2.0);
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let plus = f(&work)?;
        work[i] = theta[i] - eps;
        let minus = f(&work)?;
        work[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_difference_grad evaluation"));
        }
        grad[i] = (plus - minus) / (two * eps);
    }
    Ok(grad)
}

#[cfg(debug_assertions)]
pub(crate) fn debug_check_finite<T: Scalar>(family: &'static str, data: &[T]) {
    for &x in data {
        assert!(x.is_finite(), "{family} produced a non-finite value");
    }
}

#[cfg(not(debug_assertions))]
pub(crate) fn debug_check_finite<T: Scalar>(_family: &'static str, _data: &[T]) {}
